//! Versioned binary container for models and coupling checkpoints.
//!
//! Layout:
//!
//! ```text
//! b"KFLOW1"                magic and version
//! u64 little-endian        header length in bytes
//! header                   UTF-8 JSON (see `Header`)
//! payload                  raw little-endian f64 values, tensors in manifest order
//! ```
//!
//! The header carries the tensor manifest (name, shape, byte offset into the
//! payload), the payload length and its SHA-256, plus a free-form `meta`
//! object (the network spec for model files).

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"KFLOW1";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialises `tensors` under a header of the given kind.
pub fn write_container(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let mut payload = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 8).sum());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        kind: kind.into(),
        meta,
        tensors: entries,
        payload_bytes: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}

/// Reads and verifies a container; tensors are returned in manifest order.
pub fn read_container(path: &Path) -> Result<(Header, IndexMap<String, Tensor>)> {
    let bytes = fs::read(path)?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<(Header, IndexMap<String, Tensor>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic: not a KFLOW1 file".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(Error::Corruption(
            "file ends before the header length".into(),
        ));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(Error::Corruption("file ends inside the header".into()));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &rest[hlen..];
    if (payload.len() as u64) < header.payload_bytes {
        return Err(Error::Corruption(format!(
            "payload truncated: {} of {} bytes",
            payload.len(),
            header.payload_bytes
        )));
    }
    if payload.len() as u64 != header.payload_bytes {
        return Err(Error::Corruption("trailing bytes after payload".into()));
    }
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::Corruption("payload checksum mismatch".into()));
    }
    let mut tensors = IndexMap::new();
    let mut expected_offset = 0u64;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset + 8 * n as u64 > header.payload_bytes {
            return Err(Error::Validation(format!(
                "manifest entry '{}' (shape {:?}, offset {}) does not fit the payload",
                e.name, e.shape, e.offset
            )));
        }
        let start = e.offset as usize;
        let data = payload[start..start + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t =
            Tensor::new(e.shape.clone(), data).map_err(|err| Error::Validation(err.to_string()))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::Validation(format!("duplicate tensor '{}'", e.name)));
        }
        expected_offset += 8 * n as u64;
    }
    if expected_offset != header.payload_bytes {
        return Err(Error::Validation(
            "manifest does not cover the payload".into(),
        ));
    }
    Ok((header, tensors))
}

/// Checks that `params` holds exactly the tensors `spec` requires.
pub fn check_params(spec: &NetworkSpec, params: &ParamStore) -> Result<()> {
    let mut expected = 0;
    for l in spec.all_layers() {
        for (name, shape) in [
            (l.weight_name(), l.weight_shape()),
            (l.bias_name(), l.bias_shape()),
        ] {
            expected += 1;
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Validation(format!(
                        "tensor '{name}' has shape {:?}, layer expects {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Validation(format!("missing tensor '{name}'"))),
            }
        }
    }
    if params.len() != expected {
        return Err(Error::Validation(
            "model file holds tensors the spec does not use".into(),
        ));
    }
    Ok(())
}

pub fn save_model(path: &Path, spec: &NetworkSpec, params: &ParamStore) -> Result<()> {
    check_params(spec, params)?;
    let meta = serde_json::json!({ "spec": spec });
    let tensors: Vec<(&str, &Tensor)> = params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_container(path, "model", meta, &tensors)
}

/// Loads a model; the returned store is unfrozen.
pub fn load_model(path: &Path) -> Result<(NetworkSpec, ParamStore)> {
    let (header, tensors) = read_container(path)?;
    model_from_parts(&header, tensors)
}

pub(crate) fn model_from_parts(
    header: &Header,
    tensors: IndexMap<String, Tensor>,
) -> Result<(NetworkSpec, ParamStore)> {
    if header.kind != "model" {
        return Err(Error::Format(format!(
            "expected a model file, found '{}'",
            header.kind
        )));
    }
    let spec: NetworkSpec = serde_json::from_value(header.meta["spec"].clone())
        .map_err(|e| Error::Format(format!("network spec: {e}")))?;
    spec.validate()?;
    let mut params = ParamStore::new();
    for (n, t) in tensors {
        params.insert(n, t);
    }
    check_params(&spec, &params)?;
    Ok((spec, params))
}
