//! Classification datasets: IDX files (MNIST layout) and small synthetic
//! tasks for fast runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labelled samples, stored flat as `[N × d]` with the per-sample shape kept
/// alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub sample_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        sample_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if inputs.shape().len() != 2 || inputs.cols() != d || inputs.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "inputs {:?} do not hold {} samples of shape {sample_shape:?}",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::Numeric("dataset inputs are not finite".into()));
        }
        Ok(Self {
            inputs,
            sample_shape,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.inputs.cols()
    }

    /// Gathers the given rows into a `[b × d]` batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * d..(i + 1) * d]);
        }
        let x = Tensor::new(vec![idx.len(), d], data).expect("batch shape");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Sub-dataset of the given rows. Tensors cannot be empty, so neither can
    /// a selection.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::Usage("empty dataset selection".into()));
        }
        let (inputs, labels) = self.batch(idx);
        Ok(Dataset {
            inputs,
            sample_shape: self.sample_shape.clone(),
            labels,
            num_classes: self.num_classes,
            split: self.split,
        })
    }

    /// Drops every sample of the named classes. Only training splits may be
    /// filtered; evaluation keeps all classes.
    pub fn without_classes(&self, classes: &[usize]) -> Result<Dataset> {
        if self.split != Split::Train {
            return Err(Error::Usage(format!(
                "class filters apply to the train split, not {:?}",
                self.split
            )));
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| !classes.contains(&self.labels[i]))
            .collect();
        self.select(&keep)
    }

    /// Splits off the last `n` samples as a validation set.
    pub fn split_validation(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n >= self.len() {
            return Err(Error::Usage(format!(
                "cannot hold out {n} of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - n;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        let mut val = self.select(&tail)?;
        val.split = Split::Val;
        Ok((self.select(&head)?, val))
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| c[l] += 1);
        c
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{}: truncated IDX header", path.display())))
}

/// Reads an IDX image file; pixels are scaled to `[0, 1]`.
/// Returns `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x} is not an IDX image file",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "{}: header promises {n}×{rows}×{cols} pixels, file holds {}",
            path.display(),
            body.len()
        )));
    }
    Ok((
        n,
        rows,
        cols,
        body.iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!(
            "{}: magic {magic:#010x} is not an IDX label file",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "{}: header promises {n} labels, file holds {}",
            path.display(),
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Pairs an IDX image file with its label file. Samples have shape `1×H×W`.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Format(format!(
            "label {bad} outside {num_classes} classes"
        )));
    }
    let inputs = Tensor::new(vec![n, rows * cols], pixels)?;
    Dataset::new(inputs, vec![1, rows, cols], labels, num_classes, split)
}

/// Writes an IDX image/label pair; pixels are clamped to `[0, 1]` and
/// quantised to bytes.
pub fn write_idx(
    images: &Path,
    labels: &Path,
    pixels: &[f64],
    n: usize,
    rows: usize,
    cols: usize,
    y: &[usize],
) -> Result<()> {
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(images, img)?;
    let mut lab = Vec::with_capacity(8 + y.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(y.len() as u32).to_be_bytes());
    lab.extend(y.iter().map(|&l| l as u8));
    fs::write(labels, lab)?;
    Ok(())
}

/// Directory holding the MNIST IDX files: `$KFLOW_MNIST_DIR`, else
/// `data/mnist` under the current directory.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("KFLOW_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (img, lab) = match split {
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        _ => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    };
    load_idx(&dir.join(img), &dir.join(lab), 10, split)
}

/// Synthetic tasks, all deterministic per `(task, split, seed)` and class
/// balanced to within one sample:
///
/// | id         | input    | classes | structure                                            |
/// |------------|----------|---------|------------------------------------------------------|
/// | `blobs`    | 2        | 4       | Gaussian clusters (σ 0.4) at (±2, ±2); linearly separable |
/// | `moons`    | 2        | 2       | two interleaved half circles, noise σ 0.1              |
/// | `patterns` | 1×8×8    | 6       | row, column, diagonal, anti-diagonal, box, plus; random offset, pixel noise σ 0.15 |
///
/// Split sizes: 1200 train, 300 val, 600 test.
pub const SYNTHETIC_TASKS: [&str; 3] = ["blobs", "moons", "patterns"];

pub fn make_synthetic(task: &str, split: Split, seed: u64) -> Result<Dataset> {
    let (n, stream) = match split {
        Split::Train => (1200, 0),
        Split::Val => (300, 1),
        Split::Test => (600, 2),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let (classes, shape): (usize, Vec<usize>) = match task {
        "blobs" => (4, vec![2]),
        "moons" => (2, vec![2]),
        "patterns" => (6, vec![1, 8, 8]),
        other => {
            return Err(Error::Usage(format!(
                "unknown synthetic task '{other}' (known: {})",
                SYNTHETIC_TASKS.join(", ")
            )))
        }
    };
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let d: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        match task {
            "blobs" => {
                let cx = if y & 1 == 0 { -2.0 } else { 2.0 };
                let cy = if y & 2 == 0 { -2.0 } else { 2.0 };
                data.push(cx + 0.4 * gauss(&mut rng));
                data.push(cy + 0.4 * gauss(&mut rng));
            }
            "moons" => {
                let t = rng.random_range(0.0..std::f64::consts::PI);
                let (x, z) = if y == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                data.push(x + 0.1 * gauss(&mut rng));
                data.push(z + 0.1 * gauss(&mut rng));
            }
            _ => data.extend(pattern(y, &mut rng)),
        }
    }
    Dataset::new(
        Tensor::new(vec![n, d], data)?,
        shape,
        labels,
        classes,
        split,
    )
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    let v: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

fn pattern(class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![0.0; 64];
    let mut set = |r: usize, c: usize| img[r * 8 + c] = 1.0;
    let (r0, c0) = (rng.random_range(1..7), rng.random_range(1..7));
    match class {
        0 => (0..8).for_each(|c| set(r0, c)),
        1 => (0..8).for_each(|r| set(r, c0)),
        2 => (0..8).for_each(|i| set(i, i)),
        3 => (0..8).for_each(|i| set(i, 7 - i)),
        4 => {
            let (r, c) = (r0.min(4), c0.min(4));
            for i in 0..4 {
                set(r, c + i);
                set(r + 3, c + i);
                set(r + i, c);
                set(r + i, c + 3);
            }
        }
        _ => {
            let (r, c) = (r0.clamp(2, 5), c0.clamp(2, 5));
            for i in 0..5 {
                set(r - 2 + i, c);
                set(r, c - 2 + i);
            }
        }
    }
    img.iter().map(|&p| p + 0.15 * gauss(rng)).collect()
}
