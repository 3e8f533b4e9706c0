//! Teacher-to-student coupling.
//!
//! Every student layer `j` owns a candidate set made of itself plus any
//! linked teacher layers. A linked teacher layer contributes `Q·z` where `z`
//! is its flattened pre-activation and `Q` a trainable `dim(j) × dim(teacher
//! layer)` matrix. Contributions are mixed with trust weights
//! `p_w = softmax(w_j)` before the student's own activation is applied:
//!
//! ```text
//! h_j = σ( p_w(student)·z_j + Σ_teacher p_w(l)·Q_l·z_l )
//! ```
//!
//! Teachers run unmodified and frozen. The dependence loss pushes every
//! `p_w(student)` to one so that the student can be detached at the end.

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model_io::{check_params, read_container, write_container};
use crate::network::{forward_with_taps, glorot_uniform, NetworkSpec, Tap, TapRecord};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Below this student weight a detached layer is reported as still dependent.
pub const INDEPENDENCE_THRESHOLD: f64 = 0.99;

/// Links teacher `teacher` (0-based), layer `teacher_layer`, into the
/// candidate set of student layer `student_layer`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinkSpec {
    pub teacher: usize,
    pub teacher_layer: String,
    pub student_layer: String,
}

impl LinkSpec {
    pub fn new(teacher: usize, teacher_layer: &str, student_layer: &str) -> Self {
        Self {
            teacher,
            teacher_layer: teacher_layer.into(),
            student_layer: student_layer.into(),
        }
    }
}

/// How `θ_old`, the anchor of the KL term, tracks the trained parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum OldPolicy {
    /// Copy the current parameters after every `every` optimizer steps;
    /// `every = 1` makes `θ_old` the previous iterate.
    Snapshot { every: u64 },
    /// `θ_old ← α·θ_old + (1−α)·θ` after every step.
    Ema { alpha: f64 },
}

impl Default for OldPolicy {
    fn default() -> Self {
        OldPolicy::Snapshot { every: 1 }
    }
}

/// λ₁ ramp and constant λ₂.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lambda1_peak: f64,
    pub lambda2: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn lambda1(&self, step: u64) -> f64 {
        lambda1_at(step, self.total_steps, self.lambda1_peak)
    }
}

/// Linear ramp from 0 at step 0 to `peak` at `total_steps`; steps past the
/// end are clamped to `peak`.
pub fn lambda1_at(step: u64, total_steps: u64, peak: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return peak;
    }
    peak * step as f64 / total_steps as f64
}

/// A frozen teacher network.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub spec: NetworkSpec,
    pub params: ParamStore,
}

impl Teacher {
    pub fn new(spec: NetworkSpec, params: ParamStore) -> Self {
        Self {
            spec,
            params: params.frozen(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub link: LinkSpec,
    pub teacher_dim: usize,
    pub q_name: String,
}

/// `𝕃ʲ` for one student layer. Member 0 is always the student layer itself.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub student_layer: String,
    pub student_dim: usize,
    pub teachers: Vec<Candidate>,
    pub w_name: String,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        1 + self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_singleton(&self) -> bool {
        self.teachers.is_empty()
    }
}

/// Trainable coupling between one student and its teachers.
#[derive(Clone, Debug)]
pub struct CouplingState {
    pub student: NetworkSpec,
    pub links: Vec<LinkSpec>,
    pub sets: Vec<CandidateSet>,
    /// `Q` matrices and trust logits `w`.
    pub params: ParamStore,
    pub schedule: Schedule,
    pub old_policy: OldPolicy,
}

fn q_name(j: &str, link: &LinkSpec) -> String {
    format!("q/{j}/t{}/{}", link.teacher, link.teacher_layer)
}

fn w_name(j: &str) -> String {
    format!("w/{j}")
}

/// Whether a coupling parameter name refers to trust logits `w`.
pub fn is_trust_logit(name: &str) -> bool {
    name.starts_with("w/")
}

fn resolve_sets(
    student: &NetworkSpec,
    teachers: &[&NetworkSpec],
    links: &[LinkSpec],
) -> Result<Vec<CandidateSet>> {
    let mut sets: Vec<CandidateSet> = student
        .all_layers()
        .map(|l| CandidateSet {
            student_layer: l.name.clone(),
            student_dim: l.output_len(),
            teachers: Vec::new(),
            w_name: w_name(&l.name),
        })
        .collect();
    let mut uses: IndexMap<(usize, &str), usize> = IndexMap::new();
    for (k, link) in links.iter().enumerate() {
        if links[..k].contains(link) {
            return Err(Error::Validation(format!("duplicate link {link:?}")));
        }
        let Some(t) = teachers.get(link.teacher) else {
            return Err(Error::Validation(format!(
                "link {link:?} names teacher {} but only {} are loaded",
                link.teacher,
                teachers.len()
            )));
        };
        let Some(tl) = t.layer(&link.teacher_layer) else {
            return Err(Error::Validation(format!(
                "link {link:?}: teacher {} has no layer '{}'",
                link.teacher, link.teacher_layer
            )));
        };
        let Some(j) = student.layer_index(&link.student_layer) else {
            return Err(Error::Validation(format!(
                "link {link:?}: student has no layer '{}'",
                link.student_layer
            )));
        };
        let n = uses.entry((link.teacher, tl.name.as_str())).or_insert(0);
        *n += 1;
        if *n > 2 {
            return Err(Error::Validation(format!(
                "teacher {} layer '{}' is linked into more than two student layers",
                link.teacher, tl.name
            )));
        }
        let set = &mut sets[j];
        set.teachers.push(Candidate {
            link: link.clone(),
            teacher_dim: tl.output_len(),
            q_name: q_name(&set.student_layer, link),
        });
    }
    Ok(sets)
}

/// Validates the links and initialises `Q` (Glorot-uniform) and `w` (zeros,
/// i.e. uniform trust within every candidate set).
pub fn build_coupling(
    student: &NetworkSpec,
    teachers: &[Teacher],
    links: &[LinkSpec],
    seed: u64,
    schedule: Schedule,
    old_policy: OldPolicy,
) -> Result<CouplingState> {
    for (m, t) in teachers.iter().enumerate() {
        if !t.params.is_frozen() {
            return Err(Error::Usage(format!(
                "teacher {m} parameters are not frozen"
            )));
        }
        if t.spec.input_shape != student.input_shape {
            return Err(Error::Validation(format!(
                "teacher {m} consumes input {:?}, student {:?}",
                t.spec.input_shape, student.input_shape
            )));
        }
    }
    let specs: Vec<&NetworkSpec> = teachers.iter().map(|t| &t.spec).collect();
    let sets = resolve_sets(student, &specs, links)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for set in &sets {
        for c in &set.teachers {
            let q = glorot_uniform(
                &mut rng,
                &[set.student_dim, c.teacher_dim],
                c.teacher_dim,
                set.student_dim,
            );
            params.insert(c.q_name.clone(), q);
        }
        params.insert(set.w_name.clone(), Tensor::zeros(&[set.len()]));
    }
    Ok(CouplingState {
        student: student.clone(),
        links: links.to_vec(),
        sets,
        params,
        schedule,
        old_policy,
    })
}

/// `p_w = softmax(w)`.
pub fn normalized_weights(logits: &Tensor) -> Tensor {
    let mut data = logits.data().to_vec();
    crate::autodiff::softmax_in_place(&mut data);
    Tensor::vector(data)
}

impl CouplingState {
    pub fn has_links(&self) -> bool {
        !self.links.is_empty()
    }

    /// Number of student layers `L₀` (trunk plus heads).
    pub fn num_student_layers(&self) -> usize {
        self.sets.len()
    }

    pub fn num_teachers(&self) -> usize {
        self.links.iter().map(|l| l.teacher + 1).max().unwrap_or(0)
    }

    /// `p_w` over the candidate set of every student layer, in layer order.
    pub fn weights(&self) -> Vec<(String, Tensor)> {
        self.weights_from(&self.params)
    }

    fn weights_from(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        self.sets
            .iter()
            .map(|s| {
                let w = params.get(&s.w_name).expect("trust logits");
                (s.student_layer.clone(), normalized_weights(w))
            })
            .collect()
    }

    /// `p_w(l₀ʲ)` for every student layer.
    pub fn student_weights(&self) -> Vec<(String, f64)> {
        self.weights()
            .into_iter()
            .map(|(n, p)| (n, p.data()[0]))
            .collect()
    }

    /// Value of the dependence loss for the current logits.
    pub fn dependence_value(&self) -> f64 {
        let l0 = self.num_student_layers() as f64;
        -self
            .student_weights()
            .iter()
            .map(|(_, p)| p.ln())
            .sum::<f64>()
            / l0
    }
}

/// Output of the fused student.
#[derive(Clone, Debug)]
pub struct FusedOutput {
    pub heads: Vec<Var>,
    /// Student taps: `z` is the student's own pre-activation, `h` the
    /// activation of the mixed representation.
    pub taps: TapRecord,
    /// `p_w` node per student layer; `None` for singleton candidate sets.
    pub weights: Vec<Option<Var>>,
}

/// Runs every teacher unfused on `x`.
pub fn teacher_forward(g: &mut Graph, teachers: &[Teacher], x: Var) -> Result<Vec<TapRecord>> {
    teachers
        .iter()
        .map(|t| {
            let bound = t.params.bind_const(g);
            Ok(forward_with_taps(g, &t.spec, &bound, x)?.taps)
        })
        .collect()
}

/// Student forward pass with teacher representations mixed in.
pub fn fused_forward(
    g: &mut Graph,
    coupling: &CouplingState,
    student: &Bound,
    couplers: &Bound,
    teacher_taps: &[TapRecord],
    x: Var,
) -> Result<FusedOutput> {
    let spec = &coupling.student;
    let mut h = crate::network::flatten_input(g, spec, x)?;
    let mut trunk_out = h;
    let mut taps = TapRecord::new();
    let mut heads = Vec::new();
    let mut weights = Vec::with_capacity(coupling.sets.len());
    let n_trunk = spec.layers.len();
    for (j, (layer, set)) in spec.all_layers().zip(&coupling.sets).enumerate() {
        let input = if j < n_trunk { h } else { trunk_out };
        let z = layer.pre_activation(g, student, input)?;
        let mixed = if set.is_singleton() {
            weights.push(None);
            z
        } else {
            let p = g.softmax(couplers.var(&set.w_name)?)?;
            weights.push(Some(p));
            let mut acc = g.scale_by_elem(z, p, 0)?;
            for (k, c) in set.teachers.iter().enumerate() {
                let tz = teacher_taps
                    .get(c.link.teacher)
                    .and_then(|t| t.get(&c.link.teacher_layer))
                    .ok_or_else(|| {
                        Error::Validation(format!("no teacher tap for link {:?}", c.link))
                    })?
                    .z;
                let q = couplers.var(&c.q_name)?;
                let qz = g
                    .matmul_bt(tz, q)
                    .map_err(|e| Error::Dimension(format!("link {:?}: {e}", c.link)))?;
                let term = g.scale_by_elem(qz, p, k + 1)?;
                acc = g
                    .add(acc, term)
                    .map_err(|e| Error::Dimension(format!("link {:?}: {e}", c.link)))?;
            }
            acc
        };
        let out = layer.activation.apply(g, mixed)?;
        taps.insert(layer.name.clone(), Tap { z, h: out });
        if j < n_trunk {
            h = out;
            trunk_out = out;
        } else {
            heads.push(out);
        }
    }
    Ok(FusedOutput {
        heads,
        taps,
        weights,
    })
}

/// `ℓ_dep = −(1/L₀) Σⱼ log p_w(l₀ʲ)` as a graph node.
pub fn dependence_loss(g: &mut Graph, coupling: &CouplingState, couplers: &Bound) -> Result<Var> {
    let mut total: Option<Var> = None;
    for set in coupling.sets.iter().filter(|s| !s.is_singleton()) {
        let w = couplers.var(&set.w_name)?;
        let w = g.reshape(w, &[1, set.len()])?;
        let lp = g.log_softmax(w)?;
        let own = g.gather(lp, &[0])?;
        total = Some(match total {
            Some(t) => g.add(t, own)?,
            None => own,
        });
    }
    match total {
        Some(t) => g.scale(t, -1.0 / coupling.num_student_layers() as f64),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

/// Mean over rows of `D_KL[softmax(current) ‖ softmax(old)]`. The old side is
/// treated as a constant.
pub fn kl_loss(g: &mut Graph, current_logits: Var, old_logits: Var) -> Result<Var> {
    if g.shape(current_logits) != g.shape(old_logits) {
        return Err(Error::Dimension(format!(
            "kl_loss: {:?} vs {:?}",
            g.shape(current_logits),
            g.shape(old_logits)
        )));
    }
    let old = g.detach(old_logits);
    let lq = g.log_softmax(old)?;
    let lq = g.detach(lq);
    let lp = g.log_softmax(current_logits)?;
    let p = g.exp(lp)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let per_row = g.sum_rows(terms)?;
    g.mean(per_row)
}

/// `Σ p ln(p/q)` for explicit distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// Copy of every output-determining fused parameter used as the KL anchor.
#[derive(Clone, Debug)]
pub struct OldParams {
    pub student: ParamStore,
    pub coupling: ParamStore,
    updates: u64,
}

impl OldParams {
    pub fn new(student: &ParamStore, coupling: &ParamStore) -> Self {
        Self {
            student: student.clone().unfrozen(),
            coupling: coupling.clone().unfrozen(),
            updates: 0,
        }
    }

    /// Applies `policy` after one optimizer step whose pre-update parameters
    /// were `student`/`coupling`.
    pub fn update(&mut self, student: &ParamStore, coupling: &ParamStore, policy: OldPolicy) {
        self.updates += 1;
        match policy {
            OldPolicy::Snapshot { every } => {
                if every <= 1 || self.updates.is_multiple_of(every) {
                    self.student = student.clone().unfrozen();
                    self.coupling = coupling.clone().unfrozen();
                }
            }
            OldPolicy::Ema { alpha } => {
                ema_into(&mut self.student, student, alpha);
                ema_into(&mut self.coupling, coupling, alpha);
            }
        }
    }
}

fn ema_into(old: &mut ParamStore, current: &ParamStore, alpha: f64) {
    for (name, o) in old.iter_mut() {
        let c = current.get(name).expect("matching parameter sets");
        for (ov, cv) in o.data_mut().iter_mut().zip(c.data()) {
            *ov = alpha * *ov + (1.0 - alpha) * cv;
        }
    }
}

/// Free-function form of [`OldParams::update`].
pub fn update_old_params(
    mut old: OldParams,
    student: &ParamStore,
    coupling: &ParamStore,
    policy: OldPolicy,
) -> OldParams {
    old.update(student, coupling, policy);
    old
}

/// Forward pass of the fused model without gradient tracking.
pub fn fused_predict(
    coupling: &CouplingState,
    student: &ParamStore,
    couplers: &ParamStore,
    teachers: &[Teacher],
    input: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let taps = teacher_forward(&mut g, teachers, x)?;
    let sb = student.bind_const(&mut g);
    let cb = couplers.bind_const(&mut g);
    let out = fused_forward(&mut g, coupling, &sb, &cb, &taps, x)?;
    Ok(out.heads.iter().map(|&v| g.value(v).clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetachReport {
    /// `p_w(l₀ʲ)` per student layer.
    pub student_weights: Vec<(String, f64)>,
    /// Max-norm difference of all head outputs, fused vs detached, on the probe.
    pub max_deviation: f64,
    /// Layers whose student weight is below [`INDEPENDENCE_THRESHOLD`].
    pub dependent_layers: Vec<String>,
}

impl DetachReport {
    pub fn is_independent(&self) -> bool {
        self.dependent_layers.is_empty()
    }

    pub fn min_student_weight(&self) -> f64 {
        self.student_weights
            .iter()
            .map(|(_, p)| *p)
            .fold(1.0, f64::min)
    }
}

/// Returns the student on its own plus a report comparing it to the fused
/// model on `probe`. Layers still leaning on teachers are logged as warnings.
pub fn detach_student(
    coupling: &CouplingState,
    student: &ParamStore,
    teachers: &[Teacher],
    probe: &Tensor,
) -> Result<(NetworkSpec, ParamStore, DetachReport)> {
    let fused = fused_predict(coupling, student, &coupling.params, teachers, probe)?;
    let alone = crate::network::predict(&coupling.student, student, probe)?;
    let max_deviation = fused
        .iter()
        .zip(&alone)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    let student_weights = coupling.student_weights();
    let dependent_layers: Vec<String> = student_weights
        .iter()
        .filter(|(_, p)| *p < INDEPENDENCE_THRESHOLD)
        .map(|(n, _)| n.clone())
        .collect();
    if !dependent_layers.is_empty() {
        log::warn!(
            "student still depends on teachers at layers {dependent_layers:?} (p_w < {INDEPENDENCE_THRESHOLD})"
        );
    }
    let report = DetachReport {
        student_weights,
        max_deviation,
        dependent_layers,
    };
    Ok((coupling.student.clone(), student.clone().unfrozen(), report))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    student: NetworkSpec,
    links: Vec<LinkSpec>,
    schedule: Schedule,
    old_policy: OldPolicy,
    teacher_paths: Vec<String>,
    extra: serde_json::Value,
}

/// A coupling checkpoint as stored on disk.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub coupling: CouplingState,
    pub student_params: ParamStore,
    pub teacher_paths: Vec<String>,
    pub extra: serde_json::Value,
}

/// Writes the student parameters, `Q`, `w` and the coupling description in
/// the model container format.
pub fn save_checkpoint(
    path: &Path,
    coupling: &CouplingState,
    student_params: &ParamStore,
    teacher_paths: &[String],
    extra: serde_json::Value,
) -> Result<()> {
    check_params(&coupling.student, student_params)?;
    let meta = CheckpointMeta {
        student: coupling.student.clone(),
        links: coupling.links.clone(),
        schedule: coupling.schedule,
        old_policy: coupling.old_policy,
        teacher_paths: teacher_paths.to_vec(),
        extra,
    };
    let meta = serde_json::to_value(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let names: Vec<(String, &Tensor)> = student_params
        .iter()
        .map(|(n, t)| (format!("student/{n}"), t))
        .chain(
            coupling
                .params
                .iter()
                .map(|(n, t)| (format!("coupling/{n}"), t)),
        )
        .collect();
    let tensors: Vec<(&str, &Tensor)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    write_container(path, "coupling", meta, &tensors)
}

/// Loads a checkpoint. Teacher layer dimensions are taken from the stored `Q`
/// shapes, so teachers need not be present.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, tensors) = read_container(path)?;
    if header.kind != "coupling" {
        return Err(Error::Format(format!(
            "expected a coupling checkpoint, found '{}'",
            header.kind
        )));
    }
    let meta: CheckpointMeta = serde_json::from_value(header.meta)
        .map_err(|e| Error::Format(format!("checkpoint meta: {e}")))?;
    meta.student.validate()?;
    let mut student_params = ParamStore::new();
    let mut couplers = ParamStore::new();
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix("student/") {
            student_params.insert(n, t);
        } else if let Some(n) = name.strip_prefix("coupling/") {
            couplers.insert(n, t);
        } else {
            return Err(Error::Validation(format!(
                "unexpected tensor '{name}' in checkpoint"
            )));
        }
    }
    check_params(&meta.student, &student_params)?;
    let mut sets: Vec<CandidateSet> = meta
        .student
        .all_layers()
        .map(|l| CandidateSet {
            student_layer: l.name.clone(),
            student_dim: l.output_len(),
            teachers: Vec::new(),
            w_name: w_name(&l.name),
        })
        .collect();
    for link in &meta.links {
        let j = meta
            .student
            .layer_index(&link.student_layer)
            .ok_or_else(|| {
                Error::Validation(format!("link {link:?} names an unknown student layer"))
            })?;
        let name = q_name(&sets[j].student_layer, link);
        let q = couplers
            .get(&name)
            .ok_or_else(|| Error::Validation(format!("missing tensor '{name}'")))?;
        if q.shape().len() != 2 || q.shape()[0] != sets[j].student_dim {
            return Err(Error::Validation(format!(
                "tensor '{name}' has shape {:?}",
                q.shape()
            )));
        }
        let teacher_dim = q.shape()[1];
        sets[j].teachers.push(Candidate {
            link: link.clone(),
            teacher_dim,
            q_name: name,
        });
    }
    for s in &sets {
        match couplers.get(&s.w_name) {
            Some(w) if w.shape() == [s.len()] => {}
            _ => {
                return Err(Error::Validation(format!(
                    "trust logits '{}' missing or misshaped",
                    s.w_name
                )))
            }
        }
    }
    let expected = sets.iter().map(CandidateSet::len).sum::<usize>();
    if couplers.len() != expected {
        return Err(Error::Validation(
            "checkpoint holds unexpected coupling tensors".into(),
        ));
    }
    let coupling = CouplingState {
        student: meta.student,
        links: meta.links,
        sets,
        params: couplers,
        schedule: meta.schedule,
        old_policy: meta.old_policy,
    };
    Ok(Checkpoint {
        coupling,
        student_params,
        teacher_paths: meta.teacher_paths,
        extra: meta.extra,
    })
}

/// Checks that loaded teachers fit the links of a restored coupling.
pub fn check_teachers(coupling: &CouplingState, teachers: &[Teacher]) -> Result<()> {
    let specs: Vec<&NetworkSpec> = teachers.iter().map(|t| &t.spec).collect();
    let sets = resolve_sets(&coupling.student, &specs, &coupling.links)?;
    for (a, b) in sets.iter().zip(&coupling.sets) {
        for (ca, cb) in a.teachers.iter().zip(&b.teachers) {
            if ca.teacher_dim != cb.teacher_dim {
                return Err(Error::Validation(format!(
                    "teacher layer size changed for link {:?}",
                    ca.link
                )));
            }
        }
    }
    Ok(())
}
