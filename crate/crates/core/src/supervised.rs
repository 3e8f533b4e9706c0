//! Classification training: knowledge flow with frozen teachers, plus the
//! scratch, fine-tune and distillation baselines.
//!
//! Every trainer runs the same loop. Per mini-batch the objective is
//!
//! ```text
//! CE(labels, fused logits) + weight_decay·‖θ‖² + λ₁(step)·ℓ_dep + λ₂·ℓ_KL
//! ```
//!
//! followed by one Adam step over the student, the `Q` matrices and the trust
//! logits. With no teachers the fused model is the plain student and the loop
//! is ordinary training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{
    build_coupling, dependence_loss, detach_student, fused_forward, fused_predict, is_trust_logit,
    kl_loss, teacher_forward, CouplingState, DetachReport, LinkSpec, OldParams, OldPolicy,
    Schedule, Teacher,
};
use crate::metrics::{MetricsRow, RunMetrics};
use crate::network::{init_params, predict, NetworkSpec};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub adam: AdamConfig,
    /// Linear learning-rate decay to zero over the run.
    pub lr_decay: bool,
    pub weight_decay: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub old_policy: OldPolicy,
    pub seed: u64,
    /// Metrics row every `log_every` steps (and at every epoch end).
    pub log_every: u64,
    /// Learning-rate multiplier for the trust logits `w` (1 = one shared
    /// learning rate). Adam moves each logit by about one learning rate per
    /// step, which bounds how fast `p_w` can approach one in short runs.
    pub trust_lr_scale: f64,
    /// Size of the probe batch used for the detach report.
    pub probe_size: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            max_steps: None,
            adam: AdamConfig::default(),
            lr_decay: true,
            weight_decay: 0.0,
            lambda1: 0.1,
            lambda2: 0.01,
            old_policy: OldPolicy::default(),
            seed: 0,
            log_every: 50,
            probe_size: 256,
            trust_lr_scale: 1.0,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.adam.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        if !(self.trust_lr_scale > 0.0) {
            return bad("trust_lr_scale must be positive");
        }
        if let OldPolicy::Ema { alpha } = self.old_policy {
            if !(0.0..=1.0).contains(&alpha) {
                return bad("EMA alpha must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, train_len: usize) -> u64 {
        let per_epoch = train_len.div_ceil(self.batch_size) as u64;
        let all = per_epoch * self.epochs as u64;
        self.max_steps.map_or(all, |m| m.min(all))
    }
}

/// Soft-target distillation from one teacher.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the soft-target term; the label term gets `1 − mix`.
    pub mix: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            mix: 0.5,
        }
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct SupervisedRun {
    pub coupling: CouplingState,
    pub student: ParamStore,
    pub report: DetachReport,
    pub metrics: RunMetrics,
    /// Top-1 error of the fused model on the validation set, if one was given.
    pub fused_error: Option<f64>,
    /// Top-1 error of the detached student on the validation set.
    pub detached_error: Option<f64>,
}

impl SupervisedRun {
    pub fn spec(&self) -> &NetworkSpec {
        &self.coupling.student
    }
}

enum Objective<'a> {
    CrossEntropy,
    Distill {
        teacher: &'a Teacher,
        cfg: DistillConfig,
    },
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let picked = g.gather(lp, labels)?;
    let m = g.mean(picked)?;
    g.scale(m, -1.0)
}

/// `softmax(logits / T)` row-wise.
pub fn soft_targets(logits: &Tensor, temperature: f64) -> Tensor {
    let mut t = logits.map(|v| v / temperature);
    for row in t.data_mut().chunks_mut(logits.cols()) {
        crate::autodiff::softmax_in_place(row);
    }
    t
}

/// `mix·T²·CE(softmax(teacher/T), softmax(student/T)) + (1−mix)·CE(labels)`.
pub fn distillation_loss(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: &Tensor,
    labels: &[usize],
    cfg: DistillConfig,
) -> Result<Var> {
    let hard = cross_entropy(g, student_logits, labels)?;
    if cfg.mix == 0.0 {
        return Ok(hard);
    }
    if g.shape(student_logits) != teacher_logits.shape() {
        return Err(Error::Validation(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher_logits.shape(),
            g.shape(student_logits)
        )));
    }
    let t = cfg.temperature;
    let target = g.constant(soft_targets(teacher_logits, t));
    let scaled = g.scale(student_logits, 1.0 / t)?;
    let lq = g.log_softmax(scaled)?;
    let prod = g.mul(target, lq)?;
    let per_row = g.sum_rows(prod)?;
    let m = g.mean(per_row)?;
    let soft = g.scale(m, -cfg.mix * t * t)?;
    let hard = g.scale(hard, 1.0 - cfg.mix)?;
    g.add(soft, hard)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 500;

/// Fraction of samples whose arg-max logit differs from the label, with the
/// logits of a chunk of samples produced by `logits`.
pub fn top1_error_with<F>(ds: &Dataset, logits: F) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync + Send,
{
    if ds.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let ranges = crate::par::chunk_ranges(ds.len(), EVAL_CHUNK);
    let wrong = crate::par::map_indexed(ranges.len(), |c| -> Result<usize> {
        let idx: Vec<usize> = ranges[c].clone().collect();
        let (x, y) = ds.batch(&idx);
        let out = logits(&x)?;
        if out.cols() != ds.num_classes {
            return Err(Error::Validation(format!(
                "model has {} outputs, dataset {} classes",
                out.cols(),
                ds.num_classes
            )));
        }
        Ok(out
            .data()
            .chunks(out.cols())
            .zip(&y)
            .filter(|(row, &l)| argmax(row) != l)
            .count())
    });
    let wrong: usize = wrong.into_iter().sum::<Result<usize>>()?;
    Ok(wrong as f64 / ds.len() as f64)
}

/// Top-1 error of a standalone network.
pub fn evaluate_top1(spec: &NetworkSpec, params: &ParamStore, ds: &Dataset) -> Result<f64> {
    top1_error_with(ds, |x| Ok(predict(spec, params, x)?.swap_remove(0)))
}

/// Top-1 error of the fused model.
pub fn evaluate_fused_top1(
    coupling: &CouplingState,
    student: &ParamStore,
    teachers: &[Teacher],
    ds: &Dataset,
) -> Result<f64> {
    top1_error_with(ds, |x| {
        Ok(fused_predict(coupling, student, &coupling.params, teachers, x)?.swap_remove(0))
    })
}

/// Knowledge-flow training of `spec` with the given teachers and links.
/// With no links this is scratch training.
pub fn train_supervised(
    cfg: &SupervisedConfig,
    spec: &NetworkSpec,
    teachers: &[Teacher],
    links: &[LinkSpec],
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<SupervisedRun> {
    let init = init_params(spec, cfg.seed);
    run(
        cfg,
        spec,
        init,
        teachers,
        links,
        Objective::CrossEntropy,
        train,
        val,
    )
}

pub fn train_scratch(
    cfg: &SupervisedConfig,
    spec: &NetworkSpec,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<SupervisedRun> {
    train_supervised(cfg, spec, &[], &[], train, val)
}

/// Starts from `pretrained`. Trunk layers must match `spec` exactly; the head
/// is copied when its shape matches and freshly initialised otherwise.
pub fn train_finetune(
    cfg: &SupervisedConfig,
    spec: &NetworkSpec,
    pretrained: (&NetworkSpec, &ParamStore),
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<SupervisedRun> {
    let init = finetune_init(spec, pretrained, cfg.seed)?;
    run(
        cfg,
        spec,
        init,
        &[],
        &[],
        Objective::CrossEntropy,
        train,
        val,
    )
}

pub fn finetune_init(
    spec: &NetworkSpec,
    pretrained: (&NetworkSpec, &ParamStore),
    seed: u64,
) -> Result<ParamStore> {
    let (src, src_params) = pretrained;
    if src.input_shape != spec.input_shape || src.layers != spec.layers {
        return Err(Error::Validation(
            "pretrained trunk does not match the target architecture".into(),
        ));
    }
    let mut init = init_params(spec, seed);
    for (name, t) in src_params.iter() {
        if let Some(dst) = init.get(name) {
            if dst.shape() == t.shape() {
                *init.get_mut(name)? = t.clone();
            } else {
                log::info!(
                    "re-initialising '{name}': {:?} → {:?}",
                    t.shape(),
                    dst.shape()
                );
            }
        }
    }
    Ok(init)
}

/// Distillation from `teacher`'s logits.
pub fn train_kd(
    cfg: &SupervisedConfig,
    spec: &NetworkSpec,
    teacher: &Teacher,
    distill: DistillConfig,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<SupervisedRun> {
    if !(distill.temperature > 0.0) || !(0.0..=1.0).contains(&distill.mix) {
        return Err(Error::Config(
            "distillation needs temperature > 0 and mix in [0, 1]".into(),
        ));
    }
    if teacher.spec.output_dim() != spec.output_dim() {
        return Err(Error::Validation(format!(
            "teacher predicts {} classes, student {}",
            teacher.spec.output_dim(),
            spec.output_dim()
        )));
    }
    let init = init_params(spec, cfg.seed);
    run(
        cfg,
        spec,
        init,
        &[],
        &[],
        Objective::Distill {
            teacher,
            cfg: distill,
        },
        train,
        val,
    )
}

/// Shuffled sample order for one epoch.
pub fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// `Σθ²` over every tensor of the store.
pub fn squared_norm(p: &ParamStore) -> f64 {
    p.iter()
        .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// Losses of one step, before scaling by the λ coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub task: f64,
    pub dep: f64,
    pub kl: Option<f64>,
    pub reg: f64,
    pub lambda1: f64,
    pub total: f64,
}

#[allow(clippy::too_many_arguments)]
fn run(
    cfg: &SupervisedConfig,
    spec: &NetworkSpec,
    init: ParamStore,
    teachers: &[Teacher],
    links: &[LinkSpec],
    objective: Objective,
    train: &Dataset,
    val: Option<&Dataset>,
) -> Result<SupervisedRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    if spec.output_dim() != train.num_classes {
        return Err(Error::Validation(format!(
            "network predicts {} classes, dataset has {}",
            spec.output_dim(),
            train.num_classes
        )));
    }
    let total = cfg.total_steps(train.len());
    let schedule = Schedule {
        lambda1_peak: cfg.lambda1,
        lambda2: cfg.lambda2,
        total_steps: total,
    };
    let mut coupling = build_coupling(
        spec,
        teachers,
        links,
        cfg.seed ^ 0x6b66_6c6f_775f_715f,
        schedule,
        cfg.old_policy,
    )?;
    let mut student = init;
    let mut old = (cfg.lambda2 > 0.0).then(|| OldParams::new(&student, &coupling.params));
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let layers: Vec<String> = spec.all_layers().map(|l| l.name.clone()).collect();
    let mut metrics = RunMetrics::new(layers);

    let mut step = 0u64;
    let mut epoch = 0u64;
    'epochs: while step < total {
        let order = epoch_order(train.len(), &mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if step >= total {
                break 'epochs;
            }
            let (x, y) = train.batch(chunk);
            let losses = train_step(
                cfg,
                &mut coupling,
                &mut student,
                teachers,
                &objective,
                old.as_mut(),
                &mut adam,
                &x,
                &y,
                step,
                total,
            )
            .map_err(|e| match e {
                Error::Numeric(m) => {
                    Error::Numeric(format!("step {step} (epoch {epoch}, batch {b}): {m}"))
                }
                other => other,
            });
            let losses = losses?;
            step += 1;
            let epoch_end = (b + 1) * cfg.batch_size >= train.len() || step == total;
            if step.is_multiple_of(cfg.log_every) || epoch_end {
                let eval = match (epoch_end, val) {
                    (true, Some(v)) => Some(evaluate_fused_top1(&coupling, &student, teachers, v)?),
                    _ => None,
                };
                metrics.push(row(step, epoch, &losses, &coupling, eval));
                log::debug!(
                    "step {step} epoch {epoch} loss {:.5} eval {eval:?}",
                    losses.total
                );
            }
        }
        epoch += 1;
    }

    let probe_src = val.unwrap_or(train);
    let probe_idx: Vec<usize> = (0..cfg.probe_size.min(probe_src.len())).collect();
    let (probe, _) = probe_src.batch(&probe_idx);
    let (_, _, report) = detach_student(&coupling, &student, teachers, &probe)?;
    let (fused_error, detached_error) = match val {
        Some(v) => (
            metrics
                .final_eval()
                .or(Some(evaluate_fused_top1(&coupling, &student, teachers, v)?)),
            Some(evaluate_top1(spec, &student, v)?),
        ),
        None => (None, None),
    };
    Ok(SupervisedRun {
        coupling,
        student,
        report,
        metrics,
        fused_error,
        detached_error,
    })
}

fn row(
    step: u64,
    epoch: u64,
    l: &StepLosses,
    coupling: &CouplingState,
    eval: Option<f64>,
) -> MetricsRow {
    MetricsRow {
        step,
        epoch_or_episode: epoch,
        task_loss: l.task,
        dep_loss: l.dep,
        kl_loss: l.kl,
        reg_loss: l.reg,
        total_loss: l.total,
        lambda1: l.lambda1,
        p_w: coupling
            .student_weights()
            .into_iter()
            .map(|(_, p)| p)
            .collect(),
        eval_metric: eval,
    }
}

/// One forward/backward/update.
#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &SupervisedConfig,
    coupling: &mut CouplingState,
    student: &mut ParamStore,
    teachers: &[Teacher],
    objective: &Objective,
    old: Option<&mut OldParams>,
    adam: &mut Adam,
    x: &Tensor,
    y: &[usize],
    step: u64,
    total: u64,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let taps = teacher_forward(&mut g, teachers, xv)?;
    let sb = student.bind(&mut g);
    let cb = coupling.params.bind(&mut g);
    let out = fused_forward(&mut g, coupling, &sb, &cb, &taps, xv)?;
    let logits = out.heads[0];

    let task = match objective {
        Objective::CrossEntropy => cross_entropy(&mut g, logits, y)?,
        Objective::Distill { teacher, cfg } => {
            let t_logits = predict(&teacher.spec, &teacher.params, x)?.swap_remove(0);
            distillation_loss(&mut g, logits, &t_logits, y, *cfg)?
        }
    };
    let lambda1 = coupling.schedule.lambda1(step);
    let dep = dependence_loss(&mut g, coupling, &cb)?;
    let mut loss = task;
    if coupling.has_links() && lambda1 > 0.0 {
        let d = g.scale(dep, lambda1)?;
        loss = g.add(loss, d)?;
    }
    let mut kl_value = None;
    if let Some(old) = old.as_deref() {
        let osb = old.student.bind_const(&mut g);
        let ocb = old.coupling.bind_const(&mut g);
        let old_out = fused_forward(&mut g, coupling, &osb, &ocb, &taps, xv)?;
        let kl = kl_loss(&mut g, logits, old_out.heads[0])?;
        kl_value = Some(g.value(kl).item()?);
        let k = g.scale(kl, cfg.lambda2)?;
        loss = g.add(loss, k)?;
    }
    g.backward(loss)?;

    let mut sg = sb.gradients(&g);
    let cg = cb.gradients(&g);
    let reg = if cfg.weight_decay > 0.0 {
        for (name, t) in student.iter() {
            let gr = sg.get_mut(name).expect("student gradient");
            for (gv, &p) in gr.data_mut().iter_mut().zip(t.data()) {
                *gv += 2.0 * cfg.weight_decay * p;
            }
        }
        cfg.weight_decay * squared_norm(student)
    } else {
        0.0
    };
    let losses = StepLosses {
        task: g.value(task).item()?,
        dep: g.value(dep).item()?,
        kl: kl_value,
        reg,
        lambda1,
        total: g.value(loss).item()? + reg,
    };
    drop(g);

    if let Some(old) = old {
        old.update(student, &coupling.params, coupling.old_policy);
    }
    let factor = if cfg.lr_decay {
        1.0 - step as f64 / total as f64
    } else {
        1.0
    };
    adam.step_scaled(
        &mut [student, &mut coupling.params],
        &[&sg, &cg],
        factor,
        |store, name| {
            if store == 1 && is_trust_logit(name) {
                cfg.trust_lr_scale
            } else {
                1.0
            }
        },
    )?;
    Ok(losses)
}
