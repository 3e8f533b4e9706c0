//! The `train-teacher`, `train-student`, `eval` and `detach` verbs.
//!
//! Every training verb writes into its output directory:
//!
//! * `metrics.csv`: the run metrics,
//! * `model.kflow` (teachers) or `student.kflow` (students): a standalone model,
//! * `checkpoint.kflow`: the coupling checkpoint of knowledge-flow students,
//! * `detach_report.json`: final `p_w` per layer and the probe deviation,
//! * `summary.json`: the final evaluation, read back by `sweep`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kflow::flow::{self, DetachReport, LinkSpec, Teacher};
use kflow::model_io::{load_model, read_container, save_model};
use kflow::network::{init_params, NetworkSpec};
use kflow::rl::{self, FusedPolicy, NetPolicy, Policy, Variant};
use kflow::supervised;
use kflow::{Error, ParamStore, Result, Tensor};

use crate::config::{load_data, load_task, Method, Mode, RunConfig};

/// Episodes per RL evaluation.
pub const EVAL_EPISODES: usize = 30;
/// Seed of the first evaluation episode; fixed so runs are compared on the
/// same episodes.
pub const EVAL_SEED: u64 = 1_000_000;
const PROBE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Replace every teacher by a freshly initialised, frozen copy.
    UntrainedTeachers,
    /// Set λ2 = 0.
    NoKl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    pub method: Method,
    pub seed: u64,
    pub ablate: Option<Ablation>,
    /// `test_error` or `mean_reward`.
    pub metric: String,
    /// Detached (or plain) model on the test set / evaluation episodes.
    pub final_metric: f64,
    /// Fused model, for knowledge-flow runs.
    pub fused_metric: Option<f64>,
    pub p_w: Vec<(String, f64)>,
}

impl Summary {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("summary.json"))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("summary.json: {e}")))
    }

    /// Whether larger values of [`Summary::final_metric`] are better.
    pub fn higher_is_better(metric: &str) -> bool {
        metric == "mean_reward"
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn output_dir(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

struct Loaded {
    teachers: Vec<Teacher>,
    links: Vec<LinkSpec>,
    paths: Vec<String>,
}

/// Loads the configured teachers, or untrained stand-ins of the same
/// architecture written next to the run.
fn load_teachers(cfg: &RunConfig, ablate: Option<Ablation>, out: &Path) -> Result<Loaded> {
    let mut loaded = Loaded {
        teachers: Vec::new(),
        links: Vec::new(),
        paths: Vec::new(),
    };
    for (m, entry) in cfg.teachers.iter().enumerate() {
        let (spec, params) = load_model(&entry.path)
            .map_err(|e| Error::Validation(format!("teacher {}: {e}", entry.path.display())))?;
        let (params, path) = if ablate == Some(Ablation::UntrainedTeachers) {
            let fresh = init_params(&spec, cfg.seed() ^ (0x7465_6163_6800 + m as u64));
            let path = out.join(format!("untrained_teacher_{m}.kflow"));
            save_model(&path, &spec, &fresh)?;
            (fresh, path)
        } else {
            (params, entry.path.clone())
        };
        for (tl, sl) in &entry.links {
            loaded.links.push(LinkSpec::new(m, tl, sl));
        }
        loaded.paths.push(path.display().to_string());
        loaded.teachers.push(Teacher::new(spec, params));
    }
    Ok(loaded)
}

fn apply_ablation(cfg: &mut RunConfig, ablate: Option<Ablation>) {
    if ablate == Some(Ablation::NoKl) {
        cfg.disable_kl();
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn rl_eval(policy: &dyn Policy, variant: Variant) -> Result<Vec<f64>> {
    rl::evaluate_policy(policy, variant, EVAL_EPISODES, EVAL_SEED)
}

pub fn train_teacher(cfg: &RunConfig, out: &Path) -> Result<Summary> {
    let seed = cfg.seed();
    let (summary, metrics) = match cfg.mode {
        Mode::Supervised => {
            let data = load_data(cfg)?;
            let spec = cfg.network_spec(&data.train.sample_shape, data.train.num_classes)?;
            let tc = cfg.supervised();
            let run = match (&cfg.method, &cfg.pretrained) {
                (Method::Finetune, Some(p)) => {
                    let (src, sp) = load_model(p)?;
                    supervised::train_finetune(
                        &tc,
                        &spec,
                        (&src, &sp),
                        &data.train,
                        data.val.as_ref(),
                    )?
                }
                _ => supervised::train_scratch(&tc, &spec, &data.train, data.val.as_ref())?,
            };
            save_model(&out.join("model.kflow"), &spec, &run.student)?;
            let err = supervised::evaluate_top1(&spec, &run.student, &data.test)?;
            (
                summary(cfg, None, "test_error", err, None, Vec::new()),
                run.metrics,
            )
        }
        Mode::Rl => {
            let variant = cfg.variant()?;
            let spec = cfg.network_spec(&Variant::observation_shape(), variant.num_actions())?;
            let rc = cfg.rl_config();
            let init = match (&cfg.method, &cfg.pretrained) {
                (Method::Finetune, Some(p)) => {
                    let (src, sp) = load_model(p)?;
                    supervised::finetune_init(&spec, (&src, &sp), seed)?
                }
                _ => init_params(&spec, seed),
            };
            let run = rl::train_rl_from(&rc, variant, &spec, init, &[], &[])?;
            save_model(&out.join("model.kflow"), &spec, &run.student)?;
            let rewards = rl_eval(
                &NetPolicy {
                    spec: &spec,
                    params: &run.student,
                },
                variant,
            )?;
            (
                summary(
                    cfg,
                    None,
                    "mean_reward",
                    mean_std(&rewards).0,
                    None,
                    Vec::new(),
                ),
                run.metrics,
            )
        }
    };
    metrics.save(&out.join("metrics.csv"))?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn summary(
    cfg: &RunConfig,
    ablate: Option<Ablation>,
    metric: &str,
    value: f64,
    fused: Option<f64>,
    p_w: Vec<(String, f64)>,
) -> Summary {
    Summary {
        task: cfg.task_name(),
        method: cfg.method,
        seed: cfg.seed(),
        ablate,
        metric: metric.into(),
        final_metric: value,
        fused_metric: fused,
        p_w,
    }
}

fn write_coupled(
    out: &Path,
    cfg: &RunConfig,
    ablate: Option<Ablation>,
    coupling: &flow::CouplingState,
    student: &ParamStore,
    report: &DetachReport,
    paths: &[String],
) -> Result<()> {
    let extra = serde_json::json!({
        "task": cfg.task_name(),
        "seed": cfg.seed(),
        "ablate": ablate,
    });
    flow::save_checkpoint(
        &out.join("checkpoint.kflow"),
        coupling,
        student,
        paths,
        extra,
    )?;
    save_model(&out.join("student.kflow"), &coupling.student, student)?;
    write_json(&out.join("detach_report.json"), report)
}

pub fn train_student(cfg: &RunConfig, ablate: Option<Ablation>, out: &Path) -> Result<Summary> {
    let mut cfg = cfg.clone();
    apply_ablation(&mut cfg, ablate);
    let cfg = &cfg;
    let loaded = load_teachers(cfg, ablate, out)?;
    let (summary, metrics) = match cfg.mode {
        Mode::Supervised => {
            let data = load_data(cfg)?;
            let spec = cfg.network_spec(&data.train.sample_shape, data.train.num_classes)?;
            let tc = cfg.supervised();
            let val = data.val.as_ref();
            let run = match cfg.method {
                Method::KnowledgeFlow => supervised::train_supervised(
                    &tc,
                    &spec,
                    &loaded.teachers,
                    &loaded.links,
                    &data.train,
                    val,
                )?,
                Method::Kd => supervised::train_kd(
                    &tc,
                    &spec,
                    &loaded.teachers[0],
                    cfg.distill.unwrap_or_default(),
                    &data.train,
                    val,
                )?,
                Method::Finetune => {
                    let (src, sp) = load_model(cfg.pretrained.as_deref().expect("validated"))?;
                    supervised::train_finetune(&tc, &spec, (&src, &sp), &data.train, val)?
                }
                Method::Scratch => supervised::train_scratch(&tc, &spec, &data.train, val)?,
            };
            let err = supervised::evaluate_top1(&spec, &run.student, &data.test)?;
            let fused = if cfg.method == Method::KnowledgeFlow {
                write_coupled(
                    out,
                    cfg,
                    ablate,
                    &run.coupling,
                    &run.student,
                    &run.report,
                    &loaded.paths,
                )?;
                Some(supervised::evaluate_fused_top1(
                    &run.coupling,
                    &run.student,
                    &loaded.teachers,
                    &data.test,
                )?)
            } else {
                save_model(&out.join("student.kflow"), &spec, &run.student)?;
                None
            };
            let p_w = run.coupling.student_weights();
            (
                summary(cfg, ablate, "test_error", err, fused, p_w),
                run.metrics,
            )
        }
        Mode::Rl => {
            let variant = cfg.variant()?;
            let spec = cfg.network_spec(&Variant::observation_shape(), variant.num_actions())?;
            let rc = cfg.rl_config();
            let (teachers, links): (&[Teacher], &[LinkSpec]) = match cfg.method {
                Method::KnowledgeFlow => (&loaded.teachers, &loaded.links),
                _ => (&[], &[]),
            };
            let init = match cfg.method {
                Method::Finetune => {
                    let (src, sp) = load_model(cfg.pretrained.as_deref().expect("validated"))?;
                    supervised::finetune_init(&spec, (&src, &sp), rc.seed)?
                }
                _ => init_params(&spec, rc.seed),
            };
            let run = rl::train_rl_from(&rc, variant, &spec, init, teachers, links)?;
            let rewards = rl_eval(
                &NetPolicy {
                    spec: &spec,
                    params: &run.student,
                },
                variant,
            )?;
            let fused = if cfg.method == Method::KnowledgeFlow {
                write_coupled(
                    out,
                    cfg,
                    ablate,
                    &run.coupling,
                    &run.student,
                    &run.report,
                    &loaded.paths,
                )?;
                let policy = FusedPolicy {
                    coupling: &run.coupling,
                    student: &run.student,
                    teachers,
                };
                Some(mean_std(&rl_eval(&policy, variant)?).0)
            } else {
                save_model(&out.join("student.kflow"), &spec, &run.student)?;
                None
            };
            let p_w = run.coupling.student_weights();
            (
                summary(cfg, ablate, "mean_reward", mean_std(&rewards).0, fused, p_w),
                run.metrics,
            )
        }
    };
    metrics.save(&out.join("metrics.csv"))?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// A task given on the command line: `mnist`, `synthetic:<name>` or
/// `rl:<variant>`.
pub enum Task {
    Supervised(String),
    Rl(Variant),
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s.strip_prefix("rl:") {
            Some(v) => Ok(Task::Rl(Variant::from_name(v)?)),
            None => Ok(Task::Supervised(s.to_string())),
        }
    }
}

/// Evaluates a model file, or the fused model of a coupling checkpoint.
/// Returns the printed lines.
pub fn eval(model: &Path, task: &Task) -> Result<Vec<String>> {
    let (header, _) = read_container(model)?;
    let mut lines = Vec::new();
    match header.kind.as_str() {
        "model" => {
            let (spec, params) = load_model(model)?;
            match task {
                Task::Supervised(name) => {
                    let (_, test) = load_task(name, None)?;
                    check_compatible(&spec, &test.sample_shape, test.num_classes)?;
                    let err = supervised::evaluate_top1(&spec, &params, &test)?;
                    lines.push(format!("test_error {}", kflow::metrics::fmt_f64(err)));
                }
                Task::Rl(variant) => {
                    check_compatible(&spec, &Variant::observation_shape(), variant.num_actions())?;
                    let rewards = rl_eval(
                        &NetPolicy {
                            spec: &spec,
                            params: &params,
                        },
                        *variant,
                    )?;
                    reward_lines(&rewards, &mut lines);
                }
            }
        }
        "coupling" => {
            let ck = flow::load_checkpoint(model)?;
            let teachers = checkpoint_teachers(&ck)?;
            flow::check_teachers(&ck.coupling, &teachers)?;
            let spec = &ck.coupling.student;
            match task {
                Task::Supervised(name) => {
                    let (_, test) = load_task(name, None)?;
                    check_compatible(spec, &test.sample_shape, test.num_classes)?;
                    let err = supervised::evaluate_fused_top1(
                        &ck.coupling,
                        &ck.student_params,
                        &teachers,
                        &test,
                    )?;
                    lines.push(format!("fused_test_error {}", kflow::metrics::fmt_f64(err)));
                }
                Task::Rl(variant) => {
                    check_compatible(spec, &Variant::observation_shape(), variant.num_actions())?;
                    let policy = FusedPolicy {
                        coupling: &ck.coupling,
                        student: &ck.student_params,
                        teachers: &teachers,
                    };
                    reward_lines(&rl_eval(&policy, *variant)?, &mut lines);
                }
            }
        }
        other => {
            return Err(Error::Format(format!(
                "cannot evaluate a '{other}' container"
            )))
        }
    }
    Ok(lines)
}

fn reward_lines(rewards: &[f64], lines: &mut Vec<String>) {
    for (i, r) in rewards.iter().enumerate() {
        lines.push(format!(
            "episode {i} reward {}",
            kflow::metrics::fmt_f64(*r)
        ));
    }
    let (m, s) = mean_std(rewards);
    lines.push(format!(
        "mean_reward {} std {} episodes {}",
        kflow::metrics::fmt_f64(m),
        kflow::metrics::fmt_f64(s),
        rewards.len()
    ));
}

fn check_compatible(spec: &NetworkSpec, input: &[usize], outputs: usize) -> Result<()> {
    if spec.input_shape != input || spec.heads[0].output_len() != outputs {
        return Err(Error::Validation(format!(
            "model takes {:?} and produces {} outputs; task provides {:?} with {}",
            spec.input_shape,
            spec.heads[0].output_len(),
            input,
            outputs
        )));
    }
    Ok(())
}

fn checkpoint_teachers(ck: &flow::Checkpoint) -> Result<Vec<Teacher>> {
    ck.teacher_paths
        .iter()
        .map(|p| {
            let (spec, params) = load_model(Path::new(p))
                .map_err(|e| Error::Validation(format!("teacher {p}: {e}")))?;
            Ok(Teacher::new(spec, params))
        })
        .collect()
}

fn probe_for(task: &Task) -> Result<Tensor> {
    match task {
        Task::Supervised(name) => {
            let (_, test) = load_task(name, None)?;
            let idx: Vec<usize> = (0..PROBE.min(test.len())).collect();
            Ok(test.batch(&idx).0)
        }
        Task::Rl(v) => Ok(rl::probe_observations(*v, 64)),
    }
}

/// Exports the student of a checkpoint and reports how far it is from the
/// fused model.
pub fn detach(checkpoint: &Path, task: Option<&Task>, out: &Path) -> Result<DetachReport> {
    let ck = flow::load_checkpoint(checkpoint)?;
    let teachers = checkpoint_teachers(&ck)?;
    let stored;
    let task = match task {
        Some(t) => t,
        None => {
            let name = ck.extra["task"].as_str().ok_or_else(|| {
                Error::Usage("checkpoint does not record its task; pass --task".into())
            })?;
            stored = Task::parse(name)?;
            &stored
        }
    };
    let probe = probe_for(task)?;
    let (spec, params, report) =
        flow::detach_student(&ck.coupling, &ck.student_params, &teachers, &probe)?;
    save_model(&out.join("student.kflow"), &spec, &params)?;
    write_json(&out.join("detach_report.json"), &report)?;
    Ok(report)
}
