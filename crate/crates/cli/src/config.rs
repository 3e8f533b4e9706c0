//! Run configuration files.
//!
//! A run is described by one TOML file. Every table rejects unknown keys, and
//! the whole file is validated before anything is computed or written.
//!
//! ```toml
//! mode = "supervised"            # or "rl"
//! method = "knowledge_flow"      # train-student: knowledge_flow | kd | finetune | scratch
//! out = "runs/mnist-kf"          # --out overrides
//!
//! [task]
//! dataset = "mnist"              # or "synthetic:blobs", "synthetic:moons", "synthetic:patterns"
//! exclude_classes = [3]          # dropped from the training split only
//! train_subset = 0               # 0 keeps everything
//! validation = 5000              # samples held out of train for validation
//! # variant = "key_door"         # rl mode: corridor | key_door | hazard
//!
//! [network]
//! hidden = [800, 800]            # dense layers fc1, fc2, ...
//! conv = []                      # conv layers conv1, ... before the dense ones
//! activation = "relu"
//!
//! [[teachers]]
//! path = "runs/teacher/model.kflow"
//! links = [["fc1", "fc1"], ["fc2", "fc2"]]   # teacher layer → student layer
//!
//! [train]                        # supervised trainer settings (mode = "supervised")
//! epochs = 2
//! lambda1 = 0.5
//! lambda2 = 0.01
//! old_policy = { policy = "ema", alpha = 0.9 }
//!
//! [sweep]                        # only read by `kflow sweep`
//! lambda1 = [0.05, 0.1, 0.5]
//! lambda2 = [0.001, 0.01, 0.05]
//! seeds = [0]
//! top_k = 3
//! ```
//!
//! RL runs use an `[rl]` table instead of `[train]`; `pretrained` names the
//! source model for `method = "finetune"` and `[distill]` configures `kd`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kflow::data::{self, Dataset, Split};
use kflow::network::{Activation, NetworkSpec};
use kflow::rl::{RlConfig, Variant};
use kflow::supervised::{DistillConfig, SupervisedConfig};
use kflow::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Rl,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    KnowledgeFlow,
    Kd,
    Finetune,
    Scratch,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub dataset: Option<String>,
    pub exclude_classes: Vec<usize>,
    pub train_subset: usize,
    pub validation: usize,
    pub variant: Option<Variant>,
    /// Overrides `KFLOW_MNIST_DIR`.
    pub data_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub filters: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub conv: Vec<ConvConfig>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            conv: Vec::new(),
            hidden: vec![64],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherEntry {
    pub path: PathBuf,
    #[serde(default)]
    pub links: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub seeds: Vec<u64>,
    pub top_k: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda1: vec![0.05, 0.1, 0.5],
            lambda2: vec![0.001, 0.01, 0.05],
            seeds: vec![0],
            top_k: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub teachers: Vec<TeacherEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<SupervisedConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rl: Option<RlConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn config_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {msg}", path.display()))
}

impl RunConfig {
    /// Parses and validates `path`. Parse errors carry the line and column.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| config_err(path, e))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => config_err(path, m),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.mode {
            Mode::Supervised => {
                if self.rl.is_some() {
                    return bad("[rl] given for a supervised run".into());
                }
                let Some(ds) = &self.task.dataset else {
                    return bad("supervised runs need task.dataset".into());
                };
                if ds != "mnist"
                    && !ds
                        .strip_prefix("synthetic:")
                        .is_some_and(|t| data::SYNTHETIC_TASKS.contains(&t))
                {
                    return bad(format!("unknown dataset '{ds}'"));
                }
                if self.task.variant.is_some() {
                    return bad("task.variant only applies to rl runs".into());
                }
                self.supervised().validate()?;
            }
            Mode::Rl => {
                if self.train.is_some() {
                    return bad("[train] given for an rl run; use [rl]".into());
                }
                if self.task.variant.is_none() {
                    return bad("rl runs need task.variant".into());
                }
                if self.task.dataset.is_some() || !self.task.exclude_classes.is_empty() {
                    return bad(
                        "task.dataset and task.exclude_classes only apply to supervised runs"
                            .into(),
                    );
                }
                if self.method == Method::Kd {
                    return bad("method 'kd' is only available for supervised runs".into());
                }
                self.rl_config().validate()?;
            }
        }
        if self.method == Method::Finetune && self.pretrained.is_none() {
            return bad("method 'finetune' needs `pretrained`".into());
        }
        if self.method == Method::Kd && self.teachers.len() != 1 {
            return bad("method 'kd' needs exactly one teacher".into());
        }
        if let Some(d) = &self.distill {
            if !(d.temperature > 0.0) || !(0.0..=1.0).contains(&d.mix) {
                return bad(
                    "distill.temperature must be positive and distill.mix in [0, 1]".into(),
                );
            }
        }
        if self
            .network
            .conv
            .iter()
            .any(|c| c.filters == 0 || c.kernel == 0 || c.stride == 0)
            || self.network.hidden.contains(&0)
        {
            return bad("network layer sizes must be positive".into());
        }
        if let Some(s) = &self.sweep {
            if s.top_k == 0 {
                return bad("sweep.top_k must be at least 1".into());
            }
        }
        Ok(())
    }

    pub fn supervised(&self) -> SupervisedConfig {
        self.train.clone().unwrap_or_default()
    }

    pub fn rl_config(&self) -> RlConfig {
        self.rl.clone().unwrap_or_default()
    }

    pub fn variant(&self) -> Result<Variant> {
        self.task
            .variant
            .ok_or_else(|| Error::Config("task.variant missing".into()))
    }

    pub fn seed(&self) -> u64 {
        match self.mode {
            Mode::Supervised => self.supervised().seed,
            Mode::Rl => self.rl_config().seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self.mode {
            Mode::Supervised => self.train.get_or_insert_with(Default::default).seed = seed,
            Mode::Rl => self.rl.get_or_insert_with(Default::default).seed = seed,
        }
    }

    pub fn set_lambdas(&mut self, lambda1: f64, lambda2: f64) {
        match self.mode {
            Mode::Supervised => {
                let t = self.train.get_or_insert_with(Default::default);
                (t.lambda1, t.lambda2) = (lambda1, lambda2);
            }
            Mode::Rl => {
                let r = self.rl.get_or_insert_with(Default::default);
                (r.lambda1, r.lambda2) = (lambda1, lambda2);
            }
        }
    }

    pub fn disable_kl(&mut self) {
        match self.mode {
            Mode::Supervised => self.train.get_or_insert_with(Default::default).lambda2 = 0.0,
            Mode::Rl => self.rl.get_or_insert_with(Default::default).lambda2 = 0.0,
        }
    }

    /// Task string understood by `kflow eval --task`.
    pub fn task_name(&self) -> String {
        match self.mode {
            Mode::Supervised => self.task.dataset.clone().unwrap_or_default(),
            Mode::Rl => format!("rl:{}", self.task.variant.map(Variant::name).unwrap_or("?")),
        }
    }

    /// Student architecture for `input_shape` and `outputs` classes/actions.
    pub fn network_spec(&self, input_shape: &[usize], outputs: usize) -> Result<NetworkSpec> {
        let n = &self.network;
        let mut b = NetworkSpec::builder(input_shape);
        for (i, c) in n.conv.iter().enumerate() {
            b = b.conv2d(
                &format!("conv{}", i + 1),
                c.filters,
                [c.kernel, c.kernel],
                c.stride,
                n.activation,
            );
        }
        for (i, &h) in n.hidden.iter().enumerate() {
            b = b.dense(&format!("fc{}", i + 1), h, n.activation);
        }
        match self.mode {
            Mode::Supervised => b.classifier(outputs),
            Mode::Rl => b.actor_critic(outputs),
        }
        .map_err(|e| Error::Config(format!("network: {e}")))
    }
}

/// Train / validation / test sets of a supervised task.
pub struct TaskData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

/// Loads a task by name: `mnist` or `synthetic:<name>`.
pub fn load_task(name: &str, data_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    if name == "mnist" {
        let dir = data_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(data::mnist_dir);
        return Ok((
            data::load_mnist(&dir, Split::Train)?,
            data::load_mnist(&dir, Split::Test)?,
        ));
    }
    let Some(task) = name.strip_prefix("synthetic:") else {
        return Err(Error::Usage(format!("unknown task '{name}'")));
    };
    // synthetic data is fixed per task, independent of the run seed
    Ok((
        data::make_synthetic(task, Split::Train, 0)?,
        data::make_synthetic(task, Split::Test, 0)?,
    ))
}

pub fn load_data(cfg: &RunConfig) -> Result<TaskData> {
    let name = cfg.task.dataset.as_deref().unwrap_or_default();
    let (mut train, test) = load_task(name, cfg.task.data_dir.as_deref())?;
    if !cfg.task.exclude_classes.is_empty() {
        train = train.without_classes(&cfg.task.exclude_classes)?;
    }
    if cfg.task.train_subset > 0 {
        train = train.take(cfg.task.train_subset)?;
    }
    let val = if cfg.task.validation > 0 {
        let (t, v) = train.split_validation(cfg.task.validation)?;
        train = t;
        Some(v)
    } else {
        None
    };
    Ok(TaskData { train, val, test })
}
