//! Gridworlds and a synchronous advantage actor-critic trainer.
//!
//! # Gridworld variants (table version 1)
//!
//! All grids are 8×8 with a wall border. Observations are `6×8×8` one-hot
//! planes: agent, wall, goal, key, closed door, hazard.
//!
//! | variant    | actions | layout                                                       | rewards                                  | slip | limit |
//! |------------|---------|--------------------------------------------------------------|------------------------------------------|------|-------|
//! | `corridor` | 4       | single open row 3, start (3,1), goal (3,6)                   | +1 goal (terminal), −0.01 other steps     | 0    | 50    |
//! | `key_door` | 4       | wall at column 4, door (2,4), key (6,1), goal (6,6); start uniform over free left-room cells | +1 goal (terminal), +0.1 key pickup, −0.01 other steps | 0 | 100 |
//! | `hazard`   | 5       | open room, hazards (3,1..=5) and (5,2..=6), start (1,1), goal (6,6) | +1 goal, −1 hazard (both terminal), −0.01 other steps | 0.1 | 60 |
//!
//! Actions 0–3 move up, down, left, right; action 4 (hazard only) stays.
//! Moving into a wall or a closed door leaves the agent in place and still
//! costs the step penalty. Picking up the key (stepping on it) opens the
//! door. With slip probability `s` the chosen action is replaced by a
//! uniformly random one. Hitting the step limit ends the episode and is
//! treated as terminal (no bootstrap).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flow::{
    build_coupling, dependence_loss, detach_student, fused_forward, fused_predict, is_trust_logit,
    kl_loss, teacher_forward, CouplingState, DetachReport, LinkSpec, OldParams, OldPolicy,
    Schedule, Teacher,
};
use crate::metrics::{MetricsRow, RunMetrics};
use crate::network::{init_params, predict, Activation, NetworkSpec};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const GRID: usize = 8;
pub const CHANNELS: usize = 6;
const AGENT: usize = 0;
const WALL: usize = 1;
const GOAL: usize = 2;
const KEY: usize = 3;
const DOOR: usize = 4;
const HAZARD: usize = 5;

pub const STEP_PENALTY: f64 = -0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Corridor,
    KeyDoor,
    Hazard,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Corridor, Variant::KeyDoor, Variant::Hazard];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Corridor => "corridor",
            Variant::KeyDoor => "key_door",
            Variant::Hazard => "hazard",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown gridworld variant '{s}'")))
    }

    pub fn num_actions(self) -> usize {
        match self {
            Variant::Hazard => 5,
            _ => 4,
        }
    }

    pub fn max_steps(self) -> usize {
        match self {
            Variant::Corridor => 50,
            Variant::KeyDoor => 100,
            Variant::Hazard => 60,
        }
    }

    pub fn slip(self) -> f64 {
        match self {
            Variant::Hazard => 0.1,
            _ => 0.0,
        }
    }

    pub fn observation_shape() -> [usize; 3] {
        [CHANNELS, GRID, GRID]
    }
}

type Pos = (usize, usize);

#[derive(Clone, Debug)]
pub struct GridWorld {
    pub variant: Variant,
    walls: Vec<bool>,
    goal: Pos,
    hazards: Vec<Pos>,
    key: Option<Pos>,
    door: Option<Pos>,
    pub agent: Pos,
    pub steps: usize,
    pub done: bool,
    rng: ChaCha8Rng,
}

impl GridWorld {
    /// A fresh, reset world. `seed` drives start positions and slips.
    pub fn new(variant: Variant, seed: u64) -> Self {
        let mut w = Self {
            variant,
            walls: vec![false; GRID * GRID],
            goal: (0, 0),
            hazards: Vec::new(),
            key: None,
            door: None,
            agent: (0, 0),
            steps: 0,
            done: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        w.reset();
        w
    }

    /// Restores the initial layout and draws a new start. Returns the
    /// observation.
    pub fn reset(&mut self) -> Vec<f64> {
        let border = |r: usize, c: usize| r == 0 || c == 0 || r == GRID - 1 || c == GRID - 1;
        for r in 0..GRID {
            for c in 0..GRID {
                self.walls[r * GRID + c] = border(r, c);
            }
        }
        self.hazards.clear();
        self.key = None;
        self.door = None;
        self.steps = 0;
        self.done = false;
        match self.variant {
            Variant::Corridor => {
                for r in 1..GRID - 1 {
                    if r != 3 {
                        (1..GRID - 1).for_each(|c| self.walls[r * GRID + c] = true);
                    }
                }
                self.agent = (3, 1);
                self.goal = (3, 6);
            }
            Variant::KeyDoor => {
                (1..GRID - 1).for_each(|r| self.walls[r * GRID + 4] = true);
                self.walls[2 * GRID + 4] = false;
                self.door = Some((2, 4));
                self.key = Some((6, 1));
                self.goal = (6, 6);
                let free: Vec<Pos> = (1..7)
                    .flat_map(|r| (1..4).map(move |c| (r, c)))
                    .filter(|&p| p != (6, 1))
                    .collect();
                self.agent = free[self.rng.random_range(0..free.len())];
            }
            Variant::Hazard => {
                self.hazards.extend((1..=5).map(|c| (3, c)));
                self.hazards.extend((2..=6).map(|c| (5, c)));
                self.agent = (1, 1);
                self.goal = (6, 6);
            }
        }
        self.observe()
    }

    pub fn observe(&self) -> Vec<f64> {
        let mut obs = vec![0.0; CHANNELS * GRID * GRID];
        let mut set = |ch: usize, (r, c): Pos| obs[ch * GRID * GRID + r * GRID + c] = 1.0;
        set(AGENT, self.agent);
        for r in 0..GRID {
            for c in 0..GRID {
                if self.walls[r * GRID + c] {
                    set(WALL, (r, c));
                }
            }
        }
        set(GOAL, self.goal);
        if let Some(k) = self.key {
            set(KEY, k);
        }
        if let Some(d) = self.door {
            set(DOOR, d);
        }
        self.hazards.iter().for_each(|&h| set(HAZARD, h));
        obs
    }

    fn blocked(&self, (r, c): Pos) -> bool {
        self.walls[r * GRID + c] || self.door == Some((r, c))
    }

    /// Applies `action`; see the module table for the rules.
    pub fn step(&mut self, action: usize) -> Result<(Vec<f64>, f64, bool)> {
        let n = self.variant.num_actions();
        if action >= n {
            return Err(Error::Usage(format!(
                "action {action} outside 0..{n} for {}",
                self.variant.name()
            )));
        }
        if self.done {
            return Err(Error::Usage(
                "step on a finished episode; call reset".into(),
            ));
        }
        let slip = self.variant.slip();
        let action = if slip > 0.0 && self.rng.random_bool(slip) {
            self.rng.random_range(0..n)
        } else {
            action
        };
        let (r, c) = self.agent;
        let target = match action {
            0 => (r - 1, c),
            1 => (r + 1, c),
            2 => (r, c - 1),
            3 => (r, c + 1),
            _ => (r, c),
        };
        if !self.blocked(target) {
            self.agent = target;
        }
        self.steps += 1;
        let mut reward = STEP_PENALTY;
        let mut terminal = false;
        if self.agent == self.goal {
            reward = 1.0;
            terminal = true;
        } else if self.hazards.contains(&self.agent) {
            reward = -1.0;
            terminal = true;
        } else if self.key == Some(self.agent) {
            self.key = None;
            self.door = None;
            reward = 0.1;
        }
        if self.steps >= self.variant.max_steps() {
            terminal = true;
        }
        self.done = terminal;
        Ok((self.observe(), reward, terminal))
    }
}

/// Free-function form of [`GridWorld::step`].
pub fn env_step(world: &mut GridWorld, action: usize) -> Result<(Vec<f64>, f64, bool)> {
    world.step(action)
}

/// Conv trunk shared by every gridworld agent: `conv1` (8 filters, 3×3) →
/// `fc1` (64) → policy and value heads.
pub fn default_agent_spec(variant: Variant) -> Result<NetworkSpec> {
    NetworkSpec::builder(&Variant::observation_shape())
        .conv2d("conv1", 8, [3, 3], 1, Activation::Relu)
        .dense("fc1", 64, Activation::Relu)
        .actor_critic(variant.num_actions())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// `V(x_{t+k})` when the rollout was cut at `k` steps.
    pub bootstrap: Option<f64>,
    pub terminal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// `R_t = Σᵢ γⁱ r_{t+i} + γ^{n−t} V_boot`, computed back to front with a zero
/// bootstrap for terminal trajectories.
pub fn k_step_returns(rewards: &[f64], gamma: f64, bootstrap: Option<f64>) -> Vec<f64> {
    let mut acc = bootstrap.unwrap_or(0.0);
    let mut out = vec![0.0; rewards.len()];
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// `Σ p ln p` negated, over the last dimension of `logits`.
pub fn entropy(g: &mut Graph, logits: Var) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let p = g.exp(lp)?;
    let plp = g.mul(p, lp)?;
    let s = g.sum_rows(plp)?;
    g.scale(s, -1.0)
}

/// `(1/n) Σ_t [−log π(a_t|x_t)·A_t − β·H(π(·|x_t))]` with constant advantages.
pub fn policy_loss(
    g: &mut Graph,
    logits: Var,
    actions: &[usize],
    advantages: &[f64],
    beta: f64,
) -> Result<Var> {
    if actions.len() != advantages.len() {
        return Err(Error::Dimension("one advantage per action required".into()));
    }
    let lp = g.log_softmax(logits)?;
    let chosen = g.gather(lp, actions)?;
    let adv = g.constant(Tensor::vector(advantages.to_vec()));
    let weighted = g.mul(chosen, adv)?;
    let pg = g.mean(weighted)?;
    let pg = g.scale(pg, -1.0)?;
    if beta == 0.0 {
        return Ok(pg);
    }
    let h = entropy(g, logits)?;
    let mh = g.mean(h)?;
    let bh = g.scale(mh, -beta)?;
    g.add(pg, bh)
}

/// `(1/2n) Σ_t (R_t − V(x_t))²` with constant returns. `values` is `[n × 1]`.
pub fn value_loss(g: &mut Graph, values: Var, returns: &[f64]) -> Result<Var> {
    if g.value(values).len() != returns.len() {
        return Err(Error::Dimension(format!(
            "{} values vs {} returns",
            g.value(values).len(),
            returns.len()
        )));
    }
    let v = g.reshape(values, &[returns.len()])?;
    let r = g.constant(Tensor::vector(returns.to_vec()));
    let d = g.sub(r, v)?;
    let sq = g.mul(d, d)?;
    let m = g.mean(sq)?;
    g.scale(m, 0.5)
}

/// Samples an index from the distribution `softmax(logits)` using one uniform
/// draw, so identical draws give identical actions for nearby distributions.
pub fn sample_action(logits: &[f64], u: f64) -> usize {
    let mut p = logits.to_vec();
    crate::autodiff::softmax_in_place(&mut p);
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Something that maps a batch of observations to `(policy logits, values)`.
pub trait Policy: Sync {
    fn evaluate(&self, obs: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// A standalone actor-critic network.
pub struct NetPolicy<'a> {
    pub spec: &'a NetworkSpec,
    pub params: &'a ParamStore,
}

impl Policy for NetPolicy<'_> {
    fn evaluate(&self, obs: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut out = predict(self.spec, self.params, obs)?;
        let v = out.pop().expect("value head");
        Ok((out.pop().expect("policy head"), v))
    }
}

/// The fused student.
pub struct FusedPolicy<'a> {
    pub coupling: &'a CouplingState,
    pub student: &'a ParamStore,
    pub teachers: &'a [Teacher],
}

impl Policy for FusedPolicy<'_> {
    fn evaluate(&self, obs: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut out = fused_predict(
            self.coupling,
            self.student,
            &self.coupling.params,
            self.teachers,
            obs,
        )?;
        let v = out.pop().expect("value head");
        Ok((out.pop().expect("policy head"), v))
    }
}

fn obs_batch(obs: &[&[f64]]) -> Tensor {
    let d = obs[0].len();
    let data: Vec<f64> = obs.iter().flat_map(|o| o.iter().copied()).collect();
    Tensor::new(vec![obs.len(), d], data).expect("observation batch")
}

/// A world plus the observation it currently shows and a private action RNG.
#[derive(Clone, Debug)]
pub struct Worker {
    pub world: GridWorld,
    pub obs: Vec<f64>,
    rng: ChaCha8Rng,
    episode_reward: f64,
}

impl Worker {
    pub fn new(variant: Variant, seed: u64) -> Self {
        let world = GridWorld::new(variant, seed);
        let obs = world.observe();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            world,
            obs,
            rng,
            episode_reward: 0.0,
        }
    }
}

/// Rollouts of up to `k` steps from every worker, stepped in lock-step so
/// one batched forward serves all workers. Returns the trajectories plus the
/// rewards of episodes that finished.
pub fn collect_rollouts(
    policy: &dyn Policy,
    workers: &mut [Worker],
    k: usize,
) -> Result<(Vec<Trajectory>, Vec<f64>)> {
    let mut trajs: Vec<Trajectory> = workers
        .iter()
        .map(|_| Trajectory {
            observations: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            bootstrap: None,
            terminal: false,
        })
        .collect();
    let mut finished = Vec::new();
    let mut active: Vec<usize> = (0..workers.len()).collect();
    for _ in 0..k {
        if active.is_empty() {
            break;
        }
        let obs: Vec<&[f64]> = active.iter().map(|&i| workers[i].obs.as_slice()).collect();
        let (logits, _) = policy.evaluate(&obs_batch(&obs))?;
        let n_act = logits.cols();
        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let w = &mut workers[i];
            let u: f64 = w.rng.random();
            let a = sample_action(&logits.data()[row * n_act..(row + 1) * n_act], u);
            let (next, r, done) = w.world.step(a)?;
            let t = &mut trajs[i];
            t.observations.push(std::mem::replace(&mut w.obs, next));
            t.actions.push(a);
            t.rewards.push(r);
            w.episode_reward += r;
            if done {
                t.terminal = true;
                finished.push(w.episode_reward);
                w.episode_reward = 0.0;
                w.obs = w.world.reset();
            } else {
                still.push(i);
            }
        }
        active = still;
    }
    if !active.is_empty() {
        let obs: Vec<&[f64]> = active.iter().map(|&i| workers[i].obs.as_slice()).collect();
        let (_, values) = policy.evaluate(&obs_batch(&obs))?;
        for (row, &i) in active.iter().enumerate() {
            trajs[i].bootstrap = Some(values.data()[row]);
        }
    }
    Ok((trajs, finished))
}

/// Single-world form of [`collect_rollouts`].
pub fn collect_rollout(policy: &dyn Policy, worker: &mut Worker, k: usize) -> Result<Trajectory> {
    let (mut t, _) = collect_rollouts(policy, std::slice::from_mut(worker), k)?;
    Ok(t.pop().expect("one trajectory"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub gamma: f64,
    /// Entropy bonus β.
    pub entropy_beta: f64,
    /// Rollout length k.
    pub rollout: usize,
    /// Environment steps summed over workers.
    pub total_steps: u64,
    pub workers: usize,
    pub adam: AdamConfig,
    pub lr_decay: bool,
    pub value_coef: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub old_policy: OldPolicy,
    pub seed: u64,
    /// Metrics row every `log_every` updates.
    pub log_every: u64,
    /// Two optimizer steps per update (policy objective, then value
    /// objective) instead of one combined step.
    pub strict_alternation: bool,
    /// Learning-rate multiplier for the trust logits `w` (1 = one shared
    /// learning rate). Adam moves each logit by about one learning rate per
    /// step, which bounds how fast `p_w` can approach one in short runs.
    pub trust_lr_scale: f64,
    /// Joint gradient-norm clip applied before each optimizer step.
    pub max_grad_norm: Option<f64>,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            entropy_beta: 0.01,
            rollout: 5,
            total_steps: 100_000,
            workers: 16,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            lr_decay: true,
            value_coef: 0.5,
            lambda1: 0.1,
            lambda2: 0.01,
            old_policy: OldPolicy::default(),
            seed: 0,
            log_every: 20,
            strict_alternation: false,
            max_grad_norm: Some(0.5),
            trust_lr_scale: 1.0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.entropy_beta >= 0.0) {
            return bad("entropy_beta must be non-negative");
        }
        if self.rollout == 0 || self.workers == 0 || self.log_every == 0 || self.total_steps == 0 {
            return bad("rollout, workers, total_steps and log_every must be at least 1");
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if !(self.adam.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return bad("max_grad_norm must be positive");
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
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Environment steps taken (all workers) when the episode ended.
    pub env_steps: u64,
    pub reward: f64,
}

#[derive(Clone, Debug)]
pub struct RlRun {
    pub coupling: CouplingState,
    pub student: ParamStore,
    pub report: DetachReport,
    pub metrics: RunMetrics,
    pub episodes: Vec<EpisodeRecord>,
    pub env_steps: u64,
}

impl RlRun {
    pub fn spec(&self) -> &NetworkSpec {
        &self.coupling.student
    }

    /// Mean reward of the last `n` finished episodes.
    pub fn final_reward(&self, n: usize) -> f64 {
        let tail = &self.episodes[self.episodes.len().saturating_sub(n)..];
        if tail.is_empty() {
            return f64::NAN;
        }
        tail.iter().map(|e| e.reward).sum::<f64>() / tail.len() as f64
    }

    /// Area under the learning curve: the training steps are cut into `bins`
    /// equal windows, each scored by the mean reward of episodes ending in
    /// it (an empty window repeats the previous score, or the variant's
    /// timeout return before any episode ends); the result is the mean
    /// score.
    pub fn learning_curve_area(&self, bins: usize, floor: f64) -> f64 {
        learning_curve(&self.episodes, self.env_steps, bins, floor)
            .iter()
            .sum::<f64>()
            / bins as f64
    }
}

/// Mean episode reward per window of environment steps.
pub fn learning_curve(episodes: &[EpisodeRecord], total: u64, bins: usize, floor: f64) -> Vec<f64> {
    let mut sums = vec![(0.0, 0usize); bins];
    for e in episodes {
        let b = ((e.env_steps.saturating_sub(1)) * bins as u64 / total.max(1)) as usize;
        let s = &mut sums[b.min(bins - 1)];
        s.0 += e.reward;
        s.1 += 1;
    }
    let mut last = floor;
    sums.iter()
        .map(|&(s, n)| {
            if n > 0 {
                last = s / n as f64;
            }
            last
        })
        .collect()
}

/// Trains an actor-critic agent on `variant`, optionally with teachers.
pub fn train_rl(
    cfg: &RlConfig,
    variant: Variant,
    spec: &NetworkSpec,
    teachers: &[Teacher],
    links: &[LinkSpec],
) -> Result<RlRun> {
    train_rl_from(
        cfg,
        variant,
        spec,
        init_params(spec, cfg.seed),
        teachers,
        links,
    )
}

pub fn train_rl_from(
    cfg: &RlConfig,
    variant: Variant,
    spec: &NetworkSpec,
    init: ParamStore,
    teachers: &[Teacher],
    links: &[LinkSpec],
) -> Result<RlRun> {
    cfg.validate()?;
    if spec.input_shape != Variant::observation_shape() {
        return Err(Error::Validation(format!(
            "network input {:?} does not match observations {:?}",
            spec.input_shape,
            Variant::observation_shape()
        )));
    }
    if spec.heads.len() != 2 || spec.heads[0].output_len() != variant.num_actions() {
        return Err(Error::Validation(format!(
            "{} needs an actor-critic network with {} actions",
            variant.name(),
            variant.num_actions()
        )));
    }
    for (m, t) in teachers.iter().enumerate() {
        if t.spec.input_shape != spec.input_shape {
            return Err(Error::Validation(format!(
                "teacher {m} observes {:?}",
                t.spec.input_shape
            )));
        }
    }
    // the λ1 ramp and the learning-rate decay both run on environment steps
    let schedule = Schedule {
        lambda1_peak: cfg.lambda1,
        lambda2: cfg.lambda2,
        total_steps: cfg.total_steps,
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
    let mut workers: Vec<Worker> = (0..cfg.workers)
        .map(|i| Worker::new(variant, cfg.seed.wrapping_mul(1000).wrapping_add(i as u64)))
        .collect();
    let layers: Vec<String> = spec.all_layers().map(|l| l.name.clone()).collect();
    let mut metrics = RunMetrics::new(layers);
    let mut episodes = Vec::new();
    let mut env_steps = 0u64;
    let mut window: Vec<f64> = Vec::new();

    let mut update = 0u64;
    while env_steps < cfg.total_steps {
        let policy = FusedPolicy {
            coupling: &coupling,
            student: &student,
            teachers,
        };
        let (trajs, finished) = collect_rollouts(&policy, &mut workers, cfg.rollout)?;
        let steps_now: u64 = trajs.iter().map(|t| t.len() as u64).sum();
        // episodes are stamped with the step count at the end of the batch
        env_steps += steps_now;
        for &r in &finished {
            episodes.push(EpisodeRecord {
                env_steps,
                reward: r,
            });
        }
        window.extend(&finished);

        let losses = rl_update(
            cfg,
            &mut coupling,
            &mut student,
            teachers,
            old.as_mut(),
            &mut adam,
            &trajs,
            env_steps - steps_now,
        )
        .map_err(|e| match e {
            Error::Numeric(m) => {
                Error::Numeric(format!("update {update} (env step {env_steps}): {m}"))
            }
            other => other,
        })?;
        update += 1;
        if update.is_multiple_of(cfg.log_every) || env_steps >= cfg.total_steps {
            let eval =
                (!window.is_empty()).then(|| window.iter().sum::<f64>() / window.len() as f64);
            window.clear();
            metrics.push(MetricsRow {
                step: update,
                epoch_or_episode: episodes.len() as u64,
                task_loss: losses.task,
                dep_loss: losses.dep,
                kl_loss: losses.kl,
                reg_loss: 0.0,
                total_loss: losses.total,
                lambda1: losses.lambda1,
                p_w: coupling
                    .student_weights()
                    .into_iter()
                    .map(|(_, p)| p)
                    .collect(),
                eval_metric: eval,
            });
        }
    }

    let (_, _, report) = detach_student(
        &coupling,
        &student,
        teachers,
        &probe_observations(variant, 64),
    )?;
    Ok(RlRun {
        coupling,
        student,
        report,
        metrics,
        episodes,
        env_steps,
    })
}

struct UpdateLosses {
    task: f64,
    dep: f64,
    kl: Option<f64>,
    lambda1: f64,
    total: f64,
}

#[allow(clippy::too_many_arguments)]
fn rl_update(
    cfg: &RlConfig,
    coupling: &mut CouplingState,
    student: &mut ParamStore,
    teachers: &[Teacher],
    old: Option<&mut OldParams>,
    adam: &mut Adam,
    trajs: &[Trajectory],
    progress: u64,
) -> Result<UpdateLosses> {
    let obs: Vec<&[f64]> = trajs
        .iter()
        .flat_map(|t| t.observations.iter().map(Vec::as_slice))
        .collect();
    let actions: Vec<usize> = trajs
        .iter()
        .flat_map(|t| t.actions.iter().copied())
        .collect();
    let returns: Vec<f64> = trajs
        .iter()
        .flat_map(|t| k_step_returns(&t.rewards, cfg.gamma, t.bootstrap))
        .collect();
    let x = obs_batch(&obs);
    let lambda1 = coupling.schedule.lambda1(progress);
    let factor = if cfg.lr_decay {
        1.0 - progress as f64 / cfg.total_steps as f64
    } else {
        1.0
    };

    // policy objective (+ value objective unless alternating)
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let taps = teacher_forward(&mut g, teachers, xv)?;
    let sb = student.bind(&mut g);
    let cb = coupling.params.bind(&mut g);
    let out = fused_forward(&mut g, coupling, &sb, &cb, &taps, xv)?;
    let (logits, values) = (out.heads[0], out.heads[1]);
    let advantages: Vec<f64> = returns
        .iter()
        .zip(g.value(values).data())
        .map(|(r, v)| r - v)
        .collect();
    let pl = policy_loss(&mut g, logits, &actions, &advantages, cfg.entropy_beta)?;
    let vl = value_loss(&mut g, values, &returns)?;
    let dep = dependence_loss(&mut g, coupling, &cb)?;
    let mut loss = pl;
    if coupling.has_links() && lambda1 > 0.0 {
        let d = g.scale(dep, lambda1)?;
        loss = g.add(loss, d)?;
    }
    let mut kl_value = None;
    if let Some(o) = old.as_deref() {
        let osb = o.student.bind_const(&mut g);
        let ocb = o.coupling.bind_const(&mut g);
        let old_out = fused_forward(&mut g, coupling, &osb, &ocb, &taps, xv)?;
        let kl = kl_loss(&mut g, logits, old_out.heads[0])?;
        kl_value = Some(g.value(kl).item()?);
        let k = g.scale(kl, cfg.lambda2)?;
        loss = g.add(loss, k)?;
    }
    let weighted_v = g.scale(vl, cfg.value_coef)?;
    let combined = g.add(loss, weighted_v)?;
    let task = g.value(pl).item()? + cfg.value_coef * g.value(vl).item()?;
    let total_loss = g.value(combined).item()?;
    let dep_value = g.value(dep).item()?;
    g.backward(if cfg.strict_alternation {
        loss
    } else {
        combined
    })?;
    let (mut sg, mut cg) = (sb.gradients(&g), cb.gradients(&g));
    if let Some(max) = cfg.max_grad_norm {
        clip_grad_norm(&mut [&mut sg, &mut cg], max);
    }
    drop(g);
    if let Some(o) = old {
        o.update(student, &coupling.params, coupling.old_policy);
    }
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

    if cfg.strict_alternation {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let taps = teacher_forward(&mut g, teachers, xv)?;
        let sb = student.bind(&mut g);
        let cb = coupling.params.bind(&mut g);
        let out = fused_forward(&mut g, coupling, &sb, &cb, &taps, xv)?;
        let vl = value_loss(&mut g, out.heads[1], &returns)?;
        let vl = g.scale(vl, cfg.value_coef)?;
        g.backward(vl)?;
        let (mut sg, mut cg) = (sb.gradients(&g), cb.gradients(&g));
        if let Some(max) = cfg.max_grad_norm {
            clip_grad_norm(&mut [&mut sg, &mut cg], max);
        }
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
    }
    Ok(UpdateLosses {
        task,
        dep: dep_value,
        kl: kl_value,
        lambda1,
        total: total_loss,
    })
}

/// `n` observations reached by short uniform random walks, used to compare
/// fused and detached outputs.
pub fn probe_observations(variant: Variant, n: usize) -> Tensor {
    let obs: Vec<Vec<f64>> = (0..n as u64)
        .map(|i| {
            let mut w = GridWorld::new(variant, 0x7072_6f62_0000 + i);
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            for _ in 0..i % 20 {
                let a = rng.random_range(0..variant.num_actions());
                if w.step(a).map(|(_, _, d)| d).unwrap_or(true) {
                    w.reset();
                }
            }
            w.observe()
        })
        .collect();
    let refs: Vec<&[f64]> = obs.iter().map(Vec::as_slice).collect();
    obs_batch(&refs)
}

/// Rewards of `episodes` full episodes, episode `i` seeded with `seed + i`.
pub fn evaluate_policy(
    policy: &dyn Policy,
    variant: Variant,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let rewards = crate::par::map_indexed(episodes, |i| -> Result<f64> {
        let mut w = Worker::new(variant, seed.wrapping_add(i as u64));
        let mut total = 0.0;
        loop {
            let x = obs_batch(&[w.obs.as_slice()]);
            let (logits, _) = policy.evaluate(&x)?;
            let a = sample_action(logits.data(), w.rng.random());
            let (next, r, done) = w.world.step(a)?;
            total += r;
            w.obs = next;
            if done {
                return Ok(total);
            }
        }
    });
    rewards.into_iter().collect()
}

/// Reward obtained by always timing out: every step pays the penalty.
pub fn timeout_return(variant: Variant) -> f64 {
    STEP_PENALTY * variant.max_steps() as f64
}
