//! Acceptance suite: runs criteria 1–10 and prints one PASS/FAIL line each.
//!
//! The full suite trains the MNIST teacher, scratch, distillation and
//! knowledge-flow students plus the gridworld agents; expect a bit over an
//! hour on one core. The MNIST teacher is cached under the cargo target
//! directory. MNIST is read from `$KFLOW_MNIST_DIR`, else `data/mnist` at the
//! workspace root.
//!
//! The process exits 0 even when criteria fail, so that `cargo test` keeps
//! running the rest of the workspace; set `KFLOW_ACCEPTANCE_STRICT=1` to turn
//! any FAIL into a non-zero exit.
//!
//! `KFLOW_ACCEPTANCE_ONLY=1,3,10` runs a subset (criterion 6 needs 5, 7
//! and 8 for its inputs and reports whichever of them ran).

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kflow::data::{load_mnist, make_synthetic, Dataset, Split};
use kflow::flow::{
    build_coupling, dependence_loss, fused_forward, kl_loss, teacher_forward, LinkSpec, OldPolicy,
    Schedule, Teacher,
};
use kflow::gradcheck::{check_graph, check_stores, random_tensor};
use kflow::model_io::{load_model, save_model};
use kflow::network::{forward_with_taps, init_params};
use kflow::optim::{Adam, AdamConfig};
use kflow::rl::{
    default_agent_spec, entropy, evaluate_policy, policy_loss, timeout_return, train_rl,
    value_loss, NetPolicy, RlConfig, RlRun, Variant,
};
use kflow::supervised::{
    cross_entropy, distillation_loss, epoch_order, evaluate_fused_top1, evaluate_top1, train_kd,
    train_scratch, train_supervised, DistillConfig, SupervisedConfig, SupervisedRun,
};
use kflow::{Activation, Graph, NetworkSpec, ParamStore};

const GRAD_TOL: f64 = 1e-6;
const RL_EVAL_EPISODES: usize = 100;
const RL_EVAL_SEED: u64 = 1_000_000;
const RL_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MNIST_SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn fmt_list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

/// One knowledge-flow student run, as seen by the independence check.
struct StudentRun {
    group: &'static str,
    p_w: Vec<f64>,
    detached: f64,
    fused: f64,
    /// Error rates compare in percentage points, rewards relatively.
    is_error: bool,
}

#[derive(Default)]
struct Shared {
    students: Vec<StudentRun>,
}

fn supervised_student(
    group: &'static str,
    run: &SupervisedRun,
    teachers: &[Teacher],
    test: &Dataset,
) -> StudentRun {
    StudentRun {
        group,
        p_w: run.coupling.student_weights().iter().map(|p| p.1).collect(),
        detached: evaluate_top1(run.spec(), &run.student, test).unwrap(),
        fused: evaluate_fused_top1(&run.coupling, &run.student, teachers, test).unwrap(),
        is_error: true,
    }
}

/// Process CPU seconds (user + system) from procfs, falling back to wall
/// time where that is unavailable. Budgets are stated in CPU time.
struct CpuClock {
    wall: Instant,
    cpu: Option<f64>,
}

impl CpuClock {
    fn start() -> Self {
        Self {
            wall: Instant::now(),
            cpu: process_cpu_seconds(),
        }
    }

    fn minutes(&self) -> f64 {
        match (self.cpu, process_cpu_seconds()) {
            (Some(a), Some(b)) => (b - a) / 60.0,
            _ => self.wall.elapsed().as_secs_f64() / 60.0,
        }
    }
}

fn process_cpu_seconds() -> Option<f64> {
    let stat = fs::read_to_string("/proc/self/stat").ok()?;
    // fields after the parenthesised command name; utime and stime are 14 and 15
    let rest = &stat[stat.rfind(')')? + 2..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    let ticks: f64 = f.get(11)?.parse::<f64>().ok()? + f.get(12)?.parse::<f64>().ok()?;
    // procfs reports in USER_HZ, which is 100 on Linux
    Some(ticks / 100.0)
}

// ---------------------------------------------------------------- criterion 1

fn c1_gradients() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_op = "";
    let mut instances = 0;
    let mut record = |op: &'static str, err: f64| {
        instances += 1;
        if err > worst || err.is_nan() {
            worst = if err.is_nan() { f64::INFINITY } else { err };
            worst_op = op;
        }
    };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..5),
        );
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        let bt = random_tensor(&mut rng, &[n, k]);
        let bias = random_tensor(&mut rng, &[n]);
        record(
            "matmul",
            check_graph(&mut rng, &[a.clone(), b], |g, v| g.matmul(v[0], v[1])).unwrap(),
        );
        record(
            "linear",
            check_graph(&mut rng, &[a.clone(), bt, bias], |g, v| {
                let z = g.matmul_bt(v[0], v[1])?;
                g.add_bias(z, v[2])
            })
            .unwrap(),
        );

        let (c, h, w, f) = (
            rng.random_range(1..3),
            rng.random_range(3..6),
            rng.random_range(3..6),
            rng.random_range(1..4),
        );
        let stride = rng.random_range(1..3);
        let x = random_tensor(&mut rng, &[2, c, h, w]);
        let kern = random_tensor(&mut rng, &[f, c, 2, 2]);
        record(
            "conv2d",
            check_graph(&mut rng, &[x, kern], |g, v| g.conv2d(v[0], v[1], stride)).unwrap(),
        );

        let z =
            random_tensor(&mut rng, &[3, 5]).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 });
        record(
            "relu",
            check_graph(&mut rng, std::slice::from_ref(&z), |g, v| g.relu(v[0])).unwrap(),
        );
        record(
            "tanh",
            check_graph(&mut rng, std::slice::from_ref(&z), |g, v| g.tanh(v[0])).unwrap(),
        );
        let big = z.map(|v| 4.0 * v);
        record(
            "softmax",
            check_graph(&mut rng, std::slice::from_ref(&big), |g, v| g.softmax(v[0])).unwrap(),
        );
        record(
            "log_softmax",
            check_graph(&mut rng, std::slice::from_ref(&big), |g, v| {
                g.log_softmax(v[0])
            })
            .unwrap(),
        );

        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
        record(
            "cross_entropy",
            check_graph(&mut rng, std::slice::from_ref(&big), |g, v| {
                cross_entropy(g, v[0], &labels)
            })
            .unwrap(),
        );
        let teacher_logits = random_tensor(&mut rng, &[3, 5]);
        record(
            "distillation",
            check_graph(&mut rng, std::slice::from_ref(&big), |g, v| {
                distillation_loss(g, v[0], &teacher_logits, &labels, DistillConfig::default())
            })
            .unwrap(),
        );
        let old = random_tensor(&mut rng, &[3, 5]);
        record(
            "kl",
            check_graph(&mut rng, std::slice::from_ref(&big), |g, v| {
                let o = g.constant(old.clone());
                kl_loss(g, v[0], o)
            })
            .unwrap(),
        );

        let actions: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let adv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ret: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits = random_tensor(&mut rng, &[4, 3]);
        let values = random_tensor(&mut rng, &[4, 1]);
        record(
            "policy_loss",
            check_graph(&mut rng, std::slice::from_ref(&logits), |g, v| {
                policy_loss(g, v[0], &actions, &adv, 0.01)
            })
            .unwrap(),
        );
        record(
            "entropy",
            check_graph(&mut rng, std::slice::from_ref(&logits), |g, v| {
                entropy(g, v[0])
            })
            .unwrap(),
        );
        record(
            "value_loss",
            check_graph(&mut rng, &[values], |g, v| value_loss(g, v[0], &ret)).unwrap(),
        );

        let (fused, dep) = fused_instance(seed);
        record("fused_forward+dep+kl", fused);
        record("dependence", dep);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = instances >= 100 && worst < GRAD_TOL && secs < 120.0;
    verdict(
        pass,
        format!(
            "{instances} instances, worst relative error {worst:.2e} ({worst_op}), {secs:.1} s"
        ),
    )
}

/// Gradient check of a random fused model: task, dependence and KL terms
/// together with respect to student, `Q` and `w`, plus the dependence cost
/// alone.
fn fused_instance(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
    let t0 = NetworkSpec::mlp(&[4], &[5], Activation::Tanh, 3).unwrap();
    let t1 = NetworkSpec::mlp(&[4], &[3, 4], Activation::Relu, 3).unwrap();
    let teachers = [
        Teacher::new(t0.clone(), init_params(&t0, seed)),
        Teacher::new(t1.clone(), init_params(&t1, seed + 1)),
    ];
    let s = NetworkSpec::mlp(&[4], &[3, 3], Activation::Tanh, 3).unwrap();
    let links = [
        LinkSpec::new(0, "fc1", "fc1"),
        LinkSpec::new(1, "fc2", "fc1"),
        LinkSpec::new(1, "fc1", "fc2"),
        LinkSpec::new(0, "logits", "logits"),
    ];
    let sched = Schedule {
        lambda1_peak: 1.0,
        lambda2: 1.0,
        total_steps: 1,
    };
    let c = build_coupling(&s, &teachers, &links, seed, sched, OldPolicy::default()).unwrap();
    let jitter = |p: &ParamStore, rng: &mut ChaCha8Rng| {
        let mut q = ParamStore::new();
        for (n, t) in p.iter() {
            let mut t = t.clone();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.5..0.5));
            q.insert(n.clone(), t);
        }
        q
    };
    let student = jitter(&init_params(&s, seed + 2), &mut rng);
    let couplers = jitter(&c.params, &mut rng);
    let old_student = jitter(&student, &mut rng);
    let old_couplers = jitter(&couplers, &mut rng);
    let x = random_tensor(&mut rng, &[3, 4]);
    let r = random_tensor(&mut rng, &[3, 3]);

    let full = check_stores(&[student.clone(), couplers.clone()], |g, b| {
        let xv = g.constant(x.clone());
        let taps = teacher_forward(g, &teachers, xv)?;
        let out = fused_forward(g, &c, &b[0], &b[1], &taps, xv)?;
        let osb = old_student.bind_const(g);
        let ocb = old_couplers.bind_const(g);
        let old_out = fused_forward(g, &c, &osb, &ocb, &taps, xv)?;
        let rv = g.constant(r.clone());
        let weighted = g.mul(out.heads[0], rv)?;
        let task = g.sum(weighted)?;
        let dep = dependence_loss(g, &c, &b[1])?;
        let kl = kl_loss(g, out.heads[0], old_out.heads[0])?;
        let sum = g.add(task, dep)?;
        g.add(sum, kl)
    })
    .unwrap();
    let dep = check_stores(&[couplers], |g, b| dependence_loss(g, &c, &b[0])).unwrap();
    (full, dep)
}

// ---------------------------------------------------------------- criterion 2

fn c2_normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = NetworkSpec::mlp(&[6], &[5, 4], Activation::Relu, 3).unwrap();
    let teachers: Vec<Teacher> = (0..3)
        .map(|i| Teacher::new(t.clone(), init_params(&t, i)))
        .collect();
    let s = NetworkSpec::mlp(&[6], &[4, 4], Activation::Relu, 3).unwrap();
    let layers = ["fc1", "fc2", "logits"];
    let sched = Schedule {
        lambda1_peak: 0.1,
        lambda2: 0.01,
        total_steps: 10,
    };
    // a pool of link topologies with one to seven candidates per layer
    let mut templates = Vec::new();
    let mut k = 0u64;
    while templates.len() < 20 {
        k += 1;
        let mut links = Vec::new();
        for (m, _) in teachers.iter().enumerate() {
            for tl in layers {
                for sl in layers {
                    if rng.random_bool(0.3) {
                        links.push(LinkSpec::new(m, tl, sl));
                    }
                }
            }
        }
        // draws that break the linking rules are simply redrawn
        if let Ok(c) = build_coupling(&s, &teachers, &links, k, sched, OldPolicy::default()) {
            templates.push(c);
        }
    }

    let mut worst_sum = 0.0f64;
    let mut bad_entries = 0usize;
    for _ in 0..10_000 {
        let mut c = templates[rng.random_range(0..templates.len())].clone();
        randomize_logits(&mut c.params, &mut rng);
        for (_, p) in c.weights() {
            worst_sum = worst_sum.max((p.sum() - 1.0).abs());
            let singleton = p.len() == 1;
            bad_entries += p
                .data()
                .iter()
                .filter(|&&v| !(v > 0.0 && (v < 1.0 || singleton)))
                .count();
        }
    }

    let mut violations = 0;
    let mut trials = 0;
    while trials < 1000 {
        let mut c = templates[rng.random_range(0..templates.len())].clone();
        randomize_logits(&mut c.params, &mut rng);
        let sets: Vec<String> = c
            .sets
            .iter()
            .filter(|s| !s.is_singleton())
            .map(|s| s.w_name.clone())
            .collect();
        if sets.is_empty() {
            continue;
        }
        trials += 1;
        let name = &sets[rng.random_range(0..sets.len())];
        let before = c.dependence_value();
        let mut g = Graph::new();
        let b = c.params.bind_const(&mut g);
        let dep = dependence_loss(&mut g, &c, &b).unwrap();
        let graph_before = g.value(dep).item().unwrap();
        c.params.get_mut(name).unwrap().data_mut()[0] += rng.random_range(0.01..5.0);
        let after = c.dependence_value();
        if after >= before
            || after.is_nan()
            || before.is_nan()
            || before < 0.0
            || (graph_before - before).abs() > 1e-12
        {
            violations += 1;
        }
    }
    let pass = worst_sum <= 1e-12 && bad_entries == 0 && violations == 0;
    verdict(
        pass,
        format!(
            "10000 states: max |Σp_w − 1| = {worst_sum:.1e}, {bad_entries} entries outside (0,1); {trials} ℓ_dep trials, {violations} violations"
        ),
    )
}

fn randomize_logits(p: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = p
        .names()
        .filter(|n| n.starts_with("w/"))
        .map(String::from)
        .collect();
    for n in names {
        p.get_mut(&n)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-15.0..15.0));
    }
}

// ---------------------------------------------------------------- criterion 3

fn c3_zero_link() -> Verdict {
    let train = make_synthetic("patterns", Split::Train, 0).unwrap();
    let spec = NetworkSpec::mlp(&[1, 8, 8], &[16, 16], Activation::Relu, 6).unwrap();
    let tspec = NetworkSpec::mlp(&[1, 8, 8], &[20], Activation::Relu, 6).unwrap();
    let teachers = [Teacher::new(tspec.clone(), init_params(&tspec, 9))];
    let cfg = SupervisedConfig {
        epochs: 100,
        max_steps: Some(500),
        batch_size: 32,
        adam: AdamConfig {
            lr: 3e-3,
            ..Default::default()
        },
        lambda1: 0.5,
        lambda2: 0.0,
        seed: 21,
        log_every: 1,
        ..Default::default()
    };
    let fused = train_supervised(&cfg, &spec, &teachers, &[], &train, None).unwrap();

    // an independent plain cross-entropy loop over the same batches
    let mut params = init_params(&spec, cfg.seed);
    let mut adam = Adam::new(cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let total = cfg.total_steps(train.len());
    let mut losses = Vec::new();
    'outer: loop {
        for chunk in epoch_order(train.len(), &mut rng).chunks(cfg.batch_size) {
            let step = losses.len() as u64;
            if step == total {
                break 'outer;
            }
            let (x, y) = train.batch(chunk);
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let xv = g.constant(x);
            let out = forward_with_taps(&mut g, &spec, &b, xv).unwrap();
            let loss = cross_entropy(&mut g, out.heads[0], &y).unwrap();
            g.backward(loss).unwrap();
            losses.push(g.value(loss).item().unwrap());
            let grads = b.gradients(&g);
            let factor = 1.0 - step as f64 / total as f64;
            adam.step(&mut [&mut params], &[&grads], factor).unwrap();
        }
    }
    let logged: Vec<f64> = fused.metrics.rows.iter().map(|r| r.task_loss).collect();
    let same_losses = logged.len() == losses.len()
        && logged
            .iter()
            .zip(&losses)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    let same_params = fused.student.bit_eq(&params);
    verdict(
        same_losses && same_params && total == 500,
        format!("{total} steps; per-step loss bit-identical: {same_losses}; final parameters bit-identical: {same_params}"),
    )
}

// ---------------------------------------------------------------- MNIST

fn mnist_dir() -> PathBuf {
    std::env::var_os("KFLOW_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

struct Mnist {
    train: Dataset,
    test: Dataset,
}

fn load_mnist_sets() -> Result<Mnist, String> {
    let dir = mnist_dir();
    let train = load_mnist(&dir, Split::Train)
        .map_err(|e| format!("MNIST not available in {}: {e}", dir.display()))?;
    let test = load_mnist(&dir, Split::Test)
        .map_err(|e| format!("MNIST not available in {}: {e}", dir.display()))?;
    Ok(Mnist { train, test })
}

fn mnist_cfg(epochs: usize, seed: u64, lambda1: f64, lambda2: f64) -> SupervisedConfig {
    SupervisedConfig {
        epochs,
        batch_size: 64,
        adam: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        lambda1,
        lambda2,
        seed,
        log_every: 200,
        // ~4500 decaying steps at 1e-3 move a logit by ~2.25 at most, short of
        // the ~4.6 gap that p_w = 0.99 needs
        trust_lr_scale: 10.0,
        ..Default::default()
    }
}

fn c4_mnist_scratch(mnist: &Result<Mnist, String>) -> Verdict {
    let m = match mnist {
        Ok(m) => m,
        Err(e) => return verdict(false, e.clone()),
    };
    let clock = CpuClock::start();
    let spec = NetworkSpec::mlp(&[1, 28, 28], &[800, 800], Activation::Relu, 10).unwrap();
    let epochs = 5;
    let run = train_scratch(&mnist_cfg(epochs, 0, 0.0, 0.0), &spec, &m.train, None).unwrap();
    let err = evaluate_top1(&spec, &run.student, &m.test).unwrap();
    let mins = clock.minutes();
    verdict(
        err <= 0.025 && mins <= 30.0,
        format!(
            "800-800 after {epochs} epochs: test error {:.2}% (target ≤ 2.5%), {mins:.1} CPU min",
            100.0 * err
        ),
    )
}

/// Full-MNIST 1200-1200 teacher, cached across runs of the suite.
fn mnist_teacher(m: &Mnist) -> Teacher {
    let spec = NetworkSpec::mlp(&[1, 28, 28], &[1200, 1200], Activation::Relu, 10).unwrap();
    let cfg = mnist_cfg(3, 99, 0.0, 0.0);
    let cache =
        Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-mnist-teacher-1200-e3-s99.kflow");
    if let Ok((s, p)) = load_model(&cache) {
        if s == spec {
            return Teacher::new(s, p);
        }
    }
    let run = train_scratch(&cfg, &spec, &m.train, None).unwrap();
    let _ = save_model(&cache, &spec, &run.student);
    Teacher::new(spec, run.student)
}

fn c5_mnist_transfer(mnist: &Result<Mnist, String>, shared: &mut Shared) -> Verdict {
    let m = match mnist {
        Ok(m) => m,
        Err(e) => return verdict(false, e.clone()),
    };
    let clock = CpuClock::start();
    let teacher = mnist_teacher(m);
    let teacher_err = evaluate_top1(&teacher.spec, &teacher.params, &m.test).unwrap();
    let train = m.train.without_classes(&[3]).unwrap();
    let spec = NetworkSpec::mlp(&[1, 28, 28], &[800, 800], Activation::Relu, 10).unwrap();
    let links = [
        LinkSpec::new(0, "fc1", "fc1"),
        LinkSpec::new(0, "fc2", "fc2"),
        LinkSpec::new(0, "logits", "logits"),
    ];
    let teachers = std::slice::from_ref(&teacher);
    let epochs = 5;
    let (mut scratch, mut kd, mut kf) = (Vec::new(), Vec::new(), Vec::new());
    for seed in MNIST_SEEDS {
        let base = mnist_cfg(epochs, seed, 0.0, 0.0);
        let s = train_scratch(&base, &spec, &train, None).unwrap();
        scratch.push(evaluate_top1(&spec, &s.student, &m.test).unwrap());
        let d = train_kd(
            &base,
            &spec,
            &teacher,
            DistillConfig::default(),
            &train,
            None,
        )
        .unwrap();
        kd.push(evaluate_top1(&spec, &d.student, &m.test).unwrap());
        let k = train_supervised(
            &mnist_cfg(epochs, seed, 0.5, 0.01),
            &spec,
            teachers,
            &links,
            &train,
            None,
        )
        .unwrap();
        let st = supervised_student("MNIST w/o 3 KF", &k, teachers, &m.test);
        kf.push(st.detached);
        shared.students.push(st);
    }
    let (ms, mk, mf) = (median(&scratch), median(&kd), median(&kf));
    let mins = clock.minutes();
    let a = mf <= 0.5 * ms;
    let b = mf <= mk + 0.005;
    verdict(
        a && b && mins <= 120.0,
        format!(
            "teacher {:.2}%; median test error scratch {:.2}%, KD {:.2}%, knowledge flow {:.2}% (runs {} / {} / {}); (a) KF ≤ 50% scratch: {a}; (b) KF ≤ KD + 0.5pp: {b}; {mins:.0} CPU min",
            100.0 * teacher_err,
            100.0 * ms,
            100.0 * mk,
            100.0 * mf,
            fmt_list(&scratch),
            fmt_list(&kd),
            fmt_list(&kf)
        ),
    )
}

// ---------------------------------------------------------------- RL

// Adam moves a logit by about one learning rate per update, so with the
// shared rate the trust logits cannot reach p_w = 0.99 within ~1250 decaying
// updates; the trust logits get a 10x rate instead.
fn rl_cfg(seed: u64, lambda1: f64, lambda2: f64) -> RlConfig {
    RlConfig {
        total_steps: 100_000,
        seed,
        lambda1,
        lambda2,
        trust_lr_scale: 10.0,
        ..Default::default()
    }
}

fn rl_links() -> Vec<LinkSpec> {
    vec![
        LinkSpec::new(0, "conv1", "conv1"),
        LinkSpec::new(0, "fc1", "fc1"),
    ]
}

fn eval_detached(spec: &NetworkSpec, params: &ParamStore) -> f64 {
    let r = evaluate_policy(
        &NetPolicy { spec, params },
        Variant::KeyDoor,
        RL_EVAL_EPISODES,
        RL_EVAL_SEED,
    )
    .unwrap();
    r.iter().sum::<f64>() / r.len() as f64
}

fn eval_fused(run: &RlRun, teachers: &[Teacher]) -> f64 {
    let policy = kflow::rl::FusedPolicy {
        coupling: &run.coupling,
        student: &run.student,
        teachers,
    };
    let r = evaluate_policy(&policy, Variant::KeyDoor, RL_EVAL_EPISODES, RL_EVAL_SEED).unwrap();
    r.iter().sum::<f64>() / r.len() as f64
}

/// Key-door runs shared by criteria 6–9.
struct KeyDoor {
    spec: NetworkSpec,
    expert: Teacher,
    expert_reward: f64,
    kf: Vec<RlRun>,
    /// CPU minutes spent training the expert and the knowledge-flow students.
    cpu_minutes: f64,
}

fn key_door_runs() -> KeyDoor {
    let clock = CpuClock::start();
    let v = Variant::KeyDoor;
    let spec = default_agent_spec(v).unwrap();
    let tcfg = RlConfig {
        total_steps: 400_000,
        seed: 100,
        lambda1: 0.0,
        lambda2: 0.0,
        ..Default::default()
    };
    let t = train_rl(&tcfg, v, &spec, &[], &[]).unwrap();
    let expert_reward = eval_detached(&spec, &t.student);
    let expert = Teacher::new(spec.clone(), t.student);
    let links = rl_links();
    let kf = RL_SEEDS
        .iter()
        .map(|&s| {
            train_rl(
                &rl_cfg(s, 0.5, 0.01),
                v,
                &spec,
                std::slice::from_ref(&expert),
                &links,
            )
            .unwrap()
        })
        .collect();
    KeyDoor {
        spec,
        expert,
        expert_reward,
        kf,
        cpu_minutes: clock.minutes(),
    }
}

fn c7_rl_transfer(kd: &KeyDoor, shared: &mut Shared) -> Verdict {
    let clock = CpuClock::start();
    let v = Variant::KeyDoor;
    let floor = timeout_return(v);
    let kf_auc: Vec<f64> = kd
        .kf
        .iter()
        .map(|r| r.learning_curve_area(20, floor))
        .collect();
    let scratch_auc: Vec<f64> = RL_SEEDS
        .iter()
        .map(|&s| {
            train_rl(&rl_cfg(s, 0.0, 0.0), v, &kd.spec, &[], &[])
                .unwrap()
                .learning_curve_area(20, floor)
        })
        .collect();
    let teachers = std::slice::from_ref(&kd.expert);
    for r in &kd.kf {
        shared.students.push(StudentRun {
            group: "key_door KF",
            p_w: r.coupling.student_weights().iter().map(|p| p.1).collect(),
            detached: eval_detached(&kd.spec, &r.student),
            fused: eval_fused(r, teachers),
            is_error: false,
        });
    }
    let mins = kd.cpu_minutes + clock.minutes();
    let (mk, ms) = (median(&kf_auc), median(&scratch_auc));
    verdict(
        mk > ms && mins <= 60.0,
        format!(
            "expert reward {:.3}; median AUC knowledge flow {mk:.3} vs scratch {ms:.3} (runs {} / {}); {mins:.1} CPU min including the expert",
            kd.expert_reward,
            fmt_list(&kf_auc),
            fmt_list(&scratch_auc),
        ),
    )
}

fn c8_ablations(kd: &KeyDoor, shared: &mut Shared) -> Verdict {
    // supervised: six-class patterns from 60 labelled samples
    let full = make_synthetic("patterns", Split::Train, 0).unwrap();
    let test = make_synthetic("patterns", Split::Test, 0).unwrap();
    let small = full.take(60).unwrap();
    let tspec = NetworkSpec::mlp(&[1, 8, 8], &[64, 64], Activation::Relu, 6).unwrap();
    let tcfg = SupervisedConfig {
        epochs: 15,
        adam: AdamConfig {
            lr: 5e-3,
            ..Default::default()
        },
        lambda1: 0.0,
        lambda2: 0.0,
        seed: 11,
        ..Default::default()
    };
    let trained = Teacher::new(
        tspec.clone(),
        train_scratch(&tcfg, &tspec, &full, None).unwrap().student,
    );
    let untrained = Teacher::new(tspec.clone(), init_params(&tspec, 12_345));
    let spec = NetworkSpec::mlp(&[1, 8, 8], &[32, 32], Activation::Relu, 6).unwrap();
    let links = [
        LinkSpec::new(0, "fc1", "fc1"),
        LinkSpec::new(0, "fc2", "fc2"),
        LinkSpec::new(0, "logits", "logits"),
    ];
    let (mut s_tr, mut s_un, mut s_nokl) = (Vec::new(), Vec::new(), Vec::new());
    for seed in RL_SEEDS {
        let cfg = SupervisedConfig {
            epochs: 6000,
            batch_size: 32,
            adam: AdamConfig {
                lr: 5e-3,
                ..Default::default()
            },
            lambda1: 0.5,
            lambda2: 0.01,
            seed,
            log_every: 1000,
            ..Default::default()
        };
        let run = |group: &'static str, t: &Teacher, c: &SupervisedConfig| {
            let r =
                train_supervised(c, &spec, std::slice::from_ref(t), &links, &small, None).unwrap();
            supervised_student(group, &r, std::slice::from_ref(t), &test)
        };
        let a = run("patterns KF", &trained, &cfg);
        s_tr.push(a.detached);
        shared.students.push(a);
        let b = run("patterns untrained teacher", &untrained, &cfg);
        s_un.push(b.detached);
        shared.students.push(b);
        let c = run(
            "patterns no-KL",
            &trained,
            &SupervisedConfig {
                lambda2: 0.0,
                ..cfg.clone()
            },
        );
        s_nokl.push(c.detached);
        shared.students.push(c);
    }

    // RL: key-door, final detached reward
    let v = Variant::KeyDoor;
    let links = rl_links();
    let untrained_rl = Teacher::new(
        kd.spec.clone(),
        init_params(&kd.spec, 100 ^ 0x7465_6163_6800),
    );
    let r_tr: Vec<f64> = kd
        .kf
        .iter()
        .map(|r| eval_detached(&kd.spec, &r.student))
        .collect();
    let mut r_un = Vec::new();
    let mut r_nokl = Vec::new();
    for s in RL_SEEDS {
        let u = train_rl(
            &rl_cfg(s, 0.5, 0.01),
            v,
            &kd.spec,
            std::slice::from_ref(&untrained_rl),
            &links,
        )
        .unwrap();
        r_un.push(eval_detached(&kd.spec, &u.student));
        shared.students.push(StudentRun {
            group: "key_door untrained teacher",
            p_w: u.coupling.student_weights().iter().map(|p| p.1).collect(),
            detached: *r_un.last().unwrap(),
            fused: eval_fused(&u, std::slice::from_ref(&untrained_rl)),
            is_error: false,
        });
        let n = train_rl(
            &rl_cfg(s, 0.5, 0.0),
            v,
            &kd.spec,
            std::slice::from_ref(&kd.expert),
            &links,
        )
        .unwrap();
        r_nokl.push(eval_detached(&kd.spec, &n.student));
        shared.students.push(StudentRun {
            group: "key_door no-KL",
            p_w: n.coupling.student_weights().iter().map(|p| p.1).collect(),
            detached: *r_nokl.last().unwrap(),
            fused: eval_fused(&n, std::slice::from_ref(&kd.expert)),
            is_error: false,
        });
    }

    // errors: lower is better; rewards: higher is better
    let checks = [
        (
            "supervised trained ≤ untrained error",
            median(&s_tr) <= median(&s_un),
        ),
        (
            "supervised with-KL ≤ without-KL error",
            median(&s_tr) <= median(&s_nokl),
        ),
        (
            "RL trained ≥ untrained reward",
            median(&r_tr) >= median(&r_un),
        ),
        (
            "RL with-KL ≥ without-KL reward",
            median(&r_tr) >= median(&r_nokl),
        ),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        failed.is_empty(),
        format!(
            "patterns test error median trained {:.4} / untrained {:.4} / no-KL {:.4}; key_door reward median trained {:.3} / untrained {:.3} / no-KL {:.3}{}",
            median(&s_tr),
            median(&s_un),
            median(&s_nokl),
            median(&r_tr),
            median(&r_un),
            median(&r_nokl),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn c9_ema(kd: &KeyDoor, shared: &mut Shared) -> Verdict {
    let v = Variant::KeyDoor;
    let links = rl_links();
    let snapshot: Vec<f64> = kd
        .kf
        .iter()
        .map(|r| eval_detached(&kd.spec, &r.student))
        .collect();
    let ema: Vec<f64> = RL_SEEDS
        .iter()
        .map(|&s| {
            let cfg = RlConfig {
                old_policy: OldPolicy::Ema { alpha: 0.9 },
                ..rl_cfg(s, 0.5, 0.01)
            };
            let r = train_rl(&cfg, v, &kd.spec, std::slice::from_ref(&kd.expert), &links).unwrap();
            let detached = eval_detached(&kd.spec, &r.student);
            shared.students.push(StudentRun {
                group: "key_door KF with EMA",
                p_w: r.coupling.student_weights().iter().map(|p| p.1).collect(),
                detached,
                fused: eval_fused(&r, std::slice::from_ref(&kd.expert)),
                is_error: false,
            });
            detached
        })
        .collect();
    let (ms, me) = (median(&snapshot), median(&ema));
    let rel = (me - ms).abs() / ms.abs().max(1e-12);
    verdict(
        rel <= 0.10,
        format!(
            "median final reward snapshot {ms:.3}, EMA(0.9) {me:.3}, relative gap {:.1}% (runs {} / {})",
            100.0 * rel,
            fmt_list(&snapshot),
            fmt_list(&ema)
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn c6_independence(shared: &Shared) -> Verdict {
    if shared.students.is_empty() {
        return verdict(false, "no student runs completed");
    }
    let mut groups: Vec<&str> = Vec::new();
    for s in &shared.students {
        if !groups.contains(&s.group) {
            groups.push(s.group);
        }
    }
    let mut pass = true;
    let mut parts = Vec::new();
    for g in groups {
        let runs: Vec<&StudentRun> = shared.students.iter().filter(|s| s.group == g).collect();
        let layers = runs[0].p_w.len();
        let med_pw: Vec<f64> = (0..layers)
            .map(|j| median(&runs.iter().map(|r| r.p_w[j]).collect::<Vec<_>>()))
            .collect();
        let pw_ok = med_pw.iter().all(|&p| p >= 0.99);
        let is_error = runs[0].is_error;
        let gaps: Vec<f64> = runs
            .iter()
            .map(|r| {
                if is_error {
                    (r.detached - r.fused).abs() * 100.0
                } else {
                    (r.detached - r.fused).abs() / r.fused.abs().max(1e-12)
                }
            })
            .collect();
        let gap = median(&gaps);
        let gap_ok = if is_error { gap <= 0.2 } else { gap <= 0.05 };
        pass &= pw_ok && gap_ok;
        parts.push(format!(
            "{g} ({} runs): median p_w {} {}, median detached-vs-fused gap {}",
            runs.len(),
            fmt_list(&med_pw),
            if pw_ok { "ok" } else { "< 0.99" },
            if is_error {
                format!("{gap:.2}pp")
            } else {
                format!("{:.1}%", 100.0 * gap)
            } + if gap_ok { "" } else { " (too large)" }
        ));
    }
    verdict(pass, parts.join("; "))
}

// ---------------------------------------------------------------- criterion 10

fn c10_determinism() -> Verdict {
    let exe = env!("CARGO_BIN_EXE_kflow");
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let teacher_cfg = d.join("teacher.toml");
    fs::write(
        &teacher_cfg,
        "mode = \"supervised\"\n[task]\ndataset = \"synthetic:patterns\"\nvalidation = 200\n[network]\nhidden = [32]\n[train]\nepochs = 4\nseed = 5\nadam = { lr = 0.005 }\n",
    )
    .unwrap();
    let student_cfg = d.join("student.toml");
    fs::write(
        &student_cfg,
        format!(
            "mode = \"supervised\"\n[task]\ndataset = \"synthetic:patterns\"\nvalidation = 200\n[network]\nhidden = [16, 16]\n[[teachers]]\npath = \"{}\"\nlinks = [[\"fc1\", \"fc1\"], [\"fc1\", \"fc2\"], [\"logits\", \"logits\"]]\n[train]\nepochs = 3\nlambda1 = 0.5\nlambda2 = 0.05\nold_policy = {{ policy = \"ema\", alpha = 0.9 }}\n",
            d.join("teacher_a/model.kflow").display()
        ),
    )
    .unwrap();
    let rl_cfg = d.join("rl.toml");
    fs::write(
        &rl_cfg,
        format!(
            "mode = \"rl\"\n[task]\nvariant = \"key_door\"\n[network]\nconv = [{{ filters = 8, kernel = 3 }}]\nhidden = [64]\n[[teachers]]\npath = \"{}\"\nlinks = [[\"fc1\", \"fc1\"]]\n[rl]\ntotal_steps = 5000\nworkers = 4\nlambda1 = 0.5\n",
            d.join("rl_teacher_a/model.kflow").display()
        ),
    )
    .unwrap();
    let rl_teacher_cfg = d.join("rl_teacher.toml");
    fs::write(
        &rl_teacher_cfg,
        "mode = \"rl\"\n[task]\nvariant = \"key_door\"\n[network]\nconv = [{ filters = 8, kernel = 3 }]\nhidden = [64]\n[rl]\ntotal_steps = 5000\nworkers = 4\n",
    )
    .unwrap();

    let run = |verb: &str, cfg: &Path, out: &str, extra: &[&str]| -> Result<PathBuf, String> {
        let out = d.join(out);
        let o = Command::new(exe)
            .arg(verb)
            .arg("--config")
            .arg(cfg)
            .arg("--out")
            .arg(&out)
            .args(["--seed", "3", "--workers", "1"])
            .args(extra)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!(
                "{verb} failed: {}",
                String::from_utf8_lossy(&o.stderr)
            ));
        }
        Ok(out)
    };
    let cases: [(&str, &Path, &str, &[&str]); 5] = [
        ("train-teacher", &teacher_cfg, "teacher", &[]),
        ("train-student", &student_cfg, "student", &[]),
        (
            "train-student",
            &student_cfg,
            "student_nokl",
            &["--ablate", "no-kl"],
        ),
        ("train-teacher", &rl_teacher_cfg, "rl_teacher", &[]),
        ("train-student", &rl_cfg, "rl_student", &[]),
    ];
    let mut identical = 0;
    let mut notes = Vec::new();
    for (verb, cfg, name, extra) in cases {
        let pair = (
            run(verb, cfg, &format!("{name}_a"), extra),
            run(verb, cfg, &format!("{name}_b"), extra),
        );
        match pair {
            (Ok(a), Ok(b)) => {
                let same = fs::read(a.join("metrics.csv")).ok()
                    == fs::read(b.join("metrics.csv")).ok()
                    && fs::read(a.join("summary.json")).ok()
                        == fs::read(b.join("summary.json")).ok();
                if same {
                    identical += 1;
                } else {
                    notes.push(format!("{name} differs"));
                }
            }
            (Err(e), _) | (_, Err(e)) => notes.push(e),
        }
    }
    verdict(
        identical == cases.len(),
        format!(
            "{identical}/{} commands reproduced metrics.csv and summary.json byte-identically{}",
            cases.len(),
            if notes.is_empty() {
                String::new()
            } else {
                format!(" ({})", notes.join("; "))
            }
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<u32>> = std::env::var("KFLOW_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let names = [
        "",
        "gradient oracles",
        "normalization invariants",
        "zero-link equivalence",
        "MNIST scratch baseline",
        "MNIST w/o 3 transfer",
        "independence",
        "key-door transfer",
        "ablation orderings",
        "EMA parity",
        "determinism",
    ];
    let mut results: Vec<(u32, Verdict, Duration)> = Vec::new();
    let mut run = |n: u32, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let t = start.elapsed();
        println!(
            "criterion {n:>2} {} {}: {} [{:.0} s]",
            if v.pass { "PASS" } else { "FAIL" },
            names[n as usize],
            v.detail,
            t.as_secs_f64()
        );
        results.push((n, v, t));
    };

    let mut shared = Shared::default();
    run(1, &mut c1_gradients);
    run(2, &mut c2_normalization);
    run(3, &mut c3_zero_link);
    run(10, &mut c10_determinism);

    let need_rl = [6, 7, 8, 9].iter().any(|&n| wanted(n));
    let key_door = need_rl.then(|| catch_unwind(key_door_runs).ok()).flatten();
    match &key_door {
        Some(kd) => {
            run(7, &mut || c7_rl_transfer(kd, &mut shared));
            run(8, &mut || c8_ablations(kd, &mut shared));
            run(9, &mut || c9_ema(kd, &mut shared));
        }
        None if need_rl => {
            for n in [7, 8, 9] {
                run(n, &mut || {
                    verdict(false, "key-door teacher or student training failed")
                });
            }
        }
        None => {}
    }

    let mnist = if wanted(4) || wanted(5) {
        load_mnist_sets()
    } else {
        Err(String::new())
    };
    run(4, &mut || c4_mnist_scratch(&mnist));
    run(5, &mut || c5_mnist_transfer(&mnist, &mut shared));
    run(6, &mut || c6_independence(&shared));

    results.sort_by_key(|r| r.0);
    let passed = results.iter().filter(|r| r.1.pass).count();
    println!("\nacceptance summary: {passed}/{} passed", results.len());
    for (n, v, _) in &results {
        println!(
            "  {n:>2} {} {}",
            if v.pass { "PASS" } else { "FAIL" },
            names[*n as usize]
        );
    }
    if std::env::var("KFLOW_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") && passed < results.len() {
        std::process::exit(1);
    }
}
