//! Drives the `kflow` binary end to end on the small synthetic tasks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kflow"))
        .args(args)
        .output()
        .expect("spawn kflow")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const TEACHER: &str = r#"
mode = "supervised"
[task]
dataset = "synthetic:blobs"
[network]
hidden = [16]
[train]
epochs = 3
seed = 4
adam = { lr = 0.01 }
"#;

fn student_toml(teacher: &Path) -> String {
    format!(
        r#"
mode = "supervised"
[task]
dataset = "synthetic:blobs"
validation = 200
[network]
hidden = [12]
[[teachers]]
path = "{}"
links = [["fc1", "fc1"], ["logits", "logits"]]
[train]
epochs = 3
lambda1 = 0.5
adam = {{ lr = 0.01 }}
[sweep]
lambda1 = [0.1, 0.5]
lambda2 = [0.01]
seeds = [0, 1]
top_k = 2
"#,
        teacher.display()
    )
}

/// Trains the blobs teacher into `dir/t` and returns the model path.
fn train_teacher(dir: &Path) -> PathBuf {
    let cfg = write(dir, "teacher.toml", TEACHER);
    let out = dir.join("t");
    let o = kflow(&[
        "train-teacher",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("test_error "));
    out.join("model.kflow")
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(kflow(&["--help"]).status.code(), Some(0));
    assert_eq!(kflow(&["train-teacher"]).status.code(), Some(2));
    assert_eq!(kflow(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", TEACHER);
    let o = kflow(&[
        "train-student",
        "--config",
        cfg.to_str().unwrap(),
        "--ablate",
        "no-teachers",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2_before_writing_anything() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let cases = [
        ("typo.toml", "mode = \"supervised\"\n[task]\ndataset = \"synthetic:blobs\"\n[train]\nlamda1 = 0.1\n"),
        ("syntax.toml", "mode = \"supervised\n"),
        ("badmode.toml", "mode = \"unsupervised\"\n[task]\ndataset = \"synthetic:blobs\"\n"),
        ("neg.toml", "mode = \"supervised\"\n[task]\ndataset = \"synthetic:blobs\"\n[train]\nlambda1 = -1.0\n"),
    ];
    for (name, text) in cases {
        let cfg = write(dir.path(), name, text);
        let o = kflow(&[
            "train-teacher",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(!out.exists(), "{name} created the output directory");
    }
    let o = kflow(&[
        "train-teacher",
        "--config",
        dir.path().join("typo.toml").to_str().unwrap(),
    ]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 5") && err.contains("lamda1"), "{err}");
    let missing = dir.path().join("missing.toml");
    assert_eq!(
        kflow(&["train-teacher", "--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &TEACHER.replace("lr = 0.01", "lr = 1e300"),
    );
    let o = kflow(&[
        "train-teacher",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn student_eval_detach_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let teacher = train_teacher(d);
    let cfg = write(d, "student.toml", &student_toml(&teacher));
    let cfg = cfg.to_str().unwrap();

    let run = |out: &str, extra: &[&str]| {
        let out = d.join(out);
        let mut args = vec![
            "train-student",
            "--config",
            cfg,
            "--out",
            out.to_str().unwrap(),
        ];
        if !extra.contains(&"--seed") {
            args.extend(["--seed", "7"]);
        }
        args.extend_from_slice(extra);
        let o = kflow(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (out, stdout(&o))
    };
    let (a, printed) = run("a", &[]);
    let (b, _) = run("b", &["--workers", "1"]);
    assert!(
        printed.contains("fused_test_error ") && printed.contains("p_w fc1 "),
        "{printed}"
    );
    for f in [
        "checkpoint.kflow",
        "student.kflow",
        "detach_report.json",
        "metrics.csv",
        "summary.json",
    ] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    let (c, _) = run("c", &["--seed", "8"]);
    assert_ne!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(c.join("metrics.csv")).unwrap()
    );

    let (nokl, _) = run("nokl", &["--ablate", "no-kl"]);
    let metrics = fs::read_to_string(nokl.join("metrics.csv")).unwrap();
    let row = metrics.lines().nth(2).unwrap();
    assert_eq!(
        row.split(',').nth(4),
        Some(""),
        "kl_loss column should be empty: {row}"
    );
    let (untrained, _) = run("untrained", &["--ablate", "untrained-teachers"]);
    assert!(untrained.join("untrained_teacher_0.kflow").exists());

    // the fused model needs its teachers; the exported student does not
    let ck = a.join("checkpoint.kflow");
    let o = kflow(&[
        "eval",
        "--model",
        ck.to_str().unwrap(),
        "--task",
        "synthetic:blobs",
    ]);
    assert!(stdout(&o).starts_with("fused_test_error "));
    let det = d.join("det");
    let o = kflow(&[
        "detach",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        det.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("max_deviation "));
    fs::remove_file(&teacher).unwrap();
    let o = kflow(&[
        "eval",
        "--model",
        det.join("student.kflow").to_str().unwrap(),
        "--config",
        cfg,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("test_error "));
    let o = kflow(&[
        "eval",
        "--model",
        ck.to_str().unwrap(),
        "--task",
        "synthetic:blobs",
    ]);
    assert_eq!(o.status.code(), Some(1));
    // wrong task for the model
    let o = kflow(&[
        "eval",
        "--model",
        det.join("student.kflow").to_str().unwrap(),
        "--task",
        "synthetic:patterns",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_ranks_every_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let teacher = train_teacher(d);
    let cfg = write(d, "student.toml", &student_toml(&teacher));
    let out = d.join("sweep");
    let o = kflow(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--workers",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let printed = stdout(&o);
    assert_eq!(printed.lines().filter(|l| l.starts_with("run_")).count(), 4);
    assert!(printed.lines().last().unwrap().starts_with("top2_mean "));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    let errors: Vec<f64> = summary
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(errors.windows(2).all(|w| w[0] <= w[1]), "{summary}");
    for i in 0..4 {
        assert!(out.join(format!("run_{i:03}/metrics.csv")).exists());
    }
}

#[test]
fn rl_eval_prints_every_episode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(
        d,
        "rl.toml",
        "mode = \"rl\"\n[task]\nvariant = \"corridor\"\n[network]\nconv = [{ filters = 4, kernel = 3 }]\nhidden = [16]\n[rl]\ntotal_steps = 3000\nworkers = 4\n",
    );
    let out = d.join("t");
    let o = kflow(&[
        "train-teacher",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("mean_reward "));
    let o = kflow(&[
        "eval",
        "--model",
        out.join("model.kflow").to_str().unwrap(),
        "--task",
        "rl:corridor",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 31);
    for (i, l) in lines[..30].iter().enumerate() {
        assert!(l.starts_with(&format!("episode {i} reward ")), "{l}");
    }
    assert!(lines[30].starts_with("mean_reward ") && lines[30].ends_with("episodes 30"));
    let again = kflow(&[
        "eval",
        "--model",
        out.join("model.kflow").to_str().unwrap(),
        "--task",
        "rl:corridor",
    ]);
    assert_eq!(again.stdout, o.stdout);
}
