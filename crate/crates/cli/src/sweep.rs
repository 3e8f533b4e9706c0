//! λ grid sweeps. Each grid point runs `train-student` in its own child
//! process and output directory, so runs stay individually reproducible.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use kflow::metrics::fmt_f64;
use kflow::{Error, Result};

use crate::commands::{Ablation, Summary};
use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub run: String,
    pub point: SweepPoint,
    /// `ok` or the failure reason.
    pub status: String,
    pub final_metric: Option<f64>,
}

/// All grid points in λ1-major order.
pub fn grid(cfg: &RunConfig) -> Result<Vec<SweepPoint>> {
    let s = cfg.sweep.clone().unwrap_or_default();
    let mut points = Vec::new();
    for &lambda1 in &s.lambda1 {
        for &lambda2 in &s.lambda2 {
            for &seed in &s.seeds {
                points.push(SweepPoint {
                    lambda1,
                    lambda2,
                    seed,
                });
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Usage("sweep grid is empty".into()));
    }
    Ok(points)
}

/// Orders rows best first; failed runs go last in their original order.
pub fn rank(rows: &mut [SweepRow], higher_is_better: bool) {
    rows.sort_by(|a, b| match (a.final_metric, b.final_metric) {
        (Some(x), Some(y)) if higher_is_better => y.total_cmp(&x),
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

/// Mean final metric of the best `k` successful runs.
pub fn top_k_mean(ranked: &[SweepRow], k: usize) -> Option<f64> {
    let best: Vec<f64> = ranked
        .iter()
        .filter_map(|r| r.final_metric)
        .take(k)
        .collect();
    (!best.is_empty()).then(|| best.iter().sum::<f64>() / best.len() as f64)
}

pub fn write_summary(path: &Path, ranked: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record([
        "rank",
        "run",
        "lambda1",
        "lambda2",
        "seed",
        "status",
        "final_metric",
    ])
    .map_err(csv_err)?;
    for (i, r) in ranked.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.run.clone(),
            fmt_f64(r.point.lambda1),
            fmt_f64(r.point.lambda2),
            r.point.seed.to_string(),
            r.status.clone(),
            r.final_metric.map(fmt_f64).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn run_child(
    exe: &Path,
    dir: &Path,
    ablate: Option<Ablation>,
) -> std::result::Result<Summary, String> {
    let mut cmd = Command::new(exe);
    cmd.arg("train-student")
        .arg("--config")
        .arg(dir.join("config.toml"))
        .arg("--out")
        .arg(dir);
    cmd.arg("--workers").arg("1");
    if let Some(a) = ablate {
        cmd.arg("--ablate").arg(match a {
            Ablation::UntrainedTeachers => "untrained-teachers",
            Ablation::NoKl => "no-kl",
        });
    }
    let output = cmd.output().map_err(|e| format!("spawn failed: {e}"))?;
    fs::write(dir.join("stdout.txt"), &output.stdout).map_err(|e| e.to_string())?;
    fs::write(dir.join("stderr.txt"), &output.stderr).map_err(|e| e.to_string())?;
    if !output.status.success() {
        let code = output
            .status
            .code()
            .map_or("signal".to_string(), |c| c.to_string());
        return Err(format!("exit {code}"));
    }
    Summary::load(dir).map_err(|e| e.to_string())
}

pub struct SweepResult {
    pub ranked: Vec<SweepRow>,
    pub top_k: usize,
    pub top_k_mean: Option<f64>,
}

/// Runs every grid point with at most `workers` children alive at once.
pub fn sweep(
    cfg: &RunConfig,
    out: &Path,
    workers: usize,
    ablate: Option<Ablation>,
) -> Result<SweepResult> {
    let points = grid(cfg)?;
    let exe = std::env::current_exe()?;
    let mut dirs: Vec<PathBuf> = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let dir = out.join(format!("run_{i:03}"));
        fs::create_dir_all(&dir)?;
        let mut child = cfg.clone();
        child.sweep = None;
        child.out = None;
        child.set_lambdas(p.lambda1, p.lambda2);
        child.set_seed(p.seed);
        fs::write(dir.join("config.toml"), child.to_toml())?;
        dirs.push(dir);
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<std::result::Result<Summary, String>>>> =
        Mutex::new(vec![None; points.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(points.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= points.len() {
                    break;
                }
                let r = run_child(&exe, &dirs[i], ablate);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });

    let mut metric = None;
    let mut rows: Vec<SweepRow> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .zip(points)
        .enumerate()
        .map(|(i, (r, point))| {
            let run = format!("run_{i:03}");
            match r.expect("every run finished") {
                Ok(s) => {
                    metric.get_or_insert(s.metric.clone());
                    SweepRow {
                        run,
                        point,
                        status: "ok".into(),
                        final_metric: Some(s.final_metric),
                    }
                }
                Err(e) => SweepRow {
                    run,
                    point,
                    status: e,
                    final_metric: None,
                },
            }
        })
        .collect();
    rank(
        &mut rows,
        metric.as_deref().is_some_and(Summary::higher_is_better),
    );
    let top_k = cfg.sweep.as_ref().map_or(3, |s| s.top_k);
    let mean = top_k_mean(&rows, top_k);
    write_summary(&out.join("summary.csv"), &rows)?;
    Ok(SweepResult {
        ranked: rows,
        top_k,
        top_k_mean: mean,
    })
}
