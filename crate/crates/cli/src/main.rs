//! `kflow`: train teachers and knowledge-flow students, evaluate, detach and
//! sweep.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error (including
//! bad command lines), 3 numeric failure during training.

// `!(x > 0.0)` is the deliberate way to reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kflow::metrics::fmt_f64;
use kflow::{Error, Result};

use commands::{Ablation, Task};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "kflow", version, about = "Knowledge-flow training harness")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (sweep: concurrent runs).
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model without teachers.
    TrainTeacher(RunArgs),
    /// Train a student (knowledge flow or a baseline method).
    TrainStudent {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
    },
    /// Evaluate a model file or the fused model of a checkpoint.
    Eval {
        /// Model or checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// `mnist`, `synthetic:<name>` or `rl:<variant>`; defaults to the
        /// config's task.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run `train-student` over the config's λ grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
    },
    /// Export the student of a checkpoint and report its deviation.
    Detach {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

fn init_threads(workers: usize) {
    // ignore the error when a pool already exists
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build_global();
}

fn load(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&run.config)?;
    if let Some(s) = run.seed {
        cfg.set_seed(s);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn print_summary(s: &commands::Summary) {
    println!("{} {}", s.metric, fmt_f64(s.final_metric));
    if let Some(f) = s.fused_metric {
        println!("fused_{} {}", s.metric, fmt_f64(f));
    }
    for (layer, p) in &s.p_w {
        println!("p_w {layer} {}", fmt_f64(*p));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::TrainTeacher(run) => {
            let cfg = load(&run)?;
            init_threads(run.workers);
            let out = commands::output_dir(&cfg, run.out.as_deref())?;
            print_summary(&commands::train_teacher(&cfg, &out)?);
        }
        Cmd::TrainStudent { run, ablate } => {
            let cfg = load(&run)?;
            init_threads(run.workers);
            let out = commands::output_dir(&cfg, run.out.as_deref())?;
            print_summary(&commands::train_student(&cfg, ablate, &out)?);
        }
        Cmd::Eval {
            model,
            task,
            config,
            workers,
        } => {
            init_threads(workers);
            let task = match (task, config) {
                (Some(t), _) => t,
                (None, Some(c)) => RunConfig::load(&c)?.task_name(),
                (None, None) => return Err(Error::Config("eval needs --task or --config".into())),
            };
            for line in commands::eval(&model, &Task::parse(&task)?)? {
                println!("{line}");
            }
        }
        Cmd::Sweep { run, ablate } => {
            let cfg = load(&run)?;
            let out = commands::output_dir(&cfg, run.out.as_deref())?;
            let res = sweep::sweep(&cfg, &out, run.workers, ablate)?;
            for r in &res.ranked {
                println!(
                    "{} lambda1 {} lambda2 {} seed {} {} {}",
                    r.run,
                    r.point.lambda1,
                    r.point.lambda2,
                    r.point.seed,
                    r.status,
                    r.final_metric.map(fmt_f64).unwrap_or_default()
                );
            }
            match res.top_k_mean {
                Some(m) => println!("top{}_mean {}", res.top_k, fmt_f64(m)),
                None => println!("top{}_mean none (every run failed)", res.top_k),
            }
        }
        Cmd::Detach {
            checkpoint,
            task,
            out,
            workers,
        } => {
            init_threads(workers);
            std::fs::create_dir_all(&out)?;
            let task = task.as_deref().map(Task::parse).transpose()?;
            let report = commands::detach(&checkpoint, task.as_ref(), &out)?;
            for (layer, p) in &report.student_weights {
                println!("p_w {layer} {}", fmt_f64(*p));
            }
            println!("max_deviation {}", fmt_f64(report.max_deviation));
            if !report.dependent_layers.is_empty() {
                eprintln!(
                    "warning: student still depends on teachers at {}",
                    report.dependent_layers.join(", ")
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // --help and --version are not errors
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
