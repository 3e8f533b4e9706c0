//! Run metrics CSV.
//!
//! The first line is the schema tag [`SCHEMA`] (a `#` comment), then a header
//! row, then one row per logging interval:
//!
//! ```text
//! step,epoch_or_episode,task_loss,dep_loss,kl_loss,reg_loss,total_loss,lambda1,p_w:<layer>...,eval_metric
//! ```
//!
//! Floats use 17 significant digits so every value round-trips exactly.
//! `kl_loss` is empty when the KL term is switched off and `eval_metric` is
//! empty on rows without an evaluation. The eval metric is the top-1 error
//! for classification runs and the mean episode reward for RL runs.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SCHEMA: &str = "#kflow-metrics/1";

const FIXED: [&str; 8] = [
    "step",
    "epoch_or_episode",
    "task_loss",
    "dep_loss",
    "kl_loss",
    "reg_loss",
    "total_loss",
    "lambda1",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch_or_episode: u64,
    pub task_loss: f64,
    pub dep_loss: f64,
    pub kl_loss: Option<f64>,
    pub reg_loss: f64,
    pub total_loss: f64,
    pub lambda1: f64,
    pub p_w: Vec<f64>,
    pub eval_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    /// Student layer names, one `p_w:` column each.
    pub layers: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl RunMetrics {
    pub fn new(layers: Vec<String>) -> Self {
        Self {
            layers,
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        FIXED
            .iter()
            .map(|s| s.to_string())
            .chain(self.layers.iter().map(|l| format!("p_w:{l}")))
            .chain(std::iter::once("eval_metric".to_string()))
            .collect()
    }

    pub fn push(&mut self, row: MetricsRow) {
        debug_assert_eq!(row.p_w.len(), self.layers.len());
        self.rows.push(row);
    }

    /// Last evaluated metric, if any.
    pub fn final_eval(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_metric)
    }

    pub fn write_to(&self, out: impl Write) -> Result<()> {
        let mut out = out;
        writeln!(out, "{SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(self.header()).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.step.to_string(),
                r.epoch_or_episode.to_string(),
                fmt_f64(r.task_loss),
                fmt_f64(r.dep_loss),
                fmt_opt(r.kl_loss),
                fmt_f64(r.reg_loss),
                fmt_f64(r.total_loss),
                fmt_f64(r.lambda1),
            ];
            rec.extend(r.p_w.iter().map(|&p| fmt_f64(p)));
            rec.push(fmt_opt(r.eval_metric));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(File::create(path)?))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 csv")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from(mut input: impl BufRead) -> Result<Self> {
        let mut first = String::new();
        input.read_line(&mut first)?;
        if first.trim_end() != SCHEMA {
            return Err(Error::Format(format!(
                "metrics file does not start with {SCHEMA}"
            )));
        }
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(input);
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        let header: Vec<String> = rd
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(String::from)
            .collect();
        let n = header.len();
        if n < FIXED.len() + 1 || header[..FIXED.len()] != FIXED || header[n - 1] != "eval_metric" {
            return Err(Error::Format(format!(
                "unexpected metrics header {header:?}"
            )));
        }
        let layers: Vec<String> = header[FIXED.len()..n - 1]
            .iter()
            .map(|h| {
                h.strip_prefix("p_w:")
                    .map(String::from)
                    .ok_or_else(|| Error::Format(format!("unexpected column '{h}'")))
            })
            .collect::<Result<_>>()?;
        let mut metrics = RunMetrics::new(layers);
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let f = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| {
                    Error::Format(format!("bad number '{}' in column {}", &rec[i], header[i]))
                })
            };
            let opt = |i: usize| -> Result<Option<f64>> {
                if rec[i].is_empty() {
                    Ok(None)
                } else {
                    f(i).map(Some)
                }
            };
            let int = |i: usize| -> Result<u64> {
                rec[i].parse().map_err(|_| {
                    Error::Format(format!("bad integer '{}' in column {}", &rec[i], header[i]))
                })
            };
            metrics.rows.push(MetricsRow {
                step: int(0)?,
                epoch_or_episode: int(1)?,
                task_loss: f(2)?,
                dep_loss: f(3)?,
                kl_loss: opt(4)?,
                reg_loss: f(5)?,
                total_loss: f(6)?,
                lambda1: f(7)?,
                p_w: (FIXED.len()..n - 1).map(f).collect::<Result<_>>()?,
                eval_metric: opt(n - 1)?,
            });
        }
        Ok(metrics)
    }
}
