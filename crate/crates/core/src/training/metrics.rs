use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One training log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    #[serde(rename = "L_relc")]
    pub l_relc: f64,
    #[serde(rename = "L_rels")]
    pub l_rels: f64,
    #[serde(rename = "L_absc")]
    pub l_absc: f64,
    #[serde(rename = "L_abss")]
    pub l_abss: f64,
    pub total: f64,
    pub lr: f64,
}

/// Evaluation summary line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub acc: f64,
    pub ci95: f64,
    pub episodes: usize,
    #[serde(rename = "L")]
    pub way: usize,
    #[serde(rename = "Z")]
    pub shot: usize,
}

/// Collects per-iteration records; every `log_every`-th is written as JSONL.
pub struct MetricsSink {
    out: Option<BufWriter<File>>,
    log_every: usize,
    /// Every iteration, logged or not.
    pub trace: Vec<MetricRecord>,
    pub logged: Vec<MetricRecord>,
}

impl MetricsSink {
    pub fn memory(log_every: usize) -> Self {
        MetricsSink {
            out: None,
            log_every: log_every.max(1),
            trace: Vec::new(),
            logged: Vec::new(),
        }
    }

    /// Append to (or create) a JSONL file.
    pub fn file(path: &Path, log_every: usize, append: bool) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(MetricsSink {
            out: Some(BufWriter::new(f)),
            ..Self::memory(log_every)
        })
    }

    pub fn push(&mut self, rec: MetricRecord) -> Result<()> {
        self.trace.push(rec);
        if rec.iter % self.log_every == 0 {
            self.logged.push(rec);
            if let Some(out) = &mut self.out {
                serde_json::to_writer(&mut *out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

/// Trailing moving average of a series.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
