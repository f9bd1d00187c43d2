//! Training metrics log: a versioned CSV with a fixed column set, written
//! incrementally and formatted deterministically (same run, same bytes).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Result, SmacError};

pub const METRICS_VERSION: u32 = 1;

pub const METRICS_COLUMNS: &str = "phase,iteration,env_steps,grad_steps,critic_loss,actor_loss,reward_mse,kl_term,train_return_mean,train_return_std,test_return_mean,test_return_std";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Offline,
    Online,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Offline => "offline",
            Phase::Online => "online",
        }
    }
}

/// One metrics row. Loss fields are averages since the previous row; return
/// fields are present only on evaluation rows.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub phase: Phase,
    pub iteration: u64,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub reward_mse: f64,
    pub kl_term: f64,
    pub train_return_mean: Option<f64>,
    pub train_return_std: Option<f64>,
    pub test_return_mean: Option<f64>,
    pub test_return_std: Option<f64>,
}

pub fn cell(v: f64, name: &str) -> Result<String> {
    if !v.is_finite() {
        return Err(SmacError::NonFinite {
            context: format!("metrics column {name}"),
            value: v,
        });
    }
    Ok(format!("{v}"))
}

fn opt_cell(v: Option<f64>, name: &str) -> Result<String> {
    match v {
        Some(x) => cell(x, name),
        None => Ok(String::new()),
    }
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> Result<String> {
        Ok([
            self.phase.name().to_string(),
            self.iteration.to_string(),
            self.env_steps.to_string(),
            self.grad_steps.to_string(),
            cell(self.critic_loss, "critic_loss")?,
            cell(self.actor_loss, "actor_loss")?,
            cell(self.reward_mse, "reward_mse")?,
            cell(self.kl_term, "kl_term")?,
            opt_cell(self.train_return_mean, "train_return_mean")?,
            opt_cell(self.train_return_std, "train_return_std")?,
            opt_cell(self.test_return_mean, "test_return_mean")?,
            opt_cell(self.test_return_std, "test_return_std")?,
        ]
        .join(","))
    }
}

pub struct MetricsWriter {
    out: BufWriter<fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        writeln!(out, "# metrics_version={METRICS_VERSION}")?;
        writeln!(out, "{METRICS_COLUMNS}")?;
        Ok(MetricsWriter { out })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> Result<()> {
        let line = row.to_csv_line()?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parses a metrics file back into rows (used by tests and diagnostics).
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let version_line = lines
        .next()
        .ok_or_else(|| SmacError::Data("metrics file is empty".into()))?;
    if version_line != format!("# metrics_version={METRICS_VERSION}") {
        return Err(SmacError::Data(format!(
            "unexpected metrics version line {version_line:?}"
        )));
    }
    let header = lines
        .next()
        .ok_or_else(|| SmacError::Data("metrics file has no header".into()))?;
    if header != METRICS_COLUMNS {
        return Err(SmacError::Data(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 12 {
            return Err(SmacError::Data(format!(
                "metrics line {} has {} columns, expected 12",
                i + 3,
                parts.len()
            )));
        }
        let phase = match parts[0] {
            "offline" => Phase::Offline,
            "online" => Phase::Online,
            other => return Err(SmacError::Data(format!("unknown phase {other:?}"))),
        };
        let f = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| SmacError::Data(format!("bad {name} value {s:?}: {e}")))
        };
        let opt = |s: &str, name: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                f(s, name).map(Some)
            }
        };
        rows.push(MetricsRow {
            phase,
            iteration: f(parts[1], "iteration")? as u64,
            env_steps: f(parts[2], "env_steps")? as u64,
            grad_steps: f(parts[3], "grad_steps")? as u64,
            critic_loss: f(parts[4], "critic_loss")?,
            actor_loss: f(parts[5], "actor_loss")?,
            reward_mse: f(parts[6], "reward_mse")?,
            kl_term: f(parts[7], "kl_term")?,
            train_return_mean: opt(parts[8], "train_return_mean")?,
            train_return_std: opt(parts[9], "train_return_std")?,
            test_return_mean: opt(parts[10], "test_return_mean")?,
            test_return_std: opt(parts[11], "test_return_std")?,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
