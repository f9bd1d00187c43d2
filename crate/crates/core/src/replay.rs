//! Per-task dual replay buffers (encoder buffer and RL buffer), history
//! sampling, and meta-batch assembly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::TaskSpec;
use crate::error::{Result, SmacError};
use crate::latent::{History, HistoryEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Offline,
    OnlineGenerated,
}

/// One (s, a, r, s', done) record.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub source: Source,
}

impl Transition {
    pub fn all_finite(&self) -> bool {
        self.r.is_finite()
            && self.s.iter().all(|v| v.is_finite())
            && self.a.iter().all(|v| v.is_finite())
            && self.s_next.iter().all(|v| v.is_finite())
    }
}

/// Which buffers an append targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppendTargets {
    pub rl: bool,
    pub enc: bool,
}

impl AppendTargets {
    pub const BOTH: AppendTargets = AppendTargets { rl: true, enc: true };
    pub const RL_ONLY: AppendTargets = AppendTargets { rl: true, enc: false };
}

/// Both replay buffers of one task. The encoder buffer feeds posterior
/// inference; the RL buffer feeds actor/critic batches.
#[derive(Debug, Clone)]
pub struct TaskBuffers {
    pub task: TaskSpec,
    pub rl: Vec<Transition>,
    pub enc: Vec<Transition>,
    /// When frozen, enc appends are silently dropped (and counted).
    pub enc_frozen: bool,
    pub dropped_enc_appends: u64,
}

impl TaskBuffers {
    pub fn new(task: TaskSpec) -> Self {
        TaskBuffers {
            task,
            rl: Vec::new(),
            enc: Vec::new(),
            enc_frozen: false,
            dropped_enc_appends: 0,
        }
    }

    /// Appends under an explicit task id so misrouted transitions fail loudly
    /// instead of contaminating another task's data.
    pub fn append(&mut self, t: Transition, targets: AppendTargets, task_id: u32) -> Result<()> {
        if task_id != self.task.task_id {
            return Err(SmacError::TaskMixup {
                expected: self.task.task_id,
                got: task_id,
            });
        }
        if !t.all_finite() {
            return Err(SmacError::NonFinite {
                context: "transition append".into(),
                value: f64::NAN,
            });
        }
        if targets.enc {
            if self.enc_frozen {
                self.dropped_enc_appends += 1;
            } else {
                self.enc.push(t.clone());
            }
        }
        if targets.rl {
            self.rl.push(t);
        }
        Ok(())
    }

    /// `n` uniform draws from the RL buffer, with replacement.
    pub fn sample_rl_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.rl.is_empty() {
            return Err(SmacError::BufferUnderflow {
                context: "sample_rl_batch",
                need: 1,
                have: 0,
            });
        }
        Ok((0..n)
            .map(|_| self.rl[rng.random_range(0..self.rl.len())].clone())
            .collect())
    }

    /// Uniform draws without replacement from the encoder buffer, projected
    /// to (s, a, r) triples. When the buffer holds fewer than `n` entries the
    /// whole buffer is returned in shuffled order.
    pub fn sample_history<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<History> {
        if self.enc.is_empty() {
            return Err(SmacError::BufferUnderflow {
                context: "sample_history",
                need: 1,
                have: 0,
            });
        }
        let take = n.min(self.enc.len());
        let mut idx: Vec<usize> = (0..self.enc.len()).collect();
        for k in 0..take {
            let j = k + rng.random_range(0..idx.len() - k);
            idx.swap(k, j);
        }
        let entries = idx[..take]
            .iter()
            .map(|&i| {
                let t = &self.enc[i];
                HistoryEntry {
                    s: t.s.clone(),
                    a: t.a.clone(),
                    r: t.r,
                }
            })
            .collect();
        Ok(History { entries })
    }

    pub fn is_sampleable(&self) -> bool {
        !self.rl.is_empty() && !self.enc.is_empty()
    }
}

/// One task's share of a meta-batch: two independent histories and an RL
/// batch.
#[derive(Debug)]
pub struct MetaSample {
    pub task_index: usize,
    pub h1: History,
    pub h2: History,
    pub batch: Vec<Transition>,
}

/// Draws `meta_n` distinct sampleable tasks uniformly without replacement;
/// for each, two histories of `enc_n` triples and one RL batch of `rl_n`.
pub fn sample_meta_batch<R: Rng + ?Sized>(
    all: &[TaskBuffers],
    meta_n: usize,
    enc_n: usize,
    rl_n: usize,
    rng: &mut R,
) -> Result<Vec<MetaSample>> {
    let sampleable: Vec<usize> = (0..all.len()).filter(|&i| all[i].is_sampleable()).collect();
    if sampleable.len() < meta_n {
        return Err(SmacError::BufferUnderflow {
            context: "sample_meta_batch",
            need: meta_n,
            have: sampleable.len(),
        });
    }
    let mut idx = sampleable;
    for k in 0..meta_n {
        let j = k + rng.random_range(0..idx.len() - k);
        idx.swap(k, j);
    }
    idx[..meta_n]
        .iter()
        .map(|&task_index| {
            let b = &all[task_index];
            Ok(MetaSample {
                task_index,
                h1: b.sample_history(enc_n, rng)?,
                h2: b.sample_history(enc_n, rng)?,
                batch: b.sample_rl_batch(rl_n, rng)?,
            })
        })
        .collect()
}

/// Total transitions held across all RL and encoder buffers.
pub fn total_transitions(all: &[TaskBuffers]) -> (usize, usize) {
    (
        all.iter().map(|b| b.rl.len()).sum(),
        all.iter().map(|b| b.enc.len()).sum(),
    )
}
