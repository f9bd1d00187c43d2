//! On-disk dataset format: a manifest plus one JSONL file of transitions per
//! training task. Rewards are stored unscaled (ground truth); reward scaling
//! is applied when batches are drawn during training.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::{Family, TaskSpec};
use crate::error::{Result, SmacError};
use crate::replay::{AppendTargets, Source, TaskBuffers, Transition};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Which replay buffer a stored transition feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufTag {
    Rl,
    Enc,
}

impl BufTag {
    pub fn targets(&self) -> AppendTargets {
        match self {
            BufTag::Rl => AppendTargets::RL_ONLY,
            BufTag::Enc => AppendTargets { rl: false, enc: true },
        }
    }
}

/// One JSONL line. Field order is fixed so that serialization is stable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionRow {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s2: Vec<f64>,
    pub d: u8,
    pub buf: BufTag,
}

impl TransitionRow {
    pub fn from_transition(t: &Transition, buf: BufTag) -> Self {
        TransitionRow {
            s: t.s.to_vec(),
            a: t.a.to_vec(),
            r: t.r,
            s2: t.s_next.to_vec(),
            d: u8::from(t.done),
            buf,
        }
    }

    pub fn to_transition(&self, source: Source) -> Result<Transition> {
        if self.d > 1 {
            return Err(SmacError::Data(format!(
                "done flag must be 0 or 1, got {}",
                self.d
            )));
        }
        Ok(Transition {
            s: self.s.clone(),
            a: self.a.clone(),
            r: self.r,
            s_next: self.s2.clone(),
            done: self.d == 1,
            source,
        })
    }
}

/// Per-training-task manifest record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task: TaskSpec,
    pub rl_count: usize,
    pub enc_count: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub family: Family,
    pub seed: u64,
    /// Human-readable description of the generating policy.
    pub generator: String,
    /// True if stored rewards already include the training reward scale.
    pub reward_scale_applied: bool,
    pub horizon: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub train_tasks: Vec<TaskRecord>,
    pub test_tasks: Vec<TaskSpec>,
    /// Sparse-family generation statistic: fraction of scripted trajectories
    /// that reached the goal region.
    pub success_fraction: Option<f64>,
}

pub fn task_file_name(index: usize) -> String {
    format!("task_{index:04}.jsonl")
}

/// Writes `manifest.json` plus one transitions file per training task.
/// `rows` is indexed like `manifest.train_tasks`.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, rows: &[Vec<TransitionRow>]) -> Result<()> {
    if rows.len() != manifest.train_tasks.len() {
        return Err(SmacError::Data(format!(
            "dataset has rows for {} tasks but the manifest lists {}",
            rows.len(),
            manifest.train_tasks.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let manifest_text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), manifest_text + "\n")?;
    for (record, task_rows) in manifest.train_tasks.iter().zip(rows) {
        let mut w = BufWriter::new(fs::File::create(dir.join(&record.file))?);
        for row in task_rows {
            serde_json::to_writer(&mut w, row)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| SmacError::Data(format!("cannot read {}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| SmacError::Data(format!("manifest does not parse: {e}")))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(SmacError::Data(format!(
            "unsupported dataset format version {} (expected {DATASET_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    validate_manifest(&manifest)?;
    Ok(manifest)
}

fn validate_manifest(m: &DatasetManifest) -> Result<()> {
    if m.obs_dim != m.family.obs_dim() || m.action_dim != m.family.action_dim() {
        return Err(SmacError::Data(format!(
            "manifest dims ({}, {}) do not match family {} ({}, {})",
            m.obs_dim,
            m.action_dim,
            m.family.name(),
            m.family.obs_dim(),
            m.family.action_dim()
        )));
    }
    let mut seen = HashSet::new();
    let all_tasks = m
        .train_tasks
        .iter()
        .map(|r| &r.task)
        .chain(m.test_tasks.iter());
    for (i, task) in all_tasks.enumerate() {
        if task.family != m.family {
            return Err(SmacError::Data(format!(
                "task record {i} belongs to family {}, dataset is {}",
                task.family.name(),
                m.family.name()
            )));
        }
        if !seen.insert(task.task_id) {
            return Err(SmacError::Data(format!(
                "duplicate task_id {} in manifest",
                task.task_id
            )));
        }
        crate::envs::validate_task(task)?;
    }
    Ok(())
}

/// Raw rows for one training-task file, in file order.
pub fn load_task_rows(dir: &Path, record: &TaskRecord) -> Result<Vec<TransitionRow>> {
    let path = dir.join(&record.file);
    let file = fs::File::open(&path)
        .map_err(|e| SmacError::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TransitionRow = serde_json::from_str(&line).map_err(|e| {
            SmacError::Data(format!(
                "{} line {}: bad transition row: {e}",
                path.display(),
                line_no + 1
            ))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Loads the full dataset into per-task replay buffers and cross-checks the
/// stored counts against the manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<TaskBuffers>)> {
    let manifest = load_manifest(dir)?;
    let mut buffers = Vec::with_capacity(manifest.train_tasks.len());
    for record in &manifest.train_tasks {
        let task = &record.task;
        let mut buf = TaskBuffers::new(task.clone());
        for row in load_task_rows(dir, record)? {
            let t = row.to_transition(Source::Offline)?;
            if t.s.len() != manifest.obs_dim
                || t.s_next.len() != manifest.obs_dim
                || t.a.len() != manifest.action_dim
            {
                return Err(SmacError::Data(format!(
                    "task {} row has dims ({}, {}, {}); expected ({}, {}, {})",
                    task.task_id,
                    t.s.len(),
                    t.a.len(),
                    t.s_next.len(),
                    manifest.obs_dim,
                    manifest.action_dim,
                    manifest.obs_dim
                )));
            }
            buf.append(t, row.buf.targets(), task.task_id)?;
        }
        if buf.rl.len() != record.rl_count || buf.enc.len() != record.enc_count {
            return Err(SmacError::Data(format!(
                "task {} holds {} rl / {} enc transitions, manifest promises {} / {}",
                task.task_id,
                buf.rl.len(),
                buf.enc.len(),
                record.rl_count,
                record.enc_count
            )));
        }
        buffers.push(buf);
    }
    Ok((manifest, buffers))
}
