//! Python bindings: config resolution, dataset generation, training,
//! evaluation, diagnostics, and agent-level inference (posteriors, decoded
//! rewards, policy actions, meta-test episodes).
//!
//! Configs cross the boundary as JSON strings so the Python side sees the
//! exact schema the CLI writes to `resolved_config.json`.

use std::io::Write;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use smac_lab::agent::{policy_mean_action, policy_sample, AgentState};
use smac_lab::checkpoint::{load_checkpoint, CheckpointMeta};
use smac_lab::cli::{
    cmd_diagnose, cmd_eval, cmd_gen_data, cmd_train, ConfigArgs, DiagnoseArgs, EvalArgs,
    GenDataArgs, TrainArgs,
};
use smac_lab::config::{resolve_config, ConfigSources, RunConfig};
use smac_lab::dataset::load_dataset;
use smac_lab::diagnostics::mann_whitney_u;
use smac_lab::envs::{Family, TaskSpec};
use smac_lab::error::SmacError;
use smac_lab::latent::{
    kl_to_prior, posterior_from_history, sample_prior, sample_reparameterized, History,
    HistoryEntry,
};
use smac_lab::rng::derive_rng;
use smac_lab::training::{decode_rewards, meta_test};

fn err(e: SmacError) -> PyErr {
    match e {
        SmacError::InvalidConfig(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("bad config json: {e}"))
}

fn parse_config(config_json: &str) -> PyResult<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(config_json).map_err(json_err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Writes a resolved config to a temp file so the CLI entry points can merge
/// it over the family defaults, reproducing the exact command-line path.
fn config_args_for(cfg: &RunConfig) -> PyResult<(ConfigArgs, tempfile::TempPath)> {
    let mut f = tempfile::NamedTempFile::new()
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let body = serde_json::to_string_pretty(cfg).map_err(json_err)?;
    f.write_all(body.as_bytes())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let path = f.into_temp_path();
    let args = ConfigArgs {
        family: cfg.env.family.name().to_string(),
        config: Some(path.to_path_buf()),
        set: Vec::new(),
        seed: Some(cfg.seed),
        paper_scale: false,
    };
    Ok((args, path))
}

/// Default configuration for a task family, as JSON.
#[pyfunction]
#[pyo3(signature = (family, paper_scale = false))]
fn default_config(family: &str, paper_scale: bool) -> PyResult<String> {
    let fam = Family::parse(family).map_err(err)?;
    let sources = ConfigSources {
        paper_scale,
        ..ConfigSources::default()
    };
    let cfg = resolve_config(fam, &sources).map_err(err)?;
    serde_json::to_string_pretty(&cfg).map_err(json_err)
}

/// Applies dotted-path overrides (`optim.rl_batch=128`) and an optional seed
/// on top of a config JSON, returning the validated result.
#[pyfunction]
#[pyo3(signature = (config_json, sets, seed = None))]
fn override_config(config_json: &str, sets: Vec<String>, seed: Option<u64>) -> PyResult<String> {
    let base = parse_config(config_json)?;
    let mut pairs = Vec::new();
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| {
            PyValueError::new_err(format!("override '{s}' must look like KEY=VALUE"))
        })?;
        pairs.push((k.to_string(), v.to_string()));
    }
    let sources = ConfigSources {
        file_json: Some(serde_json::to_string(&base).map_err(json_err)?),
        sets: pairs,
        seed_flag: seed,
        ..ConfigSources::default()
    };
    let cfg = resolve_config(base.env.family, &sources).map_err(err)?;
    serde_json::to_string_pretty(&cfg).map_err(json_err)
}

/// Generates the offline dataset for `config_json` into `out_dir`; returns
/// the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, out_dir, force = false))]
fn generate_dataset(config_json: &str, out_dir: &str, force: bool) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let (config, _tmp) = config_args_for(&cfg)?;
    let manifest = cmd_gen_data(&GenDataArgs {
        config,
        out: PathBuf::from(out_dir),
        force,
    })
    .map_err(err)?;
    serde_json::to_string_pretty(&manifest).map_err(json_err)
}

/// Runs training (offline, online, or both) and returns the final checkpoint
/// directory. Writes metrics.csv and resolved_config.json exactly like the
/// CLI `train` command.
#[pyfunction]
#[pyo3(signature = (config_json, data_dir, out_dir, phase = "both", resume = None, force = false))]
fn train(
    config_json: &str,
    data_dir: &str,
    out_dir: &str,
    phase: &str,
    resume: Option<&str>,
    force: bool,
) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let (config, _tmp) = config_args_for(&cfg)?;
    let out = cmd_train(&TrainArgs {
        config,
        data: PathBuf::from(data_dir),
        out: PathBuf::from(out_dir),
        baseline: cfg.baseline.name().to_string(),
        phase: phase.to_string(),
        resume: resume.map(PathBuf::from),
        self_sup_on_test_tasks: cfg.online.self_sup_on_test_tasks,
        checkpoint_every: 1,
        force,
    })
    .map_err(err)?;
    Ok(out.final_checkpoint.to_string_lossy().into_owned())
}

/// Evaluates a checkpoint; returns (task_set, seed, mean, std) aggregate rows
/// and writes eval.csv under `out_dir`.
#[pyfunction]
#[pyo3(signature = (checkpoint_dir, data_dir, out_dir, episodes = None, seeds = 1, task_set = "test", force = false))]
fn evaluate(
    checkpoint_dir: &str,
    data_dir: &str,
    out_dir: &str,
    episodes: Option<usize>,
    seeds: u64,
    task_set: &str,
    force: bool,
) -> PyResult<Vec<(String, u64, f64, f64)>> {
    let out = cmd_eval(&EvalArgs {
        checkpoint: PathBuf::from(checkpoint_dir),
        data: PathBuf::from(data_dir),
        out: PathBuf::from(out_dir),
        episodes,
        seeds,
        task_set: task_set.to_string(),
        set: Vec::new(),
        seed: None,
        force,
    })
    .map_err(err)?;
    Ok(out.aggregates)
}

/// Runs the z-space shift diagnostics; returns the shift_report.csv path.
#[pyfunction]
#[pyo3(signature = (checkpoint_dir, data_dir, out_dir, post_checkpoint = None, n_probes = 50, dump_xy = false, force = false))]
fn diagnose(
    checkpoint_dir: &str,
    data_dir: &str,
    out_dir: &str,
    post_checkpoint: Option<&str>,
    n_probes: usize,
    dump_xy: bool,
    force: bool,
) -> PyResult<String> {
    let out = cmd_diagnose(&DiagnoseArgs {
        checkpoint: PathBuf::from(checkpoint_dir),
        post_checkpoint: post_checkpoint.map(PathBuf::from),
        data: PathBuf::from(data_dir),
        out: PathBuf::from(out_dir),
        n_probes,
        dump_xy,
        dump_episodes: 3,
        set: Vec::new(),
        seed: None,
        force,
    })
    .map_err(err)?;
    Ok(out.report_path.to_string_lossy().into_owned())
}

/// One-sided Mann-Whitney U test (H1: samples in `a` are larger); returns
/// (U statistic for a, p-value).
#[pyfunction]
fn mann_whitney(a: Vec<f64>, b: Vec<f64>) -> (f64, f64) {
    mann_whitney_u(&a, &b)
}

fn history_from_triples(triples: Vec<(Vec<f64>, Vec<f64>, f64)>) -> History {
    History {
        entries: triples
            .into_iter()
            .map(|(s, a, r)| HistoryEntry { s, a, r })
            .collect(),
    }
}

/// A trained agent loaded from a checkpoint directory.
#[pyclass]
struct Agent {
    state: AgentState,
    meta: CheckpointMeta,
}

impl Agent {
    fn find_task(&self, data_dir: &str, task_id: u32) -> PyResult<TaskSpec> {
        let (manifest, _) = load_dataset(std::path::Path::new(data_dir)).map_err(err)?;
        manifest
            .train_tasks
            .iter()
            .map(|r| &r.task)
            .chain(manifest.test_tasks.iter())
            .find(|t| t.task_id == task_id)
            .cloned()
            .ok_or_else(|| PyValueError::new_err(format!("task {task_id} not in dataset")))
    }
}

#[pymethods]
impl Agent {
    #[staticmethod]
    fn load(checkpoint_dir: &str) -> PyResult<Agent> {
        let (state, meta) = load_checkpoint(std::path::Path::new(checkpoint_dir)).map_err(err)?;
        Ok(Agent { state, meta })
    }

    #[getter]
    fn tag(&self) -> String {
        self.meta.tag.clone()
    }
    #[getter]
    fn obs_dim(&self) -> usize {
        self.meta.obs_dim
    }
    #[getter]
    fn action_dim(&self) -> usize {
        self.meta.action_dim
    }
    #[getter]
    fn d_z(&self) -> usize {
        self.meta.d_z
    }
    #[getter]
    fn env_steps(&self) -> u64 {
        self.meta.env_steps
    }
    #[getter]
    fn grad_steps(&self) -> u64 {
        self.meta.grad_steps
    }
    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.meta.config).map_err(json_err)
    }

    /// Posterior over z given (s, a, r) triples: (mean, std, kl_to_prior).
    fn posterior(
        &self,
        history: Vec<(Vec<f64>, Vec<f64>, f64)>,
    ) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
        let h = history_from_triples(history);
        let q = posterior_from_history(&self.state.encoder, &h).map_err(err)?;
        let kl = kl_to_prior(&q);
        Ok((q.mean.to_vec(), q.std.to_vec(), kl))
    }

    /// One reparameterized sample from the posterior over `history`.
    fn sample_z(
        &self,
        history: Vec<(Vec<f64>, Vec<f64>, f64)>,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let h = history_from_triples(history);
        let q = posterior_from_history(&self.state.encoder, &h).map_err(err)?;
        let mut rng = derive_rng(seed, &["py", "sample-z"]);
        Ok(sample_reparameterized(&q, &mut rng).0.to_vec())
    }

    /// One draw from the standard-normal prior over z.
    fn sample_prior_z(&self, seed: u64) -> Vec<f64> {
        let mut rng = derive_rng(seed, &["py", "prior-z"]);
        sample_prior(self.meta.d_z, &mut rng).to_vec()
    }

    /// Decoded (scaled-space) rewards for a batch of (s, a) pairs under z.
    fn decode(&self, pairs: Vec<(Vec<f64>, Vec<f64>)>, z: Vec<f64>) -> PyResult<Vec<f64>> {
        decode_rewards(&self.state, &pairs, &ndarray::Array1::from(z)).map_err(err)
    }

    /// Policy action for observation `s` under context `z`.
    #[pyo3(signature = (s, z, deterministic = true, seed = 0))]
    fn policy_action(
        &self,
        s: Vec<f64>,
        z: Vec<f64>,
        deterministic: bool,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let z = ndarray::Array1::from(z);
        if deterministic {
            policy_mean_action(&self.state, &s, &z).map_err(err)
        } else {
            let mut rng = derive_rng(seed, &["py", "action"]);
            Ok(policy_sample(&self.state, &s, &z, &mut rng).map_err(err)?.0)
        }
    }

    /// Runs one meta-test (explore with z ~ prior, then condition on the
    /// accumulated posterior) on a dataset task; returns the per-episode
    /// returns, the last being the post-adaptation return.
    fn meta_test(&self, data_dir: &str, task_id: u32, seed: u64) -> PyResult<Vec<f64>> {
        let task = self.find_task(data_dir, task_id)?;
        let task_s = task_id.to_string();
        let mut rng = derive_rng(seed, &["py", "meta-test", &task_s]);
        let out = meta_test(&self.state, &task, &self.meta.config, &mut rng).map_err(err)?;
        Ok(out.returns)
    }
}

#[pymodule]
fn smac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(override_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add_function(wrap_pyfunction!(mann_whitney, m)?)?;
    m.add_class::<Agent>()?;
    Ok(())
}
