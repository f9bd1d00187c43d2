//! Command-line entry points. Each subcommand body is an ordinary library
//! function over an args struct, so tests and the acceptance harness can
//! drive the exact code paths the binary runs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{apply_override, resolve_config, BaselineMode, ConfigSources, RunConfig};
use crate::dataset::{load_dataset, DatasetManifest};
use crate::diagnostics::{
    dump_trajectories, measure_conditioned_return, measure_kl_shift, ShiftReport, TrajectoryMode,
};
use crate::envs::{Family, TaskSpec};
use crate::error::{Result, SmacError};
use crate::metrics::{cell, mean_std, MetricsWriter, Phase};
use crate::rng::derive_rng;
use crate::training::{
    build_agent, meta_test, run_baseline, BaselineReport, PhaseSelection,
};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const SEED_ENV_VAR: &str = "SMAC_LAB_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "smac",
    about = "Offline meta-RL with self-supervised online reward relabeling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a reward-labeled offline dataset.
    GenData(GenDataArgs),
    /// Train a baseline over the offline and/or online phase.
    Train(TrainArgs),
    /// Meta-test a checkpoint and write per-task and aggregate returns.
    Eval(EvalArgs),
    /// Probe latent-space distribution shift and dump trajectories.
    Diagnose(DiagnoseArgs),
}

/// Configuration inputs shared by commands that build a config from scratch.
/// Precedence: family defaults < --config file < --set overrides < --seed.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Task family: point_direction_2d, point_velocity_1d, or sparse_reach.
    #[arg(long)]
    pub family: String,
    /// JSON config file merged over the family defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, repeatable: --set optim.rl_batch=128.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed. Falls back to SMAC_LAB_SEED, then the family default.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Paper-scale networks, horizons, and step counts.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory produced by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run output directory (metrics, checkpoints, resolved config).
    #[arg(long)]
    pub out: PathBuf,
    /// Baseline: smac, meta_bc, online_oracle, or sac_actor_ablation.
    #[arg(long, default_value = "smac")]
    pub baseline: String,
    /// Phase selection: offline, online, or both.
    #[arg(long, default_value = "both")]
    pub phase: String,
    /// Resume from this checkpoint directory instead of a fresh agent.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Run the self-supervised phase on the held-out test tasks.
    #[arg(long)]
    pub self_sup_on_test_tasks: bool,
    /// Refresh the rolling checkpoint every this many evaluation boundaries
    /// (0 writes only the final checkpoint).
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: u64,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory supplying the train/test task sets.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for eval.csv and the resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// Adaptation episodes per meta-test (defaults to the checkpoint config).
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Independent evaluation repetitions, each on its own RNG stream.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Which task set to evaluate: train, test, or both.
    #[arg(long, default_value = "test")]
    pub task_set: String,
    /// Dotted-path overrides applied on top of the checkpoint config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Replaces the checkpoint config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Checkpoint to probe (typically pre-self-sup).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Optional second checkpoint (typically post-self-sup) added to the report.
    #[arg(long)]
    pub post_checkpoint: Option<PathBuf>,
    /// Dataset directory supplying the offline buffers.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for shift_report.csv and optional trajectory dumps.
    #[arg(long)]
    pub out: PathBuf,
    /// Probes per metric.
    #[arg(long, default_value_t = crate::diagnostics::DEFAULT_N_PROBES)]
    pub n_probes: usize,
    /// Also dump (x, y) trajectory traces (2-D families only).
    #[arg(long)]
    pub dump_xy: bool,
    /// Episodes per (mode, task) in the trajectory dump.
    #[arg(long, default_value_t = 3)]
    pub dump_episodes: usize,
    /// Dotted-path overrides applied on top of the checkpoint config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Replaces the checkpoint config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|_| ()),
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Diagnose(a) => cmd_diagnose(a).map(|_| ()),
    }
}

fn parse_sets(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| {
                    SmacError::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}"))
                })
        })
        .collect()
}

/// Parses the SMAC_LAB_SEED environment value; absent is fine, garbage is a
/// config error.
pub fn env_seed(
    raw: std::result::Result<String, std::env::VarError>,
) -> Result<Option<u64>> {
    match raw {
        Ok(text) => text.trim().parse::<u64>().map(Some).map_err(|_| {
            SmacError::InvalidConfig(format!(
                "{SEED_ENV_VAR} must be an unsigned integer, got {text:?}"
            ))
        }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => Err(SmacError::InvalidConfig(format!(
            "{SEED_ENV_VAR} holds non-unicode data"
        ))),
    }
}

fn resolve_from_args(args: &ConfigArgs, baseline: Option<BaselineMode>) -> Result<RunConfig> {
    let family = Family::parse(&args.family)?;
    let file_json = match &args.config {
        Some(path) => Some(fs::read_to_string(path)?),
        None => None,
    };
    let sources = ConfigSources {
        file_json,
        sets: parse_sets(&args.set)?,
        seed_flag: args.seed,
        env_seed: env_seed(std::env::var(SEED_ENV_VAR))?,
        baseline_flag: baseline,
        paper_scale: args.paper_scale,
    };
    resolve_config(family, &sources)
}

/// Applies --set/--seed overrides on top of a checkpoint's stored config.
fn override_config(
    base: &RunConfig,
    sets: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(base)?;
    for (path, value) in parse_sets(sets)? {
        apply_override(&mut tree, &path, &value)?;
    }
    if let Some(s) = seed {
        tree["seed"] = serde_json::json!(s);
    }
    let cfg: RunConfig = serde_json::from_value(tree)
        .map_err(|e| SmacError::InvalidConfig(format!("config does not parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Refuses to clobber a non-empty directory unless forced, then (re)creates it.
fn prepare_out_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let non_empty = fs::read_dir(path)?.next().is_some();
        if non_empty {
            if !force {
                return Err(SmacError::Data(format!(
                    "output directory {} is not empty (pass --force to overwrite)",
                    path.display()
                )));
            }
            fs::remove_dir_all(path)?;
        }
    }
    fs::create_dir_all(path)?;
    Ok(())
}

fn write_resolved_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    fs::write(dir.join(RESOLVED_CONFIG_FILE), text)?;
    Ok(())
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<DatasetManifest> {
    let cfg = resolve_from_args(&args.config, None)?;
    prepare_out_dir(&args.out, args.force)?;
    write_resolved_config(&args.out, &cfg)?;
    let manifest = crate::training::generate_offline_dataset(&cfg, &args.out)?;
    let rl: usize = manifest.train_tasks.iter().map(|t| t.rl_count).sum();
    let enc: usize = manifest.train_tasks.iter().map(|t| t.enc_count).sum();
    println!(
        "wrote {} dataset to {}: {} train tasks ({rl} rl + {enc} enc transitions), {} test tasks",
        manifest.family.name(),
        args.out.display(),
        manifest.train_tasks.len(),
        manifest.test_tasks.len()
    );
    if let Some(f) = manifest.success_fraction {
        println!("scripted success fraction: {f:.4}");
    }
    Ok(manifest)
}

/// Checks that the dataset actually fits the run configuration, reporting
/// every mismatch at once.
fn check_dataset_matches(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<()> {
    let mut errs = Vec::new();
    if manifest.family != cfg.env.family {
        errs.push(format!(
            "dataset family {} != config family {}",
            manifest.family.name(),
            cfg.env.family.name()
        ));
    }
    if manifest.horizon != cfg.env.horizon {
        errs.push(format!(
            "dataset horizon {} != config horizon {}",
            manifest.horizon, cfg.env.horizon
        ));
    }
    if manifest.train_tasks.len() != cfg.env.train_tasks {
        errs.push(format!(
            "dataset has {} train tasks, config expects {}",
            manifest.train_tasks.len(),
            cfg.env.train_tasks
        ));
    }
    if manifest.test_tasks.len() != cfg.env.test_tasks {
        errs.push(format!(
            "dataset has {} test tasks, config expects {}",
            manifest.test_tasks.len(),
            cfg.env.test_tasks
        ));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(SmacError::InvalidConfig(errs.join("; ")))
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub report: BaselineReport,
    pub config: RunConfig,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutput> {
    let baseline = BaselineMode::parse(&args.baseline)?;
    let mut cfg = resolve_from_args(&args.config, Some(baseline))?;
    if args.self_sup_on_test_tasks {
        cfg.online.self_sup_on_test_tasks = true;
    }
    let phases = PhaseSelection::parse(&args.phase)?;

    let (manifest, mut buffers) = load_dataset(&args.data)?;
    check_dataset_matches(&cfg, &manifest)?;

    let mut agent = match &args.resume {
        Some(ckpt) => {
            let (agent, meta) = load_checkpoint(ckpt)?;
            if meta.d_z != cfg.networks.d_z {
                return Err(SmacError::InvalidConfig(format!(
                    "checkpoint d_z {} != config d_z {}",
                    meta.d_z, cfg.networks.d_z
                )));
            }
            if meta.obs_dim != cfg.env.family.obs_dim()
                || meta.action_dim != cfg.env.family.action_dim()
            {
                return Err(SmacError::InvalidConfig(format!(
                    "checkpoint was trained on {}-dim obs / {}-dim actions; family {} needs {}/{}",
                    meta.obs_dim,
                    meta.action_dim,
                    cfg.env.family.name(),
                    cfg.env.family.obs_dim(),
                    cfg.env.family.action_dim()
                )));
            }
            agent
        }
        None => build_agent(&cfg),
    };

    prepare_out_dir(&args.out, args.force)?;
    write_resolved_config(&args.out, &cfg)?;
    let metrics_path = args.out.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let rolling_dir = args.out.join("checkpoint_latest");
    let mut boundaries = 0u64;
    let cfg_for_sink = cfg.clone();
    let checkpoint_every = args.checkpoint_every;
    let mut sink = |agent: &crate::agent::AgentState,
                    row: &crate::metrics::MetricsRow|
     -> Result<()> {
        writer.write_row(row)?;
        boundaries += 1;
        if checkpoint_every > 0 && boundaries % checkpoint_every == 0 {
            save_checkpoint(&rolling_dir, agent, &cfg_for_sink, "latest")?;
        }
        Ok(())
    };

    let report = run_baseline(
        &mut agent,
        &mut buffers,
        &manifest.test_tasks,
        &cfg,
        phases,
        &mut sink,
    )?;
    drop(sink);

    let ran_online = report.rows.iter().any(|r| r.phase == Phase::Online);
    let tag = if ran_online { "online_final" } else { "offline_final" };
    let final_checkpoint = args.out.join("checkpoint_final");
    save_checkpoint(&final_checkpoint, &agent, &cfg, tag)?;

    println!(
        "{} [{}] finished: {} grad steps, {} env steps, {} metrics rows",
        cfg.baseline.name(),
        args.phase,
        agent.grad_steps,
        agent.env_steps,
        report.rows.len()
    );
    if let Some(last) = report.rows.last() {
        if let (Some(m), Some(s)) = (last.test_return_mean, last.test_return_std) {
            println!("final test return: {m:.4} ± {s:.4}");
        }
    }
    Ok(TrainOutput {
        report,
        config: cfg,
        final_checkpoint,
        metrics_path,
    })
}

pub const EVAL_COLUMNS: &str = "seed,row_type,task_set,task_id,rep,episode,value";

#[derive(Debug)]
pub struct EvalOutput {
    pub csv_path: PathBuf,
    /// (task_set, seed index) → (aggregate mean, aggregate std).
    pub aggregates: Vec<(String, u64, f64, f64)>,
}

fn eval_task_sets(
    manifest: &DatasetManifest,
    which: &str,
) -> Result<Vec<(&'static str, Vec<TaskSpec>)>> {
    let train: Vec<TaskSpec> = manifest.train_tasks.iter().map(|r| r.task.clone()).collect();
    let test = manifest.test_tasks.clone();
    match which {
        "train" => Ok(vec![("train", train)]),
        "test" => Ok(vec![("test", test)]),
        "both" => Ok(vec![("train", train), ("test", test)]),
        other => Err(SmacError::InvalidConfig(format!(
            "unknown task set {other:?} (expected train, test, or both)"
        ))),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutput> {
    let (agent, meta) = load_checkpoint(&args.checkpoint)?;
    let mut cfg = override_config(&meta.config, &args.set, args.seed)?;
    if let Some(t) = args.episodes {
        if t < 1 {
            return Err(SmacError::InvalidConfig("--episodes must be ≥ 1".into()));
        }
        cfg.eval.episodes = t;
    }
    let (manifest, _) = load_dataset(&args.data)?;
    check_dataset_matches(&cfg, &manifest)?;
    let sets = eval_task_sets(&manifest, &args.task_set)?;

    prepare_out_dir(&args.out, args.force)?;
    write_resolved_config(&args.out, &cfg)?;

    let mut out = String::from(EVAL_COLUMNS);
    out.push('\n');
    let mut aggregates = Vec::new();
    for (set_name, tasks) in &sets {
        for si in 0..args.seeds {
            let mut task_means = Vec::with_capacity(tasks.len());
            for task in tasks {
                let mut post = Vec::with_capacity(cfg.eval.reps);
                for rep in 0..cfg.eval.reps {
                    let si_s = si.to_string();
                    let task_s = task.task_id.to_string();
                    let rep_s = rep.to_string();
                    let mut rng = derive_rng(
                        cfg.seed,
                        &["cli-eval", &si_s, set_name, &task_s, &rep_s],
                    );
                    let res = meta_test(&agent, task, &cfg, &mut rng)?;
                    for (ep, ret) in res.returns.iter().enumerate() {
                        out.push_str(&format!(
                            "{si},episode_return,{set_name},{},{rep},{ep},{}\n",
                            task.task_id,
                            cell(*ret, "episode return")?
                        ));
                    }
                    out.push_str(&format!(
                        "{si},post_adaptation_return,{set_name},{},{rep},,{}\n",
                        task.task_id,
                        cell(res.post_adaptation_return, "post-adaptation return")?
                    ));
                    post.push(res.post_adaptation_return);
                }
                let (task_mean, _) = mean_std(&post);
                out.push_str(&format!(
                    "{si},task_mean,{set_name},{},,,{}\n",
                    task.task_id,
                    cell(task_mean, "task mean")?
                ));
                task_means.push(task_mean);
            }
            let (agg_mean, agg_std) = mean_std(&task_means);
            out.push_str(&format!(
                "{si},aggregate_mean,{set_name},,,,{}\n",
                cell(agg_mean, "aggregate mean")?
            ));
            out.push_str(&format!(
                "{si},aggregate_std,{set_name},,,,{}\n",
                cell(agg_std, "aggregate std")?
            ));
            aggregates.push((set_name.to_string(), si, agg_mean, agg_std));
        }
    }
    let csv_path = args.out.join("eval.csv");
    fs::write(&csv_path, out)?;
    for (set_name, si, m, s) in &aggregates {
        println!("{set_name} tasks, eval seed {si}: return {m:.4} ± {s:.4}");
    }
    Ok(EvalOutput {
        csv_path,
        aggregates,
    })
}

#[derive(Debug)]
pub struct DiagnoseOutput {
    pub report_path: PathBuf,
    pub report: ShiftReport,
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<DiagnoseOutput> {
    let (agent_pre, meta_pre) = load_checkpoint(&args.checkpoint)?;
    let cfg = override_config(&meta_pre.config, &args.set, args.seed)?;
    let (manifest, buffers) = load_dataset(&args.data)?;
    check_dataset_matches(&cfg, &manifest)?;
    let train_specs: Vec<TaskSpec> = buffers.iter().map(|b| b.task.clone()).collect();

    let mut stages = vec![(meta_pre.tag.clone(), agent_pre)];
    if let Some(post_path) = &args.post_checkpoint {
        let (agent_post, meta_post) = load_checkpoint(post_path)?;
        let tag = if meta_post.tag == meta_pre.tag {
            format!("{}_post", meta_post.tag)
        } else {
            meta_post.tag.clone()
        };
        stages.push((tag, agent_post));
    }

    prepare_out_dir(&args.out, args.force)?;
    write_resolved_config(&args.out, &cfg)?;

    let mut report = ShiftReport::default();
    for (tag, agent) in &stages {
        let mut rng = derive_rng(cfg.seed, &["diagnose", tag]);
        let shift = measure_kl_shift(agent, &buffers, &cfg, args.n_probes, &mut rng)?;
        report.push_shift(tag, &shift);
        let returns =
            measure_conditioned_return(agent, &buffers, &train_specs, &cfg, args.n_probes, &mut rng)?;
        report.push_returns(tag, &returns);
        let (kl_off, _) = mean_std(&shift.kl_offline);
        let (kl_on, _) = mean_std(&shift.kl_online);
        let (r_off, _) = mean_std(&returns.offline_conditioned);
        let (r_on, _) = mean_std(&returns.online_conditioned);
        println!(
            "[{tag}] KL to prior: offline {kl_off:.4}, online {kl_on:.4}; \
             conditioned return: offline {r_off:.4}, online {r_on:.4}"
        );
        if args.dump_xy {
            let csv = dump_trajectories(
                agent,
                &buffers,
                &train_specs,
                &TrajectoryMode::ALL,
                args.dump_episodes,
                &cfg,
                &mut rng,
            )?;
            fs::write(args.out.join(format!("trajectories_{tag}.csv")), csv)?;
        }
    }
    let report_path = args.out.join("shift_report.csv");
    fs::write(&report_path, report.to_csv()?)?;
    println!("wrote {}", report_path.display());
    Ok(DiagnoseOutput {
        report_path,
        report,
    })
}
