//! Distribution-shift diagnostics in latent space: KL-to-prior of posteriors
//! over offline versus self-generated histories, returns conditioned on each
//! kind of posterior, and trajectory dumps for visual inspection.
//!
//! Every probe here is measurement-only: agents and buffers are taken by
//! shared reference and exploration rollouts are discarded, so running the
//! diagnostics can never perturb training.

use ndarray::Array1;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::agent::{policy_mean_action, policy_sample, AgentState};
use crate::config::RunConfig;
use crate::envs::{RolloutEnv, TaskSpec};
use crate::error::{Result, SmacError};
use crate::latent::{
    kl_to_prior, posterior_from_history, sample_prior, sample_reparameterized, History,
    HistoryEntry,
};
use crate::metrics::cell;
use crate::replay::TaskBuffers;
use crate::training::{relabel_trajectory, scaled_history};

pub const DEFAULT_N_PROBES: usize = 50;

/// KL(q‖prior) samples for posteriors over offline histories and over fresh
/// relabeled exploration histories.
#[derive(Debug, Clone)]
pub struct KlShift {
    pub kl_offline: Vec<f64>,
    pub kl_online: Vec<f64>,
}

/// Returns achieved when the policy is conditioned on z drawn from each of
/// the two posterior kinds.
#[derive(Debug, Clone)]
pub struct ConditionedReturns {
    pub offline_conditioned: Vec<f64>,
    pub online_conditioned: Vec<f64>,
}

/// One reward-free exploration episode under z ~ p(z); only the visited
/// (s, a) pairs are kept.
fn exploration_pairs<R: Rng + ?Sized>(
    agent: &AgentState,
    task: &TaskSpec,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let z = sample_prior(agent.dims.d_z, rng);
    let mut env = RolloutEnv::new(task.clone(), horizon, false, rng);
    let mut pairs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let s = env.state().observation.clone();
        let (a, _) = policy_sample(agent, &s, &z, rng)?;
        env.step(&a, false)?;
        pairs.push((s, a));
    }
    Ok(pairs)
}

/// Fresh exploration episode relabeled by the decoder, exactly as the online
/// phase would label it: z is drawn from the posterior over a history sampled
/// from the task's offline encoder buffer.
fn relabeled_exploration_history<R: Rng + ?Sized>(
    agent: &AgentState,
    buf: &TaskBuffers,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<History> {
    let pairs = exploration_pairs(agent, &buf.task, cfg.env.horizon, rng)?;
    let h_raw = buf.sample_history(cfg.optim.enc_batch, rng)?;
    let labels = relabel_trajectory(
        agent,
        &pairs,
        &scaled_history(&h_raw, cfg.env.reward_scale),
        rng,
    )?;
    Ok(History {
        entries: pairs
            .into_iter()
            .zip(labels)
            .map(|((s, a), r)| HistoryEntry { s, a, r })
            .collect(),
    })
}

/// Per probe: pick a task, form the posterior over an offline history sample
/// and over one fresh relabeled exploration episode, and record KL-to-prior
/// for both. Nothing is written back to the buffers.
pub fn measure_kl_shift<R: Rng + ?Sized>(
    agent: &AgentState,
    buffers: &[TaskBuffers],
    cfg: &RunConfig,
    n_probes: usize,
    rng: &mut R,
) -> Result<KlShift> {
    if buffers.is_empty() {
        return Err(SmacError::Data("kl-shift probe needs at least one task buffer".into()));
    }
    let mut kl_offline = Vec::with_capacity(n_probes);
    let mut kl_online = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let buf = &buffers[rng.random_range(0..buffers.len())];
        let h_off = scaled_history(&buf.sample_history(cfg.optim.enc_batch, rng)?, cfg.env.reward_scale);
        let q_off = posterior_from_history(&agent.encoder, &h_off)?;
        kl_offline.push(kl_to_prior(&q_off));
        let h_on = relabeled_exploration_history(agent, buf, cfg, rng)?;
        let q_on = posterior_from_history(&agent.encoder, &h_on)?;
        kl_online.push(kl_to_prior(&q_on));
    }
    Ok(KlShift {
        kl_offline,
        kl_online,
    })
}

/// One true-reward episode on `task` with the policy conditioned on a fixed z.
pub fn conditioned_return<R: Rng + ?Sized>(
    agent: &AgentState,
    task: &TaskSpec,
    z: &Array1<f64>,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut env = RolloutEnv::new(task.clone(), cfg.env.horizon, true, rng);
    let mut total = 0.0;
    for _ in 0..cfg.env.horizon {
        let s = env.state().observation.clone();
        let a = if cfg.eval.deterministic {
            policy_mean_action(agent, &s, z)?
        } else {
            policy_sample(agent, &s, z, rng)?.0
        };
        total += env
            .step(&a, true)?
            .expect("reward-revealing env must return a reward");
    }
    if !total.is_finite() {
        return Err(SmacError::NonFinite {
            context: format!("conditioned return on task {}", task.task_id),
            value: total,
        });
    }
    Ok(total)
}

fn buffer_for<'a>(buffers: &'a [TaskBuffers], task: &TaskSpec) -> Result<&'a TaskBuffers> {
    buffers
        .iter()
        .find(|b| b.task.task_id == task.task_id)
        .ok_or_else(|| {
            SmacError::Data(format!("no buffer holds data for task {}", task.task_id))
        })
}

/// Per probe: draw z once from the posterior over an offline history and once
/// from the posterior over a fresh relabeled exploration episode, then roll
/// out one true-reward episode per z. Both return lists have `n_probes`
/// entries and line up probe-for-probe.
pub fn measure_conditioned_return<R: Rng + ?Sized>(
    agent: &AgentState,
    buffers: &[TaskBuffers],
    tasks: &[TaskSpec],
    cfg: &RunConfig,
    n_probes: usize,
    rng: &mut R,
) -> Result<ConditionedReturns> {
    if tasks.is_empty() {
        return Err(SmacError::Data("conditioned-return probe needs at least one task".into()));
    }
    let mut offline_conditioned = Vec::with_capacity(n_probes);
    let mut online_conditioned = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let task = &tasks[rng.random_range(0..tasks.len())];
        let buf = buffer_for(buffers, task)?;
        let h_off = scaled_history(&buf.sample_history(cfg.optim.enc_batch, rng)?, cfg.env.reward_scale);
        let (z_off, _) = sample_reparameterized(&posterior_from_history(&agent.encoder, &h_off)?, rng);
        let h_on = relabeled_exploration_history(agent, buf, cfg, rng)?;
        let (z_on, _) = sample_reparameterized(&posterior_from_history(&agent.encoder, &h_on)?, rng);
        offline_conditioned.push(conditioned_return(agent, task, &z_off, cfg, rng)?);
        online_conditioned.push(conditioned_return(agent, task, &z_on, cfg, rng)?);
    }
    Ok(ConditionedReturns {
        offline_conditioned,
        online_conditioned,
    })
}

/// What kind of trajectory to dump for visual inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryMode {
    /// Policy conditioned on z from the posterior over offline data.
    OfflineConditioned,
    /// Policy conditioned on z from the posterior over a relabeled
    /// exploration episode.
    OnlineConditioned,
    /// Stochastic policy under z ~ p(z).
    Exploration,
    /// Logged offline transitions replayed verbatim.
    Dataset,
}

impl TrajectoryMode {
    pub const ALL: [TrajectoryMode; 4] = [
        TrajectoryMode::OfflineConditioned,
        TrajectoryMode::OnlineConditioned,
        TrajectoryMode::Exploration,
        TrajectoryMode::Dataset,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TrajectoryMode::OfflineConditioned => "offline_conditioned",
            TrajectoryMode::OnlineConditioned => "online_conditioned",
            TrajectoryMode::Exploration => "exploration",
            TrajectoryMode::Dataset => "dataset",
        }
    }
}

fn push_xy_rows(
    out: &mut String,
    mode: TrajectoryMode,
    task_id: u32,
    episode: usize,
    xy: &[(f64, f64)],
) -> Result<()> {
    for (step, (x, y)) in xy.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            mode.name(),
            task_id,
            episode,
            step,
            cell(*x, "trajectory x")?,
            cell(*y, "trajectory y")?
        ));
    }
    Ok(())
}

fn rollout_xy<R: Rng + ?Sized>(
    agent: &AgentState,
    task: &TaskSpec,
    z: &Array1<f64>,
    cfg: &RunConfig,
    stochastic: bool,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    let mut env = RolloutEnv::new(task.clone(), cfg.env.horizon, false, rng);
    let mut xy = Vec::with_capacity(cfg.env.horizon);
    for _ in 0..cfg.env.horizon {
        let s = env.state().observation.clone();
        xy.push((s[0], s[1]));
        let a = if stochastic {
            policy_sample(agent, &s, z, rng)?.0
        } else {
            policy_mean_action(agent, &s, z)?
        };
        env.step(&a, false)?;
    }
    Ok(xy)
}

/// Dumps (x, y) traces as CSV with columns `mode,task_id,episode,step,x,y`.
/// Every (mode, task) pair contributes exactly `episodes × horizon` rows.
/// Only 2-D point families have a position plane to dump.
pub fn dump_trajectories<R: Rng + ?Sized>(
    agent: &AgentState,
    buffers: &[TaskBuffers],
    tasks: &[TaskSpec],
    modes: &[TrajectoryMode],
    episodes: usize,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<String> {
    if !cfg.env.family.is_2d() {
        return Err(SmacError::InvalidConfig(format!(
            "trajectory dumps need a 2-D position plane; family {} has none",
            cfg.env.family.name()
        )));
    }
    let mut out = String::from("mode,task_id,episode,step,x,y\n");
    for &mode in modes {
        for task in tasks {
            for ep in 0..episodes {
                let xy: Vec<(f64, f64)> = match mode {
                    TrajectoryMode::Exploration => {
                        let z = sample_prior(agent.dims.d_z, rng);
                        rollout_xy(agent, task, &z, cfg, true, rng)?
                    }
                    TrajectoryMode::OfflineConditioned => {
                        let buf = buffer_for(buffers, task)?;
                        let h = scaled_history(
                            &buf.sample_history(cfg.optim.enc_batch, rng)?,
                            cfg.env.reward_scale,
                        );
                        let (z, _) =
                            sample_reparameterized(&posterior_from_history(&agent.encoder, &h)?, rng);
                        rollout_xy(agent, task, &z, cfg, false, rng)?
                    }
                    TrajectoryMode::OnlineConditioned => {
                        let buf = buffer_for(buffers, task)?;
                        let h = relabeled_exploration_history(agent, buf, cfg, rng)?;
                        let (z, _) =
                            sample_reparameterized(&posterior_from_history(&agent.encoder, &h)?, rng);
                        rollout_xy(agent, task, &z, cfg, false, rng)?
                    }
                    TrajectoryMode::Dataset => {
                        let buf = buffer_for(buffers, task)?;
                        let start = ep * cfg.env.horizon;
                        let end = start + cfg.env.horizon;
                        if buf.rl.len() < end {
                            return Err(SmacError::Data(format!(
                                "task {} has {} logged transitions, need {} for {} dataset episodes",
                                task.task_id,
                                buf.rl.len(),
                                end,
                                episodes
                            )));
                        }
                        buf.rl[start..end].iter().map(|t| (t.s[0], t.s[1])).collect()
                    }
                };
                push_xy_rows(&mut out, mode, task.task_id, ep, &xy)?;
            }
        }
    }
    Ok(out)
}

/// Flat CSV report of shift metrics, one row per probe sample.
#[derive(Debug, Clone, Default)]
pub struct ShiftReport {
    pub rows: Vec<ShiftRow>,
}

#[derive(Debug, Clone)]
pub struct ShiftRow {
    pub checkpoint_tag: String,
    pub metric: String,
    pub probe_index: usize,
    pub value: f64,
}

impl ShiftReport {
    pub const COLUMNS: &'static str = "checkpoint_tag,metric,probe_index,value";

    pub fn push_samples(&mut self, tag: &str, metric: &str, values: &[f64]) {
        for (i, &v) in values.iter().enumerate() {
            self.rows.push(ShiftRow {
                checkpoint_tag: tag.to_string(),
                metric: metric.to_string(),
                probe_index: i,
                value: v,
            });
        }
    }

    pub fn push_shift(&mut self, tag: &str, shift: &KlShift) {
        self.push_samples(tag, "kl_offline", &shift.kl_offline);
        self.push_samples(tag, "kl_online", &shift.kl_online);
    }

    pub fn push_returns(&mut self, tag: &str, returns: &ConditionedReturns) {
        self.push_samples(tag, "return_offline_conditioned", &returns.offline_conditioned);
        self.push_samples(tag, "return_online_conditioned", &returns.online_conditioned);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from(Self::COLUMNS);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.checkpoint_tag,
                r.metric,
                r.probe_index,
                cell(r.value, "shift report value")?
            ));
        }
        Ok(out)
    }
}

/// Mann–Whitney U test (normal approximation with tie correction and
/// continuity correction). Returns (U of `a`, one-sided p-value for the
/// alternative "`a` is stochastically greater than `b`").
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> (f64, f64) {
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let mut all: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("rank inputs must be comparable"));

    let n = all.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        let t = (j - i) as f64;
        // Ranks are 1-based; tied values share the average rank of the run.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_a += avg_rank;
            }
        }
        tie_term += t * t * t - t;
        i = j;
    }

    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let n_tot = n1 + n2;
    let var = n1 * n2 / 12.0 * ((n_tot + 1.0) - tie_term / (n_tot * (n_tot - 1.0)));
    if var <= 0.0 {
        return (u, 0.5);
    }
    let z = (u - mean - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal is well formed");
    let p = 1.0 - normal.cdf(z);
    (u, p)
}
