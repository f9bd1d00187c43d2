//! End-to-end training: offline dataset generation, the offline meta-training
//! phase, the self-supervised online phase with decoder relabeling, the
//! meta-test adaptation protocol, and the baseline variants.
//!
//! Reward convention: buffers and dataset files hold unscaled ground-truth
//! rewards (or decoder labels divided by the scale); every batch or history
//! handed to a network multiplies rewards by `env.reward_scale` at draw time,
//! so the networks always see one consistent reward space.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::agent::{
    awac_actor_loss, critic_loss, pearl_actor_loss, policy_mean_action, policy_sample,
    reward_loss, self_supervised_actor_loss, soft_update_targets, ActorOut, ActorWeightMode,
    AgentDims, AgentState, BatchMatrices, LossBreakdown,
};
use crate::config::{BaselineMode, RunConfig};
use crate::dataset::{
    save_dataset, BufTag, DatasetManifest, TaskRecord, TransitionRow, DATASET_FORMAT_VERSION,
};
use crate::envs::{self, RolloutEnv, TaskSpec};
use crate::error::{Result, SmacError};
use crate::latent::{
    posterior_from_history, sample_prior, sample_reparameterized, History, HistoryEntry,
    LatentPosterior,
};
use crate::metrics::{mean_std, MetricsRow, Phase};
use crate::nn::{adam_step, mlp_forward_batch, AdamHyper, Gradient, OutputActivation};
use crate::replay::{sample_meta_batch, AppendTargets, Source, TaskBuffers, Transition};
use crate::rng::{derive_rng, derive_rng_at};

/// Which objective trains the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActorLossMode {
    /// AWAC plus λ_pearl · reparameterized actor loss.
    AwacCombined,
    /// Reparameterized (SAC-style) actor loss only.
    PearlOnly,
    /// Advantage weights forced to one: plain behavior cloning.
    BehaviorClone,
}

pub fn actor_mode_for(baseline: BaselineMode) -> ActorLossMode {
    match baseline {
        BaselineMode::Smac | BaselineMode::OnlineOracle => ActorLossMode::AwacCombined,
        BaselineMode::MetaBc => ActorLossMode::BehaviorClone,
        BaselineMode::SacActorAblation => ActorLossMode::PearlOnly,
    }
}

/// Which labels the online phase writes into replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelabelMode {
    Decoder,
    TrueReward,
}

/// Records which relabel code path actually ran (structural check for the
/// oracle baseline, which must differ from smac only here).
#[derive(Debug, Clone, Copy, Default)]
pub struct RelabelFlags {
    pub decoder_path: bool,
    pub true_reward_path: bool,
}

/// History with rewards multiplied by the training reward scale.
pub fn scaled_history(h: &History, scale: f64) -> History {
    History {
        entries: h
            .entries
            .iter()
            .map(|e| HistoryEntry {
                s: e.s.clone(),
                a: e.a.clone(),
                r: e.r * scale,
            })
            .collect(),
    }
}

/// Batch matrices with rewards multiplied by the training reward scale.
pub fn scaled_batch(batch: &[Transition], dims: &AgentDims, scale: f64) -> Result<BatchMatrices> {
    let mut m = BatchMatrices::from_transitions(batch, dims)?;
    m.r *= scale;
    Ok(m)
}

fn adam_hyper(cfg: &RunConfig) -> AdamHyper {
    AdamHyper {
        lr: cfg.optim.lr,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
    }
}

/// Scales `g` down to the configured global L2 norm when it exceeds it.
fn clip_gradient(g: &mut Gradient, clip: Option<f64>) {
    if let Some(limit) = clip {
        let norm = g.to_vector().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > limit {
            g.scale(limit / norm);
        }
    }
}

/// One meta gradient step: sample a meta-batch of tasks; per task, draw z
/// from the posterior over the first history, evaluate critic, actor, and
/// (when `update_encoder`) reward losses against the pre-update parameters;
/// then apply one averaged Adam step per network and soft-update the targets.
pub fn meta_gradient_step<R: Rng + ?Sized>(
    agent: &mut AgentState,
    buffers: &[TaskBuffers],
    cfg: &RunConfig,
    mode: ActorLossMode,
    update_encoder: bool,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let scale = cfg.env.reward_scale;
    let samples = sample_meta_batch(
        buffers,
        cfg.optim.meta_batch,
        cfg.optim.enc_batch,
        cfg.optim.rl_batch,
        rng,
    )?;
    let inv = 1.0 / samples.len() as f64;
    let entropy = if cfg.optim.entropy_in_target {
        Some(cfg.optim.alpha)
    } else {
        None
    };

    let mut g_policy = Gradient::zeros_like(&agent.policy);
    let mut g_q1 = Gradient::zeros_like(&agent.q1);
    let mut g_q2 = Gradient::zeros_like(&agent.q2);
    let mut g_enc = Gradient::zeros_like(&agent.encoder);
    let mut g_dec = Gradient::zeros_like(&agent.decoder);
    let mut sums = LossBreakdown::default();

    for s in &samples {
        let h1 = scaled_history(&s.h1, scale);
        let posterior = posterior_from_history(&agent.encoder, &h1)?;
        let (z, _) = sample_reparameterized(&posterior, rng);
        let batch = scaled_batch(&s.batch, &agent.dims, scale)?;

        let c = critic_loss(agent, &batch, &z, cfg.optim.gamma, entropy, rng)?;
        g_q1.add_scaled(&c.grad_q1, inv);
        g_q2.add_scaled(&c.grad_q2, inv);
        sums.critic += inv * c.loss;

        let a: ActorOut = match mode {
            ActorLossMode::AwacCombined => self_supervised_actor_loss(
                agent,
                &batch,
                &z,
                cfg.optim.awr_lambda,
                cfg.optim.lambda_pearl,
                cfg.optim.alpha,
                ActorWeightMode::Advantage,
                None,
                rng,
            )?,
            ActorLossMode::BehaviorClone => awac_actor_loss(
                agent,
                &batch,
                &z,
                cfg.optim.awr_lambda,
                ActorWeightMode::ForceOne,
                None,
                rng,
            )?,
            ActorLossMode::PearlOnly => {
                let (loss, grad) = pearl_actor_loss(agent, &batch, &z, cfg.optim.alpha, rng)?;
                ActorOut {
                    loss,
                    grad_policy: grad,
                    weights: Array1::zeros(0),
                }
            }
        };
        g_policy.add_scaled(&a.grad_policy, inv);
        sums.actor += inv * a.loss;

        if update_encoder {
            let h2 = scaled_history(&s.h2, scale);
            let r = reward_loss(agent, &h2, cfg.optim.kl_weight, rng)?;
            g_enc.add_scaled(&r.grad_encoder, inv);
            g_dec.add_scaled(&r.grad_decoder, inv);
            sums.reward_mse += inv * r.mse;
            sums.kl += inv * r.kl;
        }
    }

    if !(sums.critic.is_finite()
        && sums.actor.is_finite()
        && sums.reward_mse.is_finite()
        && sums.kl.is_finite())
    {
        return Err(SmacError::Diverged(format!(
            "non-finite loss at grad step {}: critic={} actor={} reward_mse={} kl={}",
            agent.grad_steps, sums.critic, sums.actor, sums.reward_mse, sums.kl
        )));
    }

    let hyper = adam_hyper(cfg);
    let clip = cfg.optim.grad_clip;
    clip_gradient(&mut g_q1, clip);
    clip_gradient(&mut g_q2, clip);
    clip_gradient(&mut g_policy, clip);
    adam_step(&mut agent.q1, &g_q1, &hyper)?;
    adam_step(&mut agent.q2, &g_q2, &hyper)?;
    adam_step(&mut agent.policy, &g_policy, &hyper)?;
    if update_encoder {
        clip_gradient(&mut g_enc, clip);
        clip_gradient(&mut g_dec, clip);
        adam_step(&mut agent.encoder, &g_enc, &hyper)?;
        adam_step(&mut agent.decoder, &g_dec, &hyper)?;
    }
    soft_update_targets(agent, cfg.soft_update_eta())?;
    agent.grad_steps += 1;
    Ok(sums)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZSource {
    Prior,
    Posterior,
}

/// Result of one meta-episode: T adaptation episodes on one task.
#[derive(Debug, Clone)]
pub struct MetaEpisodeResult {
    pub task_id: u32,
    pub returns: Vec<f64>,
    pub post_adaptation_return: f64,
    pub z_source: ZSource,
    /// Accumulated (s, a, scaled reward) triples across all episodes.
    pub history: History,
}

/// Meta-test protocol: episode 1 acts under z ~ p(z); before every later
/// episode z is redrawn from the posterior over all previously collected
/// (s, a, r) triples of this meta-episode. True rewards are revealed; returns
/// are unscaled sums.
pub fn meta_test<R: Rng + ?Sized>(
    agent: &AgentState,
    task: &TaskSpec,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<MetaEpisodeResult> {
    let t_eps = cfg.eval.episodes;
    let horizon = cfg.env.horizon;
    let scale = cfg.env.reward_scale;
    let mut history = History::default();
    let mut env = RolloutEnv::new(task.clone(), horizon, true, rng);
    let mut returns = Vec::with_capacity(t_eps);
    let mut z = sample_prior(agent.dims.d_z, rng);
    for ep in 0..t_eps {
        if ep > 0 {
            let posterior = posterior_from_history(&agent.encoder, &history)?;
            z = sample_reparameterized(&posterior, rng).0;
            env.reset(rng);
        }
        let mut ep_return = 0.0;
        for _ in 0..horizon {
            let s = env.state().observation.clone();
            let a = if cfg.eval.deterministic {
                policy_mean_action(agent, &s, &z)?
            } else {
                policy_sample(agent, &s, &z, rng)?.0
            };
            let r = env
                .step(&a, true)?
                .expect("reward-revealing env must return a reward");
            ep_return += r;
            history.entries.push(HistoryEntry { s, a, r: r * scale });
        }
        if !ep_return.is_finite() {
            return Err(SmacError::NonFinite {
                context: format!("meta-test return on task {}", task.task_id),
                value: ep_return,
            });
        }
        returns.push(ep_return);
    }
    Ok(MetaEpisodeResult {
        task_id: task.task_id,
        post_adaptation_return: *returns.last().expect("T >= 1"),
        z_source: if t_eps > 1 { ZSource::Posterior } else { ZSource::Prior },
        returns,
        history,
    })
}

/// Post-adaptation returns over `tasks × eval.reps`, each repetition on an
/// independent RNG stream derived from (seed, label, iteration, task, rep).
pub fn evaluate_post_adaptation(
    agent: &AgentState,
    tasks: &[TaskSpec],
    cfg: &RunConfig,
    label: &str,
    iteration: u64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(tasks.len() * cfg.eval.reps);
    for task in tasks {
        for rep in 0..cfg.eval.reps {
            let it_s = iteration.to_string();
            let task_s = task.task_id.to_string();
            let rep_s = rep.to_string();
            let mut rng = derive_rng(cfg.seed, &["eval", label, &it_s, &task_s, &rep_s]);
            out.push(meta_test(agent, task, cfg, &mut rng)?.post_adaptation_return);
        }
    }
    Ok(out)
}

fn eval_row(
    agent: &AgentState,
    train_tasks: &[TaskSpec],
    test_tasks: &[TaskSpec],
    cfg: &RunConfig,
    phase: Phase,
    iteration: u64,
    acc: &LossBreakdown,
    acc_n: u64,
) -> Result<MetricsRow> {
    let label = match phase {
        Phase::Offline => "offline",
        Phase::Online => "online",
    };
    let train_returns = evaluate_post_adaptation(agent, train_tasks, cfg, label, iteration)?;
    let test_returns = evaluate_post_adaptation(agent, test_tasks, cfg, label, iteration)?;
    let (train_mean, train_std) = mean_std(&train_returns);
    let (test_mean, test_std) = mean_std(&test_returns);
    let inv = if acc_n == 0 { 0.0 } else { 1.0 / acc_n as f64 };
    Ok(MetricsRow {
        phase,
        iteration,
        env_steps: agent.env_steps,
        grad_steps: agent.grad_steps,
        critic_loss: acc.critic * inv,
        actor_loss: acc.actor * inv,
        reward_mse: acc.reward_mse * inv,
        kl_term: acc.kl * inv,
        train_return_mean: Some(train_mean),
        train_return_std: Some(train_std),
        test_return_mean: Some(test_mean),
        test_return_std: Some(test_std),
    })
}

/// Called at every evaluation boundary with the agent as it stands and the
/// metrics row just produced; lets callers stream metrics and checkpoint
/// periodically without touching the training loop.
pub type EvalSink<'a> = &'a mut dyn FnMut(&AgentState, &MetricsRow) -> Result<()>;

/// Offline phase: `n_offline` meta gradient steps with encoder and decoder
/// training enabled; the environment is never touched.
pub fn run_offline_phase(
    agent: &mut AgentState,
    buffers: &[TaskBuffers],
    test_tasks: &[TaskSpec],
    cfg: &RunConfig,
    mode: ActorLossMode,
    sink: EvalSink,
) -> Result<Vec<MetricsRow>> {
    let train_specs: Vec<TaskSpec> = buffers.iter().map(|b| b.task.clone()).collect();
    let mut rows = Vec::new();
    let mut acc = LossBreakdown::default();
    let mut acc_n = 0u64;
    for it in 0..cfg.offline.n_offline {
        let mut rng = derive_rng_at(cfg.seed, &["offline", "step"], it);
        let l = meta_gradient_step(agent, buffers, cfg, mode, true, &mut rng)?;
        acc.critic += l.critic;
        acc.actor += l.actor;
        acc.reward_mse += l.reward_mse;
        acc.kl += l.kl;
        acc_n += 1;
        if (it + 1) % cfg.offline.eval_period == 0 || it + 1 == cfg.offline.n_offline {
            let row = eval_row(
                agent,
                &train_specs,
                test_tasks,
                cfg,
                Phase::Offline,
                it + 1,
                &acc,
                acc_n,
            )?;
            sink(agent, &row)?;
            rows.push(row);
            acc = LossBreakdown::default();
            acc_n = 0;
        }
    }
    Ok(rows)
}

/// Decoder outputs r_φ(s, a, z) for every (s, a) pair under one shared z.
pub fn decode_rewards(
    agent: &AgentState,
    pairs: &[(Vec<f64>, Vec<f64>)],
    z: &Array1<f64>,
) -> Result<Vec<f64>> {
    let n = pairs.len();
    let d_in = agent.dims.obs_dim + agent.dims.action_dim + agent.dims.d_z;
    let mut input = Array2::zeros((n, d_in));
    for (i, (s, a)) in pairs.iter().enumerate() {
        for (j, v) in s.iter().chain(a.iter()).chain(z.iter()).enumerate() {
            input[[i, j]] = *v;
        }
    }
    let (out, _) = mlp_forward_batch(&agent.decoder, input.view(), OutputActivation::Identity)?;
    Ok(out.index_axis(Axis(1), 0).to_vec())
}

/// Relabels one trajectory with a single posterior draw: z ~ q_φ(z|h)
/// (the prior when h is empty), then r̂ = r_φ(s, a, z) per step. Returned
/// labels live in the scaled reward space the decoder was trained on.
pub fn relabel_trajectory<R: Rng + ?Sized>(
    agent: &AgentState,
    pairs: &[(Vec<f64>, Vec<f64>)],
    h_scaled: &History,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let posterior = if h_scaled.is_empty() {
        LatentPosterior::prior(agent.dims.d_z)
    } else {
        posterior_from_history(&agent.encoder, h_scaled)?
    };
    let (z, _) = sample_reparameterized(&posterior, rng);
    decode_rewards(agent, &pairs.to_vec(), &z)
}

/// One reward-free (or oracle) exploration episode under a fixed z.
/// Returns (s, a) pairs, next observations, done flags, and — when revealed —
/// the true rewards.
struct CollectedEpisode {
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
    next_obs: Vec<Vec<f64>>,
    dones: Vec<bool>,
    true_rewards: Option<Vec<f64>>,
}

fn collect_episode<R: Rng + ?Sized>(
    agent: &AgentState,
    task: &TaskSpec,
    horizon: usize,
    z: &Array1<f64>,
    want_reward: bool,
    rng: &mut R,
) -> Result<CollectedEpisode> {
    let mut env = RolloutEnv::new(task.clone(), horizon, want_reward, rng);
    let mut pairs = Vec::with_capacity(horizon);
    let mut next_obs = Vec::with_capacity(horizon);
    let mut dones = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let s = env.state().observation.clone();
        let (a, _) = policy_sample(agent, &s, z, rng)?;
        let r = env.step(&a, want_reward)?;
        pairs.push((s, a));
        next_obs.push(env.state().observation.clone());
        dones.push(env.state().done);
        if let Some(r) = r {
            rewards.push(r);
        }
    }
    Ok(CollectedEpisode {
        pairs,
        next_obs,
        dones,
        true_rewards: if want_reward { Some(rewards) } else { None },
    })
}

#[derive(Debug)]
pub struct OnlineOutcome {
    pub rows: Vec<MetricsRow>,
    pub relabel: RelabelFlags,
}

/// Self-supervised phase. Per iteration: sample a replay buffer uniformly
/// from `pool`, collect one episode with z ~ p(z) (reward-free in decoder
/// mode) — rolled out on the sampled buffer's own task, or on a uniformly
/// drawn task from `rollout_override` when self-supervising on held-out
/// environments — label it with the decoder under z from the posterior over
/// a history drawn from that buffer (true rewards in oracle mode), append
/// the labeled episode to the same buffer, then run
/// `grad_steps_per_env_transition × horizon` actor-critic updates. Encoder
/// and decoder parameters are frozen unless `online.enc_frozen` is false;
/// labeled episodes enter the encoder-context pools too unless the buffer's
/// `enc_frozen` flag drops them.
pub fn run_self_supervised_phase(
    agent: &mut AgentState,
    pool: &mut [TaskBuffers],
    rollout_override: Option<&[TaskSpec]>,
    eval_train_tasks: &[TaskSpec],
    eval_test_tasks: &[TaskSpec],
    cfg: &RunConfig,
    mode: ActorLossMode,
    relabel: RelabelMode,
    sink: EvalSink,
) -> Result<OnlineOutcome> {
    let horizon = cfg.env.horizon;
    let scale = cfg.env.reward_scale;
    let update_encoder = !cfg.online.enc_frozen;
    let enc_fp = agent.encoder.fingerprint();
    let dec_fp = agent.decoder.fingerprint();
    let mut flags = RelabelFlags::default();
    let mut rows = Vec::new();
    let mut acc = LossBreakdown::default();
    let mut acc_n = 0u64;

    for it in 0..cfg.online.n_online {
        let mut rng = derive_rng_at(cfg.seed, &["online", "iter"], it);
        let buf_index = rng.random_range(0..pool.len());
        let buffer_task = pool[buf_index].task.clone();
        let env_task = match rollout_override {
            Some(tasks) => tasks[rng.random_range(0..tasks.len())].clone(),
            None => buffer_task.clone(),
        };
        let z = sample_prior(agent.dims.d_z, &mut rng);
        let want_reward = relabel == RelabelMode::TrueReward;
        let ep = collect_episode(agent, &env_task, horizon, &z, want_reward, &mut rng)?;

        // Stored rewards are unscaled: decoder labels live in the scaled
        // space and are divided back down before storage.
        let stored_rewards: Vec<f64> = match relabel {
            RelabelMode::TrueReward => {
                flags.true_reward_path = true;
                ep.true_rewards.clone().expect("oracle episode carries rewards")
            }
            RelabelMode::Decoder => {
                flags.decoder_path = true;
                let h_raw = pool[buf_index].sample_history(cfg.optim.enc_batch, &mut rng)?;
                let h = scaled_history(&h_raw, scale);
                relabel_trajectory(agent, &ep.pairs, &h, &mut rng)?
                    .into_iter()
                    .map(|r| r / scale)
                    .collect()
            }
        };

        let targets = if pool[buf_index].enc_frozen {
            AppendTargets::RL_ONLY
        } else {
            AppendTargets::BOTH
        };
        for (i, (s, a)) in ep.pairs.iter().enumerate() {
            pool[buf_index].append(
                Transition {
                    s: s.clone(),
                    a: a.clone(),
                    r: stored_rewards[i],
                    s_next: ep.next_obs[i].clone(),
                    done: ep.dones[i],
                    source: Source::OnlineGenerated,
                },
                targets,
                buffer_task.task_id,
            )?;
        }
        agent.env_steps += horizon as u64;

        let updates = cfg.online.grad_steps_per_env_transition * horizon as u64;
        let enough_tasks = pool
            .iter()
            .filter(|b| b.is_sampleable())
            .count()
            >= cfg.optim.meta_batch;
        if enough_tasks {
            for _ in 0..updates {
                let l = meta_gradient_step(agent, pool, cfg, mode, update_encoder, &mut rng)?;
                acc.critic += l.critic;
                acc.actor += l.actor;
                acc.reward_mse += l.reward_mse;
                acc.kl += l.kl;
                acc_n += 1;
            }
        }

        if (it + 1) % cfg.online.eval_period == 0 || it + 1 == cfg.online.n_online {
            let row = eval_row(
                agent,
                eval_train_tasks,
                eval_test_tasks,
                cfg,
                Phase::Online,
                it + 1,
                &acc,
                acc_n,
            )?;
            sink(agent, &row)?;
            rows.push(row);
            acc = LossBreakdown::default();
            acc_n = 0;
        }
    }

    if !update_encoder {
        assert_eq!(
            agent.encoder.fingerprint(),
            enc_fp,
            "encoder parameters drifted during the frozen self-supervised phase"
        );
        assert_eq!(
            agent.decoder.fingerprint(),
            dec_fp,
            "decoder parameters drifted during the frozen self-supervised phase"
        );
    }
    Ok(OnlineOutcome {
        rows,
        relabel: flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseSelection {
    Offline,
    Online,
    Both,
}

impl PhaseSelection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(PhaseSelection::Offline),
            "online" => Ok(PhaseSelection::Online),
            "both" => Ok(PhaseSelection::Both),
            other => Err(SmacError::InvalidConfig(format!(
                "unknown phase {other:?} (expected offline, online, or both)"
            ))),
        }
    }
}

#[derive(Debug)]
pub struct BaselineReport {
    pub rows: Vec<MetricsRow>,
    pub relabel: RelabelFlags,
    /// True when the online pool was built from test tasks (Fig. 5 mode).
    pub online_on_test_tasks: bool,
}

/// Runs the configured baseline over the selected phases. `buffers` are the
/// offline training-task buffers; in test-task self-supervision mode the
/// online pool starts from fresh, growing test-task buffers instead.
pub fn run_baseline(
    agent: &mut AgentState,
    buffers: &mut Vec<TaskBuffers>,
    test_tasks: &[TaskSpec],
    cfg: &RunConfig,
    phases: PhaseSelection,
    sink: EvalSink,
) -> Result<BaselineReport> {
    let mode = actor_mode_for(cfg.baseline);
    let mut rows = Vec::new();
    let mut relabel_flags = RelabelFlags::default();
    let train_specs: Vec<TaskSpec> = buffers.iter().map(|b| b.task.clone()).collect();

    if phases != PhaseSelection::Online {
        rows.extend(run_offline_phase(agent, buffers, test_tasks, cfg, mode, sink)?);
    }

    let wants_online = phases != PhaseSelection::Offline;
    if wants_online && cfg.baseline == BaselineMode::MetaBc {
        if phases == PhaseSelection::Online {
            return Err(SmacError::InvalidConfig(
                "meta_bc is an offline-only baseline; it has no online phase".into(),
            ));
        }
    } else if wants_online {
        let relabel = match cfg.baseline {
            BaselineMode::OnlineOracle => RelabelMode::TrueReward,
            _ => RelabelMode::Decoder,
        };
        for b in buffers.iter_mut() {
            b.enc_frozen = cfg.online.freeze_enc_buffers;
        }
        let rollout_override = if cfg.online.self_sup_on_test_tasks {
            Some(test_tasks)
        } else {
            None
        };
        let outcome = run_self_supervised_phase(
            agent,
            buffers,
            rollout_override,
            &train_specs,
            test_tasks,
            cfg,
            mode,
            relabel,
            sink,
        )?;
        rows.extend(outcome.rows);
        relabel_flags = outcome.relabel;
    }

    Ok(BaselineReport {
        rows,
        relabel: relabel_flags,
        online_on_test_tasks: wants_online
            && cfg.baseline != BaselineMode::MetaBc
            && cfg.online.self_sup_on_test_tasks,
    })
}

/// Builds a fresh agent sized for the configured family and networks.
pub fn build_agent(cfg: &RunConfig) -> AgentState {
    let dims = AgentDims {
        obs_dim: cfg.env.family.obs_dim(),
        action_dim: cfg.env.family.action_dim(),
        d_z: cfg.networks.d_z,
    };
    let mut rng = derive_rng(cfg.seed, &["agent-init"]);
    AgentState::new(
        dims,
        &cfg.networks.policy_hidden,
        &cfg.networks.q_hidden,
        &cfg.networks.encoder_hidden,
        &cfg.networks.decoder_hidden,
        &mut rng,
    )
}

fn transitions_to_rows(ts: &[Transition], buf: BufTag) -> Vec<TransitionRow> {
    ts.iter().map(|t| TransitionRow::from_transition(t, buf)).collect()
}

/// Generates the offline dataset. Point families run a short, deliberately
/// early-terminated online-oracle trainer and keep the tails of its per-task
/// buffers; sparse_reach uses a scripted waypoint policy that only sometimes
/// heads for the true goal.
pub fn generate_offline_dataset(cfg: &RunConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let family = cfg.env.family;
    let mut task_rng = derive_rng(cfg.seed, &["gen", "tasks"]);
    let train_tasks: Vec<TaskSpec> = (0..cfg.env.train_tasks)
        .map(|i| envs::sample_task(family, i as u32, &mut task_rng))
        .collect();
    let test_tasks: Vec<TaskSpec> = (0..cfg.env.test_tasks)
        .map(|i| envs::sample_task(family, (cfg.env.train_tasks + i) as u32, &mut task_rng))
        .collect();

    let (records, rows, generator, success_fraction) = match family {
        envs::Family::SparseReach => {
            let (rec, rows, frac) = scripted_sparse_data(cfg, &train_tasks)?;
            (
                rec,
                rows,
                format!(
                    "scripted waypoint policy, goal-seek probability {}, {} trajectories per task",
                    cfg.offline.gen_goal_seek_prob, cfg.offline.gen_trajectories_per_task
                ),
                Some(frac),
            )
        }
        _ => {
            let (rec, rows) = early_terminated_oracle_data(cfg, &train_tasks)?;
            (
                rec,
                rows,
                format!(
                    "early-terminated online-oracle trainer ({} rounds x {} gradient steps)",
                    cfg.offline.gen_rounds, cfg.offline.gen_grad_steps_per_round
                ),
                None,
            )
        }
    };

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        family,
        seed: cfg.seed,
        generator,
        reward_scale_applied: false,
        horizon: cfg.env.horizon,
        obs_dim: family.obs_dim(),
        action_dim: family.action_dim(),
        train_tasks: records,
        test_tasks,
        success_fraction,
    };
    save_dataset(out_dir, &manifest, &rows)?;
    Ok(manifest)
}

/// Short online-oracle meta-training run whose per-task buffer tails become
/// the offline dataset (mediocre data by construction).
fn early_terminated_oracle_data(
    cfg: &RunConfig,
    train_tasks: &[TaskSpec],
) -> Result<(Vec<TaskRecord>, Vec<Vec<TransitionRow>>)> {
    let horizon = cfg.env.horizon;
    let scale = cfg.env.reward_scale;
    let d_z = cfg.networks.d_z;
    let dims = AgentDims {
        obs_dim: cfg.env.family.obs_dim(),
        action_dim: cfg.env.family.action_dim(),
        d_z,
    };
    let mut init_rng = derive_rng(cfg.seed, &["gen", "init"]);
    let mut gen_agent = AgentState::new(
        dims,
        &cfg.networks.policy_hidden,
        &cfg.networks.q_hidden,
        &cfg.networks.encoder_hidden,
        &cfg.networks.decoder_hidden,
        &mut init_rng,
    );
    let mut bufs: Vec<TaskBuffers> = train_tasks
        .iter()
        .map(|t| TaskBuffers::new(t.clone()))
        .collect();

    let needed = cfg
        .offline
        .rl_transitions_per_task
        .max(cfg.offline.enc_transitions_per_task);
    let per_round =
        (needed + cfg.offline.gen_rounds * horizon - 1) / (cfg.offline.gen_rounds * horizon);

    for (ti, task) in train_tasks.iter().enumerate() {
        let ti_s = ti.to_string();
        let mut rng = derive_rng(cfg.seed, &["gen", "warmup", &ti_s]);
        let z = sample_prior(d_z, &mut rng);
        append_oracle_episode(&gen_agent, task, horizon, &z, &mut bufs[ti], &mut rng)?;
    }
    for round in 0..cfg.offline.gen_rounds {
        let round_s = round.to_string();
        for (ti, task) in train_tasks.iter().enumerate() {
            let ti_s = ti.to_string();
            let mut rng = derive_rng(cfg.seed, &["gen", "collect", &round_s, &ti_s]);
            for _ in 0..per_round {
                let h_raw = bufs[ti].sample_history(cfg.optim.enc_batch, &mut rng)?;
                let posterior =
                    posterior_from_history(&gen_agent.encoder, &scaled_history(&h_raw, scale))?;
                let (z, _) = sample_reparameterized(&posterior, &mut rng);
                append_oracle_episode(&gen_agent, task, horizon, &z, &mut bufs[ti], &mut rng)?;
            }
        }
        for g in 0..cfg.offline.gen_grad_steps_per_round {
            let mut rng = derive_rng_at(cfg.seed, &["gen", "update", &round_s], g as u64);
            meta_gradient_step(
                &mut gen_agent,
                &bufs,
                cfg,
                ActorLossMode::AwacCombined,
                true,
                &mut rng,
            )?;
        }
    }

    let mut records = Vec::with_capacity(train_tasks.len());
    let mut rows = Vec::with_capacity(train_tasks.len());
    for (ti, task) in train_tasks.iter().enumerate() {
        let b = &bufs[ti];
        let rl_tail = &b.rl[b.rl.len().saturating_sub(cfg.offline.rl_transitions_per_task)..];
        let enc_tail = &b.enc[b.enc.len().saturating_sub(cfg.offline.enc_transitions_per_task)..];
        let mut task_rows = transitions_to_rows(rl_tail, BufTag::Rl);
        task_rows.extend(transitions_to_rows(enc_tail, BufTag::Enc));
        records.push(TaskRecord {
            task: task.clone(),
            rl_count: rl_tail.len(),
            enc_count: enc_tail.len(),
            file: crate::dataset::task_file_name(ti),
        });
        rows.push(task_rows);
    }
    Ok((records, rows))
}

fn append_oracle_episode<R: Rng + ?Sized>(
    agent: &AgentState,
    task: &TaskSpec,
    horizon: usize,
    z: &Array1<f64>,
    buf: &mut TaskBuffers,
    rng: &mut R,
) -> Result<()> {
    let ep = collect_episode(agent, task, horizon, z, true, rng)?;
    let rewards = ep.true_rewards.expect("oracle episode carries rewards");
    for (i, (s, a)) in ep.pairs.iter().enumerate() {
        buf.append(
            Transition {
                s: s.clone(),
                a: a.clone(),
                r: rewards[i],
                s_next: ep.next_obs[i].clone(),
                done: ep.dones[i],
                source: Source::Offline,
            },
            AppendTargets::BOTH,
            task.task_id,
        )?;
    }
    Ok(())
}

/// Scripted sparse_reach data: straight-line waypoint controller that heads
/// for the true goal with probability `gen_goal_seek_prob`, otherwise for a
/// random decoy; every transition is written to both buffer roles.
fn scripted_sparse_data(
    cfg: &RunConfig,
    train_tasks: &[TaskSpec],
) -> Result<(Vec<TaskRecord>, Vec<Vec<TransitionRow>>, f64)> {
    use rand_distr::StandardNormal;
    let horizon = cfg.env.horizon;
    let mut success_steps = 0usize;
    let mut total_steps = 0usize;
    let mut records = Vec::with_capacity(train_tasks.len());
    let mut rows = Vec::with_capacity(train_tasks.len());
    for (ti, task) in train_tasks.iter().enumerate() {
        let ti_s = ti.to_string();
        let mut rng = derive_rng(cfg.seed, &["gen", "script", &ti_s]);
        let mut transitions: Vec<Transition> = Vec::new();
        for _ in 0..cfg.offline.gen_trajectories_per_task {
            let mut env = RolloutEnv::new(task.clone(), horizon, true, &mut rng);
            let seek = rng.random::<f64>() < cfg.offline.gen_goal_seek_prob;
            let (tx, ty) = if seek {
                (task.params[0], task.params[1])
            } else {
                (
                    (rng.random::<f64>() * 2.0 - 1.0) * envs::GOAL_CENTER_MAX,
                    (rng.random::<f64>() * 2.0 - 1.0) * envs::GOAL_CENTER_MAX,
                )
            };
            for _ in 0..horizon {
                let s = env.state().observation.clone();
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                let a = vec![
                    (4.0 * (tx - s[0]) + 0.25 * nx).clamp(-1.0, 1.0),
                    (4.0 * (ty - s[1]) + 0.25 * ny).clamp(-1.0, 1.0),
                ];
                let r = env
                    .step(&a, true)?
                    .expect("reward-revealing env must return a reward");
                if r == 0.0 {
                    success_steps += 1;
                }
                total_steps += 1;
                transitions.push(Transition {
                    s,
                    a,
                    r,
                    s_next: env.state().observation.clone(),
                    done: env.state().done,
                    source: Source::Offline,
                });
            }
        }
        let mut task_rows = transitions_to_rows(&transitions, BufTag::Rl);
        task_rows.extend(transitions_to_rows(&transitions, BufTag::Enc));
        records.push(TaskRecord {
            task: task.clone(),
            rl_count: transitions.len(),
            enc_count: transitions.len(),
            file: crate::dataset::task_file_name(ti),
        });
        rows.push(task_rows);
    }
    Ok((records, rows, success_steps as f64 / total_steps.max(1) as f64))
}
