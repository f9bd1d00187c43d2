//! Run configuration: family-specific defaults, JSON config files with
//! dotted-path overrides, exhaustive validation, and the resolved-config
//! snapshot written by every run.

use serde::{Deserialize, Serialize};

use crate::envs::{self, Family};
use crate::error::{Result, SmacError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Smac,
    MetaBc,
    OnlineOracle,
    SacActorAblation,
}

impl BaselineMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smac" => Ok(BaselineMode::Smac),
            "meta_bc" => Ok(BaselineMode::MetaBc),
            "online_oracle" => Ok(BaselineMode::OnlineOracle),
            "sac_actor_ablation" => Ok(BaselineMode::SacActorAblation),
            other => Err(SmacError::InvalidConfig(format!(
                "unknown baseline {other:?} (expected smac, meta_bc, online_oracle, or sac_actor_ablation)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineMode::Smac => "smac",
            BaselineMode::MetaBc => "meta_bc",
            BaselineMode::OnlineOracle => "online_oracle",
            BaselineMode::SacActorAblation => "sac_actor_ablation",
        }
    }
}

/// How the configured soft-target constant 0.005 is fed to the update
/// w̄ ← η·w̄ + (1−η)·w. The conventional reading treats it as the blend rate
/// toward the live network (η = 0.995); the literal reading uses it as η.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetUpdateConvention {
    BlendRate,
    PaperLiteral,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub family: Family,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub horizon: usize,
    pub reward_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworksConfig {
    pub d_z: usize,
    pub policy_hidden: Vec<usize>,
    pub q_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rl_batch: usize,
    pub enc_batch: usize,
    pub meta_batch: usize,
    pub gamma: f64,
    pub soft_target: f64,
    pub target_update_convention: TargetUpdateConvention,
    pub awr_lambda: f64,
    pub lambda_pearl: f64,
    pub alpha: f64,
    pub kl_weight: f64,
    pub entropy_in_target: bool,
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    pub n_offline: u64,
    pub eval_period: u64,
    pub rl_transitions_per_task: usize,
    pub enc_transitions_per_task: usize,
    /// Sparse family: one shared pool backs both buffer roles.
    pub shared_enc_rl: bool,
    /// Dataset generation: training rounds of the early-terminated oracle.
    pub gen_rounds: usize,
    pub gen_grad_steps_per_round: usize,
    /// Dataset generation, sparse family: scripted trajectories per task.
    pub gen_trajectories_per_task: usize,
    /// Probability the scripted sparse policy heads for the true goal.
    pub gen_goal_seek_prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    pub n_online: u64,
    pub grad_steps_per_env_transition: u64,
    pub enc_frozen: bool,
    pub self_sup_on_test_tasks: bool,
    /// Drop relabeled data from the encoder-context pools (the one-environment
    /// exception in the source setup); by default labeled episodes feed both
    /// the RL and the context buffers.
    #[serde(default)]
    pub freeze_enc_buffers: bool,
    pub eval_period: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Adaptation episodes per meta-episode (T).
    pub episodes: usize,
    /// Independent meta-episode repetitions per task.
    pub reps: usize,
    /// Deterministic (tanh μ) actions during evaluation rollouts.
    pub deterministic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub baseline: BaselineMode,
    pub env: EnvConfig,
    pub networks: NetworksConfig,
    pub optim: OptimConfig,
    pub offline: OfflineConfig,
    pub online: OnlineConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale defaults for a family.
    pub fn defaults(family: Family) -> Self {
        let (train_tasks, test_tasks) = match family {
            Family::SparseReach => (12, 6),
            _ => (16, 8),
        };
        let awr_lambda = match family {
            Family::SparseReach => 0.3,
            _ => 100.0,
        };
        let reward_scale = match family {
            Family::SparseReach => 1.0,
            _ => 5.0,
        };
        let lambda_pearl = match family {
            Family::SparseReach => 0.0,
            _ => 1.0,
        };
        RunConfig {
            seed: 0,
            baseline: BaselineMode::Smac,
            env: EnvConfig {
                family,
                train_tasks,
                test_tasks,
                horizon: envs::horizon(family),
                reward_scale,
            },
            networks: NetworksConfig {
                d_z: 5,
                policy_hidden: vec![64, 64],
                q_hidden: vec![64, 64],
                encoder_hidden: vec![64, 64, 64],
                decoder_hidden: vec![64, 64],
            },
            optim: OptimConfig {
                lr: 3e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                rl_batch: 256,
                // Kept below the episode horizon so that a full online
                // trajectory carries more encoder evidence than one training
                // context batch, matching the large-scale setups where
                // contexts are ~1/3 of an episode.
                enc_batch: 24,
                meta_batch: 4,
                gamma: 0.99,
                soft_target: 0.005,
                target_update_convention: TargetUpdateConvention::BlendRate,
                awr_lambda,
                lambda_pearl,
                alpha: 1.0,
                kl_weight: 1.0,
                entropy_in_target: false,
                grad_clip: None,
            },
            offline: OfflineConfig {
                n_offline: 20_000,
                eval_period: 2_000,
                rl_transitions_per_task: 1_200,
                enc_transitions_per_task: 400,
                shared_enc_rl: family == Family::SparseReach,
                gen_rounds: 12,
                gen_grad_steps_per_round: 150,
                gen_trajectories_per_task: 30,
                gen_goal_seek_prob: 0.5,
            },
            online: OnlineConfig {
                n_online: 200,
                grad_steps_per_env_transition: 4,
                enc_frozen: true,
                self_sup_on_test_tasks: false,
                freeze_enc_buffers: false,
                eval_period: 10,
            },
            eval: EvalConfig {
                episodes: 3,
                reps: 2,
                deterministic: true,
            },
        }
    }

    /// Restores the full-scale published hyperparameters (network sizes,
    /// horizons, offline budget) on top of the desk defaults.
    pub fn apply_paper_scale(&mut self) {
        self.networks.policy_hidden = vec![300, 300, 300];
        self.networks.q_hidden = vec![300, 300, 300];
        self.networks.encoder_hidden = vec![200, 200, 200];
        self.networks.decoder_hidden = vec![64, 64];
        self.env.horizon = match self.env.family {
            Family::SparseReach => 50,
            _ => 200,
        };
        self.offline.n_offline = 50_000;
        self.offline.eval_period = 5_000;
    }

    /// η actually passed to the soft update (multiplies the OLD target).
    pub fn soft_update_eta(&self) -> f64 {
        match self.optim.target_update_convention {
            TargetUpdateConvention::BlendRate => 1.0 - self.optim.soft_target,
            TargetUpdateConvention::PaperLiteral => self.optim.soft_target,
        }
    }

    /// Collects every validation problem instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        need(self.env.train_tasks >= 1, "env.train_tasks must be ≥ 1".into());
        need(self.env.test_tasks >= 1, "env.test_tasks must be ≥ 1".into());
        need(self.env.horizon >= 2, "env.horizon must be ≥ 2".into());
        need(
            self.env.reward_scale.is_finite() && self.env.reward_scale > 0.0,
            format!("env.reward_scale must be positive, got {}", self.env.reward_scale),
        );
        need(self.networks.d_z >= 1, "networks.d_z must be ≥ 1".into());
        for (name, h) in [
            ("policy_hidden", &self.networks.policy_hidden),
            ("q_hidden", &self.networks.q_hidden),
            ("encoder_hidden", &self.networks.encoder_hidden),
            ("decoder_hidden", &self.networks.decoder_hidden),
        ] {
            need(
                !h.is_empty() && h.iter().all(|&w| w >= 1),
                format!("networks.{name} must list positive layer widths"),
            );
        }
        need(self.optim.lr > 0.0, format!("optim.lr must be positive, got {}", self.optim.lr));
        need(
            (0.0..1.0).contains(&self.optim.beta1) && (0.0..1.0).contains(&self.optim.beta2),
            "optim.beta1/beta2 must lie in [0, 1)".into(),
        );
        need(self.optim.eps > 0.0, "optim.eps must be positive".into());
        need(self.optim.rl_batch >= 1, "optim.rl_batch must be ≥ 1".into());
        need(self.optim.enc_batch >= 1, "optim.enc_batch must be ≥ 1".into());
        need(self.optim.meta_batch >= 1, "optim.meta_batch must be ≥ 1".into());
        need(
            self.optim.meta_batch <= self.env.train_tasks.max(self.env.test_tasks),
            format!(
                "optim.meta_batch ({}) exceeds the number of tasks",
                self.optim.meta_batch
            ),
        );
        need(
            (0.0..1.0).contains(&self.optim.gamma),
            format!("optim.gamma must lie in [0, 1), got {}", self.optim.gamma),
        );
        need(
            self.optim.soft_target > 0.0 && self.optim.soft_target < 1.0,
            format!("optim.soft_target must lie in (0, 1), got {}", self.optim.soft_target),
        );
        need(
            self.optim.awr_lambda > 0.0,
            format!("optim.awr_lambda must be positive, got {}", self.optim.awr_lambda),
        );
        need(
            self.optim.lambda_pearl >= 0.0,
            format!("optim.lambda_pearl must be nonnegative, got {}", self.optim.lambda_pearl),
        );
        need(self.optim.alpha >= 0.0, "optim.alpha must be nonnegative".into());
        need(self.optim.kl_weight >= 0.0, "optim.kl_weight must be nonnegative".into());
        if let Some(c) = self.optim.grad_clip {
            need(c > 0.0, format!("optim.grad_clip must be positive when set, got {c}"));
        }
        need(self.offline.eval_period >= 1, "offline.eval_period must be ≥ 1".into());
        need(
            self.offline.rl_transitions_per_task >= 1,
            "offline.rl_transitions_per_task must be ≥ 1".into(),
        );
        need(
            self.offline.enc_transitions_per_task >= 1,
            "offline.enc_transitions_per_task must be ≥ 1".into(),
        );
        need(self.offline.gen_rounds >= 1, "offline.gen_rounds must be ≥ 1".into());
        need(
            self.offline.gen_trajectories_per_task >= 1,
            "offline.gen_trajectories_per_task must be ≥ 1".into(),
        );
        need(
            (0.0..=1.0).contains(&self.offline.gen_goal_seek_prob),
            "offline.gen_goal_seek_prob must lie in [0, 1]".into(),
        );
        need(
            self.online.grad_steps_per_env_transition >= 1,
            "online.grad_steps_per_env_transition must be ≥ 1".into(),
        );
        need(self.online.eval_period >= 1, "online.eval_period must be ≥ 1".into());
        need(self.eval.episodes >= 1, "eval.episodes must be ≥ 1".into());
        need(self.eval.reps >= 1, "eval.reps must be ≥ 1".into());
        if errs.is_empty() {
            Ok(())
        } else {
            Err(SmacError::InvalidConfig(errs.join("; ")))
        }
    }
}

/// Applies one `--set path.to.field=value` override to a JSON tree, creating
/// intermediate objects as needed. The value is parsed as JSON when possible
/// and kept as a string otherwise.
pub fn apply_override(tree: &mut serde_json::Value, path: &str, raw_value: &str) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(SmacError::InvalidConfig(format!("bad override path {path:?}")));
    }
    let value: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut cur = tree;
    for part in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            return Err(SmacError::InvalidConfig(format!(
                "override path {path:?} crosses a non-object value"
            )));
        }
        cur = cur
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(parts.last().unwrap().to_string(), value);
            Ok(())
        }
        None => Err(SmacError::InvalidConfig(format!(
            "override path {path:?} crosses a non-object value"
        ))),
    }
}

/// Recursively overlays `patch` onto `base` (objects merge, anything else
/// replaces).
pub fn deep_merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Inputs to configuration resolution, in increasing precedence:
/// defaults(family) < config file < --set overrides < dedicated flags.
#[derive(Debug, Default)]
pub struct ConfigSources {
    pub file_json: Option<String>,
    pub sets: Vec<(String, String)>,
    pub seed_flag: Option<u64>,
    pub env_seed: Option<u64>,
    pub baseline_flag: Option<BaselineMode>,
    pub paper_scale: bool,
}

/// Builds the effective RunConfig for `family` and validates it.
pub fn resolve_config(family: Family, sources: &ConfigSources) -> Result<RunConfig> {
    let mut defaults = RunConfig::defaults(family);
    if sources.paper_scale {
        defaults.apply_paper_scale();
    }
    let mut tree = serde_json::to_value(&defaults)?;
    let mut seed_given = false;
    if let Some(text) = &sources.file_json {
        let patch: serde_json::Value = serde_json::from_str(text)?;
        if !patch.is_object() {
            return Err(SmacError::InvalidConfig(
                "config file must contain a JSON object".into(),
            ));
        }
        if patch.get("seed").is_some() {
            seed_given = true;
        }
        deep_merge(&mut tree, &patch);
    }
    for (path, value) in &sources.sets {
        if path == "seed" {
            seed_given = true;
        }
        apply_override(&mut tree, path, value)?;
    }
    if let Some(seed) = sources.seed_flag {
        tree["seed"] = serde_json::json!(seed);
        seed_given = true;
    }
    if !seed_given {
        if let Some(seed) = sources.env_seed {
            tree["seed"] = serde_json::json!(seed);
        }
    }
    if let Some(b) = sources.baseline_flag {
        tree["baseline"] = serde_json::to_value(b)?;
    }
    let config: RunConfig = serde_json::from_value(tree)
        .map_err(|e| SmacError::InvalidConfig(format!("config does not parse: {e}")))?;
    if config.env.family != family {
        return Err(SmacError::InvalidConfig(format!(
            "config family {} does not match the requested family {}",
            config.env.family.name(),
            family.name()
        )));
    }
    config.validate()?;
    Ok(config)
}
