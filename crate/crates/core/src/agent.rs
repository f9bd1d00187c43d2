//! Networks and losses: contextual tanh-Gaussian policy, twin Q-functions
//! with targets, the critic Bellman loss, the advantage-weighted actor loss,
//! the reparameterized SAC-style actor loss and their weighted combination,
//! the reward encoder/decoder loss, reward generation, and target soft
//! updates.
//!
//! Every loss returns its analytic parameter gradients explicitly; there is
//! no autograd. Finite-difference tests pin each derivation.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SmacError};
use crate::latent::{
    combine_backward, combine_factors, encode_factors, kl_to_prior, kl_to_prior_backward,
    posterior_from_history, sample_reparameterized, History,
};
use crate::nn::{
    mlp_backward_batch, mlp_forward, mlp_forward_batch, Gradient, MlpParams, OutputActivation,
};
use crate::replay::Transition;

/// Keeps tanh log-density finite at |a| → 1.
const TANH_EPS: f64 = 1e-6;
/// Dataset actions are pulled inside (−1, 1) before atanh.
const ATANH_CLAMP: f64 = 1.0 - 1e-6;
/// Advantage weights are clamped to this upper bound.
pub const WEIGHT_CLAMP: f64 = 100.0;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentDims {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub d_z: usize,
}

/// Policy, twin critics with targets, reward encoder/decoder, and counters.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub dims: AgentDims,
    pub policy: MlpParams,
    pub q1: MlpParams,
    pub q2: MlpParams,
    pub q1_target: MlpParams,
    pub q2_target: MlpParams,
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub grad_steps: u64,
    pub env_steps: u64,
}

impl AgentState {
    pub fn new<R: Rng>(
        dims: AgentDims,
        policy_hidden: &[usize],
        q_hidden: &[usize],
        encoder_hidden: &[usize],
        decoder_hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let layers = |inp: usize, hidden: &[usize], out: usize| {
            let mut v = vec![inp];
            v.extend_from_slice(hidden);
            v.push(out);
            v
        };
        let (s_d, a_d, d_z) = (dims.obs_dim, dims.action_dim, dims.d_z);
        let policy = MlpParams::init(&layers(s_d + d_z, policy_hidden, 2 * a_d), rng);
        let q1 = MlpParams::init(&layers(s_d + a_d + d_z, q_hidden, 1), rng);
        let q2 = MlpParams::init(&layers(s_d + a_d + d_z, q_hidden, 1), rng);
        let encoder = MlpParams::init(&layers(s_d + a_d + 1, encoder_hidden, 2 * d_z), rng);
        let decoder = MlpParams::init(&layers(s_d + a_d + d_z, decoder_hidden, 1), rng);
        AgentState {
            dims,
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            encoder,
            decoder,
            grad_steps: 0,
            env_steps: 0,
        }
    }
}

/// RL batch as dense matrices.
#[derive(Debug, Clone)]
pub struct BatchMatrices {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub s_next: Array2<f64>,
    pub done: Array1<f64>,
}

impl BatchMatrices {
    pub fn from_transitions(batch: &[Transition], dims: &AgentDims) -> Result<Self> {
        if batch.is_empty() {
            return Err(SmacError::BufferUnderflow {
                context: "batch matrices",
                need: 1,
                have: 0,
            });
        }
        let n = batch.len();
        let mut m = BatchMatrices {
            s: Array2::zeros((n, dims.obs_dim)),
            a: Array2::zeros((n, dims.action_dim)),
            r: Array1::zeros(n),
            s_next: Array2::zeros((n, dims.obs_dim)),
            done: Array1::zeros(n),
        };
        for (i, t) in batch.iter().enumerate() {
            if t.s.len() != dims.obs_dim || t.a.len() != dims.action_dim {
                return Err(SmacError::ShapeMismatch {
                    context: "transition in batch",
                    expected: format!("obs {} act {}", dims.obs_dim, dims.action_dim),
                    got: format!("obs {} act {}", t.s.len(), t.a.len()),
                });
            }
            m.s.row_mut(i).assign(&Array1::from_vec(t.s.clone()));
            m.a.row_mut(i).assign(&Array1::from_vec(t.a.clone()));
            m.s_next.row_mut(i).assign(&Array1::from_vec(t.s_next.clone()));
            m.r[i] = t.r;
            m.done[i] = if t.done { 1.0 } else { 0.0 };
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }
}

/// Rows [x_i ⊕ z] with one shared z.
fn concat_rows_z(x: &Array2<f64>, z: &Array1<f64>) -> Array2<f64> {
    let (n, w) = x.dim();
    let d = z.len();
    let mut out = Array2::zeros((n, w + d));
    out.slice_mut(s![.., ..w]).assign(x);
    for i in 0..n {
        out.slice_mut(s![i, w..]).assign(z);
    }
    out
}

/// Rows [s_i ⊕ a_i ⊕ z] with one shared z.
fn concat_saz(s_m: &Array2<f64>, a_m: &Array2<f64>, z: &Array1<f64>) -> Array2<f64> {
    let (n, sw) = s_m.dim();
    let aw = a_m.ncols();
    let d = z.len();
    let mut out = Array2::zeros((n, sw + aw + d));
    out.slice_mut(s![.., ..sw]).assign(s_m);
    out.slice_mut(s![.., sw..sw + aw]).assign(a_m);
    for i in 0..n {
        out.slice_mut(s![i, sw + aw..]).assign(z);
    }
    out
}

/// Gaussian head of the policy at rows [s ⊕ z]: μ, σ = softplus(raw), raw,
/// and the forward cache for backprop.
struct PolicyHead {
    mu: Array2<f64>,
    sigma: Array2<f64>,
    raw: Array2<f64>,
    cache: crate::nn::ForwardCache,
}

fn policy_head(policy: &MlpParams, input: &Array2<f64>) -> Result<PolicyHead> {
    let (out, cache) = mlp_forward_batch(policy, input.view(), OutputActivation::Identity)?;
    let a_d = out.ncols() / 2;
    let mu = out.slice(s![.., ..a_d]).to_owned();
    let raw = out.slice(s![.., a_d..]).to_owned();
    if mu.iter().chain(raw.iter()).any(|v| !v.is_finite()) {
        return Err(SmacError::NonFinite {
            context: "policy output".into(),
            value: f64::NAN,
        });
    }
    let sigma = raw.mapv(crate::latent::softplus);
    Ok(PolicyHead {
        mu,
        sigma,
        raw,
        cache,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Samples one action from the tanh-Gaussian policy; returns the action and
/// its log-density (including the tanh Jacobian correction).
pub fn policy_sample<R: Rng + ?Sized>(
    agent: &AgentState,
    obs: &[f64],
    z: &Array1<f64>,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    let s_m = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row vector");
    let input = concat_rows_z(&s_m, z);
    let head = policy_head(&agent.policy, &input)?;
    let a_d = agent.dims.action_dim;
    let mut action = Vec::with_capacity(a_d);
    let mut log_prob = 0.0;
    for j in 0..a_d {
        let eps: f64 = rng.sample(StandardNormal);
        let sigma = head.sigma[[0, j]];
        let u = head.mu[[0, j]] + sigma * eps;
        let a = u.tanh();
        log_prob += -0.5 * eps * eps - sigma.ln() - 0.5 * LN_2PI - (1.0 - a * a + TANH_EPS).ln();
        action.push(a);
    }
    Ok((action, log_prob))
}

/// Deterministic evaluation action tanh(μ(s, z)).
pub fn policy_mean_action(agent: &AgentState, obs: &[f64], z: &Array1<f64>) -> Result<Vec<f64>> {
    let s_m = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row vector");
    let input = concat_rows_z(&s_m, z);
    let head = policy_head(&agent.policy, &input)?;
    Ok((0..agent.dims.action_dim).map(|j| head.mu[[0, j]].tanh()).collect())
}

/// Scalar critic forward over rows [s ⊕ a ⊕ z].
fn critic_forward(q: &MlpParams, input: &Array2<f64>) -> Result<(Array1<f64>, crate::nn::ForwardCache)> {
    let (out, cache) = mlp_forward_batch(q, input.view(), OutputActivation::Identity)?;
    Ok((out.index_axis(Axis(1), 0).to_owned(), cache))
}

/// Output of `critic_loss`: loss, live-critic gradients, and the per-row
/// quantities useful for tests and diagnostics.
#[derive(Debug)]
pub struct CriticOut {
    pub loss: f64,
    pub grad_q1: Gradient,
    pub grad_q2: Gradient,
    pub q1: Array1<f64>,
    pub q2: Array1<f64>,
    pub targets: Array1<f64>,
}

/// Bellman loss for both live critics against the min of the target critics:
/// y = r + γ·(1−done)·min(Q̄₁, Q̄₂)(s', a', z), a' ~ π(·|s', z);
/// loss = mean (Q₁−y)² + mean (Q₂−y)². The target never receives gradients;
/// z is treated as a constant.
///
/// `entropy_coeff` optionally adds the SAC entropy term
/// −α·log π(a'|s',z) inside the target.
pub fn critic_loss<R: Rng + ?Sized>(
    agent: &AgentState,
    batch: &BatchMatrices,
    z: &Array1<f64>,
    gamma: f64,
    entropy_coeff: Option<f64>,
    rng: &mut R,
) -> Result<CriticOut> {
    let n = batch.n();
    let a_d = agent.dims.action_dim;

    // Next action from the current policy (reparameterized draw, constant
    // for this loss).
    let next_input = concat_rows_z(&batch.s_next, z);
    let head = policy_head(&agent.policy, &next_input)?;
    let mut a_next = Array2::zeros((n, a_d));
    let mut log_prob_next = Array1::<f64>::zeros(n);
    for i in 0..n {
        for j in 0..a_d {
            let eps: f64 = rng.sample(StandardNormal);
            let sigma = head.sigma[[i, j]];
            let u = head.mu[[i, j]] + sigma * eps;
            let a = u.tanh();
            a_next[[i, j]] = a;
            log_prob_next[i] +=
                -0.5 * eps * eps - sigma.ln() - 0.5 * LN_2PI - (1.0 - a * a + TANH_EPS).ln();
        }
    }

    let target_input = concat_saz(&batch.s_next, &a_next, z);
    let (t1, _) = critic_forward(&agent.q1_target, &target_input)?;
    let (t2, _) = critic_forward(&agent.q2_target, &target_input)?;
    let mut targets = Array1::zeros(n);
    for i in 0..n {
        let mut v = t1[i].min(t2[i]);
        if let Some(alpha) = entropy_coeff {
            v -= alpha * log_prob_next[i];
        }
        targets[i] = batch.r[i] + gamma * (1.0 - batch.done[i]) * v;
    }

    let live_input = concat_saz(&batch.s, &batch.a, z);
    let (q1, c1) = critic_forward(&agent.q1, &live_input)?;
    let (q2, c2) = critic_forward(&agent.q2, &live_input)?;

    let mut loss = 0.0;
    let mut d1 = Array2::zeros((n, 1));
    let mut d2 = Array2::zeros((n, 1));
    for i in 0..n {
        let e1 = q1[i] - targets[i];
        let e2 = q2[i] - targets[i];
        loss += (e1 * e1 + e2 * e2) / n as f64;
        d1[[i, 0]] = 2.0 * e1 / n as f64;
        d2[[i, 0]] = 2.0 * e2 / n as f64;
    }
    let (grad_q1, _) = mlp_backward_batch(&agent.q1, &c1, d1.view())?;
    let (grad_q2, _) = mlp_backward_batch(&agent.q2, &c2, d2.view())?;
    Ok(CriticOut {
        loss,
        grad_q1,
        grad_q2,
        q1,
        q2,
        targets,
    })
}

/// How the actor loss weights dataset actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActorWeightMode {
    /// Exponentiated advantage, detached and clamped.
    Advantage,
    /// All weights forced to 1 (meta behavior cloning).
    ForceOne,
}

#[derive(Debug)]
pub struct ActorOut {
    pub loss: f64,
    pub grad_policy: Gradient,
    pub weights: Array1<f64>,
}

/// Log-density of given (pre-recorded) actions under the tanh-Gaussian
/// policy head, plus its gradients w.r.t. μ and raw std of each row.
///
/// Actions are clamped inside (−1, 1) before atanh; the tanh Jacobian term
/// −ln(1−a²+ε) is a constant w.r.t. the policy parameters.
struct DatasetLogProb {
    log_prob: Array1<f64>,
    d_mu: Array2<f64>,
    d_raw: Array2<f64>,
}

fn dataset_log_prob(head: &PolicyHead, actions: &Array2<f64>) -> DatasetLogProb {
    let (n, a_d) = actions.dim();
    let mut log_prob = Array1::zeros(n);
    let mut d_mu = Array2::zeros((n, a_d));
    let mut d_raw = Array2::zeros((n, a_d));
    for i in 0..n {
        for j in 0..a_d {
            let a = actions[[i, j]].clamp(-ATANH_CLAMP, ATANH_CLAMP);
            let u = a.atanh();
            let mu = head.mu[[i, j]];
            let sigma = head.sigma[[i, j]];
            let t = (u - mu) / sigma;
            log_prob[i] +=
                -0.5 * t * t - sigma.ln() - 0.5 * LN_2PI - (1.0 - a * a + TANH_EPS).ln();
            // ∂lp/∂μ = (u−μ)/σ²; ∂lp/∂σ = (u−μ)²/σ³ − 1/σ; σ = softplus(raw).
            d_mu[[i, j]] = t / sigma;
            d_raw[[i, j]] = (t * t / sigma - 1.0 / sigma) * sigmoid(head.raw[[i, j]]);
        }
    }
    DatasetLogProb {
        log_prob,
        d_mu,
        d_raw,
    }
}

/// Advantage-weighted actor loss
/// −mean wᵢ·log π(aᵢ|sᵢ,z), w = min(exp((Q−V̂)/λ), clamp), V̂ = single-sample
/// min-critic value at ã ~ π(·|s,z). Weights are detached from the gradient.
///
/// `frozen_weights` lets callers (gradient checks) re-evaluate the loss with
/// the weights pinned; the rng draw for ã is still consumed so the stream
/// stays aligned with the unfrozen call.
pub fn awac_actor_loss<R: Rng + ?Sized>(
    agent: &AgentState,
    batch: &BatchMatrices,
    z: &Array1<f64>,
    lambda_awr: f64,
    mode: ActorWeightMode,
    frozen_weights: Option<&Array1<f64>>,
    rng: &mut R,
) -> Result<ActorOut> {
    if lambda_awr <= 0.0 {
        return Err(SmacError::InvalidConfig(format!(
            "lambda_awr must be positive, got {lambda_awr}"
        )));
    }
    let n = batch.n();
    let a_d = agent.dims.action_dim;
    let input = concat_rows_z(&batch.s, z);
    let head = policy_head(&agent.policy, &input)?;

    // ã ~ π for the single-sample value estimate; drawn unconditionally so
    // frozen and unfrozen evaluations consume identical randomness.
    let mut a_tilde = Array2::zeros((n, a_d));
    for i in 0..n {
        for j in 0..a_d {
            let eps: f64 = rng.sample(StandardNormal);
            a_tilde[[i, j]] = (head.mu[[i, j]] + head.sigma[[i, j]] * eps).tanh();
        }
    }

    let weights = if let Some(w) = frozen_weights {
        w.clone()
    } else {
        match mode {
            ActorWeightMode::ForceOne => Array1::ones(n),
            ActorWeightMode::Advantage => {
                let live_input = concat_saz(&batch.s, &batch.a, z);
                let (q1, _) = critic_forward(&agent.q1, &live_input)?;
                let (q2, _) = critic_forward(&agent.q2, &live_input)?;
                let tilde_input = concat_saz(&batch.s, &a_tilde, z);
                let (v1, _) = critic_forward(&agent.q1, &tilde_input)?;
                let (v2, _) = critic_forward(&agent.q2, &tilde_input)?;
                Array1::from_iter((0..n).map(|i| {
                    let adv = q1[i].min(q2[i]) - v1[i].min(v2[i]);
                    // Floor keeps weights strictly positive under exp underflow.
                    (adv / lambda_awr).exp().min(WEIGHT_CLAMP).max(f64::MIN_POSITIVE)
                }))
            }
        }
    };

    let lp = dataset_log_prob(&head, &batch.a);
    let mut loss = 0.0;
    let mut d_head = Array2::zeros((n, 2 * a_d));
    for i in 0..n {
        loss -= weights[i] * lp.log_prob[i] / n as f64;
        for j in 0..a_d {
            d_head[[i, j]] = -weights[i] * lp.d_mu[[i, j]] / n as f64;
            d_head[[i, j + a_d]] = -weights[i] * lp.d_raw[[i, j]] / n as f64;
        }
    }
    let (grad_policy, _) = mlp_backward_batch(&agent.policy, &head.cache, d_head.view())?;
    Ok(ActorOut {
        loss,
        grad_policy,
        weights,
    })
}

/// Reparameterized SAC-style actor loss
/// mean(α·log π(ã|s,z) − min(Q₁,Q₂)(s,ã,z)), ã = tanh(μ + σ·ε).
/// Gradients flow through ã into the policy; critics are fixed inputs.
pub fn pearl_actor_loss<R: Rng + ?Sized>(
    agent: &AgentState,
    batch: &BatchMatrices,
    z: &Array1<f64>,
    alpha: f64,
    rng: &mut R,
) -> Result<(f64, Gradient)> {
    if alpha < 0.0 {
        return Err(SmacError::InvalidConfig(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    let n = batch.n();
    let a_d = agent.dims.action_dim;
    let input = concat_rows_z(&batch.s, z);
    let head = policy_head(&agent.policy, &input)?;

    let mut eps_m = Array2::zeros((n, a_d));
    let mut a_tilde = Array2::zeros((n, a_d));
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..a_d {
            let eps: f64 = rng.sample(StandardNormal);
            let sigma = head.sigma[[i, j]];
            let a = (head.mu[[i, j]] + sigma * eps).tanh();
            eps_m[[i, j]] = eps;
            a_tilde[[i, j]] = a;
            loss += alpha
                * (-0.5 * eps * eps - sigma.ln() - 0.5 * LN_2PI - (1.0 - a * a + TANH_EPS).ln())
                / n as f64;
        }
    }

    let q_input = concat_saz(&batch.s, &a_tilde, z);
    let (q1, c1) = critic_forward(&agent.q1, &q_input)?;
    let (q2, c2) = critic_forward(&agent.q2, &q_input)?;
    let mut d1 = Array2::zeros((n, 1));
    let mut d2 = Array2::zeros((n, 1));
    for i in 0..n {
        loss -= q1[i].min(q2[i]) / n as f64;
        // ∂loss/∂(minQ row) = −1/n routed to the smaller critic.
        if q1[i] <= q2[i] {
            d1[[i, 0]] = -1.0 / n as f64;
        } else {
            d2[[i, 0]] = -1.0 / n as f64;
        }
    }
    // Input gradients of the critics carry ∂loss/∂ã.
    let (_, dx1) = mlp_backward_batch(&agent.q1, &c1, d1.view())?;
    let (_, dx2) = mlp_backward_batch(&agent.q2, &c2, d2.view())?;
    let s_d = agent.dims.obs_dim;
    let mut d_head = Array2::zeros((n, 2 * a_d));
    for i in 0..n {
        for j in 0..a_d {
            let a = a_tilde[[i, j]];
            let dtanh = 1.0 - a * a;
            // α's tanh-Jacobian term −ln(1−ã²+ε) differentiated through ã,
            // plus the critic path.
            let d_a = alpha * 2.0 * a / ((1.0 - a * a + TANH_EPS) * n as f64)
                + dx1[[i, s_d + j]]
                + dx2[[i, s_d + j]];
            let d_u = d_a * dtanh;
            let sigma = head.sigma[[i, j]];
            // Explicit −ln σ term of the entropy part.
            let d_sigma = d_u * eps_m[[i, j]] - alpha / (sigma * n as f64);
            d_head[[i, j]] = d_u;
            d_head[[i, j + a_d]] = d_sigma * sigmoid(head.raw[[i, j]]);
        }
    }
    let (grad_policy, _) = mlp_backward_batch(&agent.policy, &head.cache, d_head.view())?;
    Ok((loss, grad_policy))
}

/// L_awac + λ_pearl·L_pearl with a single combined policy gradient.
/// λ_pearl = 0 short-circuits to the AWAC loss bitwise.
#[allow(clippy::too_many_arguments)]
pub fn self_supervised_actor_loss<R: Rng + ?Sized>(
    agent: &AgentState,
    batch: &BatchMatrices,
    z: &Array1<f64>,
    lambda_awr: f64,
    lambda_pearl: f64,
    alpha: f64,
    mode: ActorWeightMode,
    frozen_weights: Option<&Array1<f64>>,
    rng: &mut R,
) -> Result<ActorOut> {
    if lambda_pearl < 0.0 {
        return Err(SmacError::InvalidConfig(format!(
            "lambda_pearl must be nonnegative, got {lambda_pearl}"
        )));
    }
    let mut out = awac_actor_loss(agent, batch, z, lambda_awr, mode, frozen_weights, rng)?;
    if lambda_pearl == 0.0 {
        return Ok(out);
    }
    let (pearl, grad_pearl) = pearl_actor_loss(agent, batch, z, alpha, rng)?;
    out.loss += lambda_pearl * pearl;
    out.grad_policy.add_scaled(&grad_pearl, lambda_pearl);
    Ok(out)
}

#[derive(Debug)]
pub struct RewardOut {
    pub loss: f64,
    pub mse: f64,
    pub kl: f64,
    pub grad_encoder: Gradient,
    pub grad_decoder: Gradient,
    pub z: Array1<f64>,
}

/// Reward reconstruction + KL loss:
/// z ~ q_φ(z|h) (reparameterized), loss = mean_h (r − r_φ(s,a,z))² +
/// kl_weight·KL(q_φ(z|h) ‖ N(0,I)). Gradients reach the decoder directly and
/// the encoder through both the sample and the KL term.
pub fn reward_loss<R: Rng + ?Sized>(
    agent: &AgentState,
    h: &History,
    kl_weight: f64,
    rng: &mut R,
) -> Result<RewardOut> {
    let fb = encode_factors(&agent.encoder, h)?;
    let (posterior, cc) = combine_factors(&fb);
    let (z, noise) = sample_reparameterized(&posterior, rng);
    let n = h.len();

    let s_mat = history_states(h, agent.dims.obs_dim)?;
    let a_mat = history_actions(h, agent.dims.action_dim)?;
    let dec_input = concat_saz(&s_mat, &a_mat, &z);
    let (r_hat, dec_cache) = critic_forward(&agent.decoder, &dec_input)?;
    let rewards = h.rewards();

    let mut mse = 0.0;
    let mut d_out = Array2::zeros((n, 1));
    for i in 0..n {
        let e = r_hat[i] - rewards[i];
        mse += e * e / n as f64;
        d_out[[i, 0]] = 2.0 * e / n as f64;
    }
    let kl = kl_to_prior(&posterior);
    let loss = mse + kl_weight * kl;

    let (grad_decoder, dx) = mlp_backward_batch(&agent.decoder, &dec_cache, d_out.view())?;
    // ∂loss/∂z accumulated over rows (z is shared).
    let sa_w = agent.dims.obs_dim + agent.dims.action_dim;
    let g_z = dx.slice(s![.., sa_w..]).sum_axis(Axis(0));

    // Through z = mean + √var·ε and the KL term back to mean/var.
    let (kl_d_mean, kl_d_var) = kl_to_prior_backward(&posterior);
    let mut d_mean = g_z.clone();
    d_mean.scaled_add(kl_weight, &kl_d_mean);
    let mut d_var = Array1::zeros(posterior.d_z());
    for d in 0..posterior.d_z() {
        d_var[d] = g_z[d] * noise[d] / (2.0 * posterior.std[d]) + kl_weight * kl_d_var[d];
    }

    let d_raw = combine_backward(&fb, &cc, &d_mean, &d_var);
    let (grad_encoder, _) = mlp_backward_batch(&agent.encoder, &fb.cache, d_raw.view())?;
    Ok(RewardOut {
        loss,
        mse,
        kl,
        grad_encoder,
        grad_decoder,
        z,
    })
}

fn history_states(h: &History, obs_dim: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((h.len(), obs_dim));
    for (i, e) in h.entries.iter().enumerate() {
        if e.s.len() != obs_dim {
            return Err(SmacError::ShapeMismatch {
                context: "history state",
                expected: format!("{obs_dim}"),
                got: format!("{}", e.s.len()),
            });
        }
        m.row_mut(i).assign(&Array1::from_vec(e.s.clone()));
    }
    Ok(m)
}

fn history_actions(h: &History, action_dim: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((h.len(), action_dim));
    for (i, e) in h.entries.iter().enumerate() {
        if e.a.len() != action_dim {
            return Err(SmacError::ShapeMismatch {
                context: "history action",
                expected: format!("{action_dim}"),
                got: format!("{}", e.a.len()),
            });
        }
        m.row_mut(i).assign(&Array1::from_vec(e.a.clone()));
    }
    Ok(m)
}

/// Synthetic reward label r_φ(s, a, z) with z ~ q_φ(z|h); no updates.
pub fn generate_reward<R: Rng + ?Sized>(
    agent: &AgentState,
    s_obs: &[f64],
    a: &[f64],
    h: &History,
    rng: &mut R,
) -> Result<f64> {
    let posterior = posterior_from_history(&agent.encoder, h)?;
    let (z, _) = sample_reparameterized(&posterior, rng);
    let mut input = Vec::with_capacity(s_obs.len() + a.len() + z.len());
    input.extend_from_slice(s_obs);
    input.extend_from_slice(a);
    input.extend(z.iter());
    let (out, _) = mlp_forward(
        &agent.decoder,
        ndarray::ArrayView1::from(&input[..]),
        OutputActivation::Identity,
    )?;
    Ok(out[0])
}

/// Target update w̄ ← η·w̄ + (1−η)·w (η multiplies the old target).
pub fn soft_update_targets(agent: &mut AgentState, eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(SmacError::InvalidConfig(format!(
            "soft update eta must lie strictly between 0 and 1, got {eta}"
        )));
    }
    let blend = |target: &mut MlpParams, live: &MlpParams| {
        for l in 0..target.weights.len() {
            target.weights[l].zip_mut_with(&live.weights[l], |t, w| *t = eta * *t + (1.0 - eta) * w);
            target.biases[l].zip_mut_with(&live.biases[l], |t, w| *t = eta * *t + (1.0 - eta) * w);
        }
    };
    blend(&mut agent.q1_target, &agent.q1);
    blend(&mut agent.q2_target, &agent.q2);
    Ok(())
}

/// Per-step loss values, for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub critic: f64,
    pub actor: f64,
    pub reward_mse: f64,
    pub kl: f64,
}
