//! Task-context machinery: a permutation-invariant product-of-Gaussians
//! posterior over the latent z, its KL to the standard-normal prior, and
//! reparameterized sampling.
//!
//! The encoder maps one (s, a, r) triple to a Gaussian factor (μ, σ) with
//! σ = softplus(raw). A history's posterior is the normalized product of
//! its factors, computed in precision space.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SmacError};
use crate::nn::{mlp_forward_batch, ForwardCache, MlpParams, OutputActivation};

/// Per-factor variance floor applied inside the product; prevents precision
/// blow-up from overconfident factors.
pub const FACTOR_VAR_FLOOR: f64 = 1e-8;

/// Diagonal Gaussian over the task context z.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl LatentPosterior {
    /// Standard normal prior over d_z dimensions.
    pub fn prior(d_z: usize) -> Self {
        LatentPosterior {
            mean: Array1::zeros(d_z),
            std: Array1::ones(d_z),
        }
    }

    pub fn d_z(&self) -> usize {
        self.mean.len()
    }
}

/// One encoder input record: a (state, action, reward) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
}

/// Ordered list of (s, a, r) triples from one task's buffer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub entries: Vec<HistoryEntry>,
}

impl History {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rows of [s ⊕ a ⊕ r] ready for the encoder.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.entries.is_empty() {
            return Err(SmacError::EmptyHistory);
        }
        let cols = self.entries[0].s.len() + self.entries[0].a.len() + 1;
        let mut m = Array2::zeros((self.entries.len(), cols));
        for (i, e) in self.entries.iter().enumerate() {
            if e.s.len() + e.a.len() + 1 != cols {
                return Err(SmacError::ShapeMismatch {
                    context: "history entry",
                    expected: format!("{cols} features"),
                    got: format!("{} features", e.s.len() + e.a.len() + 1),
                });
            }
            let mut k = 0;
            for v in &e.s {
                m[[i, k]] = *v;
                k += 1;
            }
            for v in &e.a {
                m[[i, k]] = *v;
                k += 1;
            }
            m[[i, k]] = e.r;
        }
        Ok(m)
    }

    /// Rewards column of the history.
    pub fn rewards(&self) -> Array1<f64> {
        Array1::from_iter(self.entries.iter().map(|e| e.r))
    }
}

pub fn softplus(x: f64) -> f64 {
    // Stable: ln(1+eˣ) = max(x,0) + ln(1+e^{−|x|}).
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-history-entry Gaussian factors plus everything needed to
/// backpropagate through the encoder.
#[derive(Debug)]
pub struct FactorBatch {
    /// Factor means, n × d_z.
    pub mu: Array2<f64>,
    /// Factor stds after softplus, n × d_z.
    pub sigma: Array2<f64>,
    /// Raw (pre-softplus) std head, n × d_z.
    pub raw_std: Array2<f64>,
    pub cache: ForwardCache,
}

impl FactorBatch {
    pub fn n(&self) -> usize {
        self.mu.nrows()
    }

    pub fn d_z(&self) -> usize {
        self.mu.ncols()
    }
}

/// Runs the encoder over every (s, a, r) triple of `h`.
pub fn encode_factors(encoder: &MlpParams, h: &History) -> Result<FactorBatch> {
    let x = h.to_matrix()?;
    let (out, cache) = mlp_forward_batch(encoder, x.view(), OutputActivation::Identity)?;
    if out.ncols() % 2 != 0 {
        return Err(SmacError::ShapeMismatch {
            context: "encoder output".into(),
            expected: "even width (2·d_z)".into(),
            got: format!("{}", out.ncols()),
        });
    }
    let d_z = out.ncols() / 2;
    let mu = out.slice(ndarray::s![.., ..d_z]).to_owned();
    let raw_std = out.slice(ndarray::s![.., d_z..]).to_owned();
    if mu.iter().chain(raw_std.iter()).any(|v| !v.is_finite()) {
        return Err(SmacError::NonFinite {
            context: "encoder output".into(),
            value: f64::NAN,
        });
    }
    let sigma = raw_std.mapv(softplus);
    Ok(FactorBatch {
        mu,
        sigma,
        raw_std,
        cache,
    })
}

/// Single-triple factor: (μ, σ) with σ = softplus(raw) > 0.
pub fn factor(encoder: &MlpParams, s: &[f64], a: &[f64], r: f64) -> Result<(Array1<f64>, Array1<f64>)> {
    let h = History {
        entries: vec![HistoryEntry {
            s: s.to_vec(),
            a: a.to_vec(),
            r,
        }],
    };
    let fb = encode_factors(encoder, &h)?;
    Ok((
        fb.mu.index_axis(Axis(0), 0).to_owned(),
        fb.sigma.index_axis(Axis(0), 0).to_owned(),
    ))
}

/// Intermediates of the precision-space product, kept for the backward pass.
#[derive(Debug)]
pub struct CombineCache {
    /// Floored factor variances, n × d_z.
    pub var: Array2<f64>,
    /// True where the floor was active (gradient to σ is zero there).
    pub floored: Array2<bool>,
    /// Posterior precision per dimension.
    pub precision: Array1<f64>,
    /// Posterior mean / variance per dimension.
    pub mean: Array1<f64>,
    pub post_var: Array1<f64>,
}

/// Product of diagonal Gaussian factors in precision space:
/// precision_d = Σᵢ 1/σ²ᵢd, mean_d = (Σᵢ μᵢd/σ²ᵢd)/precision_d.
pub fn combine_factors(fb: &FactorBatch) -> (LatentPosterior, CombineCache) {
    let (n, d) = (fb.n(), fb.d_z());
    let mut var = Array2::zeros((n, d));
    let mut floored = Array2::from_elem((n, d), false);
    for i in 0..n {
        for j in 0..d {
            let v = fb.sigma[[i, j]] * fb.sigma[[i, j]];
            if v < FACTOR_VAR_FLOOR {
                var[[i, j]] = FACTOR_VAR_FLOOR;
                floored[[i, j]] = true;
            } else {
                var[[i, j]] = v;
            }
        }
    }
    let mut precision = Array1::zeros(d);
    let mut weighted_mean = Array1::zeros(d);
    for i in 0..n {
        for j in 0..d {
            let p = 1.0 / var[[i, j]];
            precision[j] += p;
            weighted_mean[j] += fb.mu[[i, j]] * p;
        }
    }
    let post_var = precision.mapv(|p| 1.0 / p);
    let mean = &weighted_mean * &post_var;
    let posterior = LatentPosterior {
        mean: mean.clone(),
        std: post_var.mapv(f64::sqrt),
    };
    let cache = CombineCache {
        var,
        floored,
        precision,
        mean,
        post_var,
    };
    (posterior, cache)
}

/// Pulls gradients w.r.t. posterior mean/variance back to the encoder's raw
/// outputs: returns the n × 2·d_z matrix [∂L/∂μ | ∂L/∂raw_std].
pub fn combine_backward(
    fb: &FactorBatch,
    cc: &CombineCache,
    d_mean: &Array1<f64>,
    d_post_var: &Array1<f64>,
) -> Array2<f64> {
    let (n, d) = (fb.n(), fb.d_z());
    let mut d_raw = Array2::zeros((n, 2 * d));
    for j in 0..d {
        let p_total = cc.precision[j];
        let m = cc.mean[j];
        let v_post = cc.post_var[j];
        for i in 0..n {
            let v = cc.var[[i, j]];
            // ∂mean/∂μᵢ = (1/vᵢ)/P
            d_raw[[i, j]] = d_mean[j] / (v * p_total);
            if !cc.floored[[i, j]] {
                // ∂mean/∂vᵢ = (mean − μᵢ)/(vᵢ²·P); ∂var_post/∂vᵢ = (V/vᵢ)².
                let dv = d_mean[j] * (m - fb.mu[[i, j]]) / (v * v * p_total)
                    + d_post_var[j] * (v_post / v) * (v_post / v);
                // v = σ², σ = softplus(raw) ⇒ dv/draw = 2σ·sigmoid(raw).
                let sig = fb.sigma[[i, j]];
                let sigmoid = 1.0 / (1.0 + (-fb.raw_std[[i, j]]).exp());
                d_raw[[i, j + d]] = dv * 2.0 * sig * sigmoid;
            }
        }
    }
    d_raw
}

/// Posterior over z given a nonempty history.
pub fn posterior_from_history(encoder: &MlpParams, h: &History) -> Result<LatentPosterior> {
    let fb = encode_factors(encoder, h)?;
    Ok(combine_factors(&fb).0)
}

/// KL(q ‖ N(0, I)) = Σ_d 0.5·(σ_d² + μ_d² − 1 − ln σ_d²).
pub fn kl_to_prior(q: &LatentPosterior) -> f64 {
    let mut kl = 0.0;
    for d in 0..q.d_z() {
        let v = q.std[d] * q.std[d];
        kl += 0.5 * (v + q.mean[d] * q.mean[d] - 1.0 - v.ln());
    }
    kl
}

/// Gradient of `kl_to_prior` w.r.t. posterior mean and variance.
pub fn kl_to_prior_backward(q: &LatentPosterior) -> (Array1<f64>, Array1<f64>) {
    let d_mean = q.mean.clone();
    let d_var = q.std.mapv(|s| 0.5 * (1.0 - 1.0 / (s * s)));
    (d_mean, d_var)
}

/// z = mean + std ⊙ ε with ε ~ N(0, I); ε is returned so losses can
/// backpropagate through mean and std exactly.
pub fn sample_reparameterized<R: Rng + ?Sized>(
    q: &LatentPosterior,
    rng: &mut R,
) -> (Array1<f64>, Array1<f64>) {
    let noise = Array1::from_iter((0..q.d_z()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let z = &q.mean + &(&q.std * &noise);
    (z, noise)
}

/// Standard-normal draw of length d_z.
pub fn sample_prior<R: Rng + ?Sized>(d_z: usize, rng: &mut R) -> Array1<f64> {
    Array1::from_iter((0..d_z).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Log-density of the diagonal Gaussian q at z.
pub fn log_density(q: &LatentPosterior, z: ArrayView1<f64>) -> f64 {
    let mut lp = 0.0;
    for d in 0..q.d_z() {
        let std = q.std[d];
        let u = (z[d] - q.mean[d]) / std;
        lp += -0.5 * u * u - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    lp
}
