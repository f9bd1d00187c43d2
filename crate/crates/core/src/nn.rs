//! Minimal differentiable MLP stack: forward with activation cache, exact
//! analytic backward, Adam with bias correction, deterministic init.
//!
//! Hidden activation is ReLU everywhere; the output layer is identity or
//! tanh. All arithmetic is f64 so gradient checks can use tight tolerances
//! and runs reproduce bitwise across platforms.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SmacError};

/// Activation applied to the final affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Adam hyperparameters. Defaults follow the usual (3e-4, 0.9, 0.999, 1e-8).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One feed-forward network: weights, biases, and Adam moment state.
///
/// `weights[i]` has shape (layer_sizes[i+1], layer_sizes[i]); `biases[i]`
/// has shape (layer_sizes[i+1],).
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub adam_m_w: Vec<Array2<f64>>,
    pub adam_v_w: Vec<Array2<f64>>,
    pub adam_m_b: Vec<Array1<f64>>,
    pub adam_v_b: Vec<Array1<f64>>,
    pub adam_t: u64,
}

/// Parameter gradients, shape-congruent with the owning MlpParams.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub d_weights: Vec<Array2<f64>>,
    pub d_biases: Vec<Array1<f64>>,
}

/// Activations saved by a forward pass, sufficient for an exact backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each affine layer, `inputs[0]` being the network input.
    inputs: Vec<Array2<f64>>,
    /// Post-activation network output.
    output: Array2<f64>,
    out_act: OutputActivation,
}

impl MlpParams {
    /// Zero-initialized network (used for tests and as a gradient template).
    pub fn zeros(layer_sizes: &[usize]) -> Self {
        assert!(
            layer_sizes.len() >= 2,
            "an MLP needs at least input and output sizes, got {layer_sizes:?}"
        );
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            weights.push(Array2::zeros((w[1], w[0])));
            biases.push(Array1::zeros(w[1]));
        }
        let adam_m_w = weights.clone();
        let adam_v_w = weights.clone();
        let adam_m_b = biases.clone();
        let adam_v_b = biases.clone();
        MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            adam_m_w,
            adam_v_w,
            adam_m_b,
            adam_v_b,
            adam_t: 0,
        }
    }

    /// Deterministic init: weights and biases uniform in
    /// [−1/√fan_in, +1/√fan_in] per layer, drawn row-major from `rng`.
    pub fn init(layer_sizes: &[usize], rng: &mut dyn RngCore) -> Self {
        let mut p = MlpParams::zeros(layer_sizes);
        let uniform = |bound: f64, rng: &mut dyn RngCore| {
            // u64 → [0,1) with 53-bit resolution, then map to [−bound, bound).
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            (2.0 * u - 1.0) * bound
        };
        for i in 0..p.weights.len() {
            let fan_in = layer_sizes[i] as f64;
            let bound = 1.0 / fan_in.sqrt();
            for v in p.weights[i].iter_mut() {
                *v = uniform(bound, rng);
            }
            for v in p.biases[i].iter_mut() {
                *v = uniform(bound, rng);
            }
        }
        p
    }

    pub fn in_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    /// FNV-1a hash over the exact bit patterns of weights, biases, Adam
    /// moments and step counter; equal fingerprints ⇔ bitwise-equal state
    /// up to hash collision, used for freeze assertions.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let eat = |bits: u64, h: &mut u64| {
            for b in bits.to_le_bytes() {
                *h ^= b as u64;
                *h = h.wrapping_mul(0x100000001b3);
            }
        };
        for i in 0..self.weights.len() {
            for v in self.weights[i].iter() {
                eat(v.to_bits(), &mut h);
            }
            for v in self.biases[i].iter() {
                eat(v.to_bits(), &mut h);
            }
            for v in self.adam_m_w[i].iter() {
                eat(v.to_bits(), &mut h);
            }
            for v in self.adam_v_w[i].iter() {
                eat(v.to_bits(), &mut h);
            }
            for v in self.adam_m_b[i].iter() {
                eat(v.to_bits(), &mut h);
            }
            for v in self.adam_v_b[i].iter() {
                eat(v.to_bits(), &mut h);
            }
        }
        eat(self.adam_t, &mut h);
        h
    }

    /// Weights and biases flattened row-major, layer by layer (weights then
    /// bias per layer). Adam moments excluded.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for i in 0..self.weights.len() {
            out.extend(self.weights[i].iter());
            out.extend(self.biases[i].iter());
        }
        out
    }

    /// Inverse of `param_vector`.
    pub fn set_param_vector(&mut self, flat: &[f64]) {
        assert_eq!(
            flat.len(),
            self.param_count(),
            "flat parameter vector length mismatch"
        );
        let mut k = 0;
        for i in 0..self.weights.len() {
            for v in self.weights[i].iter_mut() {
                *v = flat[k];
                k += 1;
            }
            for v in self.biases[i].iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl Gradient {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Gradient {
            d_weights: p.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            d_biases: p.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    /// self += scale · other
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.d_weights.iter_mut() {
            a.mapv_inplace(|v| v * s);
        }
        for a in self.d_biases.iter_mut() {
            a.mapv_inplace(|v| v * s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for w in &self.d_weights {
            for v in w.iter() {
                m = m.max(v.abs());
            }
        }
        for b in &self.d_biases {
            for v in b.iter() {
                m = m.max(v.abs());
            }
        }
        m
    }

    pub fn all_finite(&self) -> bool {
        self.d_weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.d_biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Same flattening order as `MlpParams::param_vector`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.d_weights.len() {
            out.extend(self.d_weights[i].iter());
            out.extend(self.d_biases[i].iter());
        }
        out
    }
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }
}

/// Batched forward pass over rows of `x` (shape n × in_dim).
pub fn mlp_forward_batch(
    p: &MlpParams,
    x: ArrayView2<f64>,
    out_act: OutputActivation,
) -> Result<(Array2<f64>, ForwardCache)> {
    if x.ncols() != p.in_dim() {
        return Err(SmacError::ShapeMismatch {
            context: "mlp_forward input",
            expected: format!("n x {}", p.in_dim()),
            got: format!("{} x {}", x.nrows(), x.ncols()),
        });
    }
    let n_layers = p.n_layers();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut cur = x.to_owned();
    for (i, (w, b)) in p.weights.iter().zip(&p.biases).enumerate() {
        inputs.push(cur.clone());
        let mut u = cur.dot(&w.t());
        u += &b.view().insert_axis(Axis(0));
        if i + 1 < n_layers {
            u.mapv_inplace(|v| v.max(0.0));
        } else {
            match out_act {
                OutputActivation::Identity => {}
                OutputActivation::Tanh => u.mapv_inplace(f64::tanh),
            }
        }
        cur = u;
    }
    let cache = ForwardCache {
        inputs,
        output: cur.clone(),
        out_act,
    };
    Ok((cur, cache))
}

/// Single-input forward pass.
pub fn mlp_forward(
    p: &MlpParams,
    x: ArrayView1<f64>,
    out_act: OutputActivation,
) -> Result<(Array1<f64>, ForwardCache)> {
    let x2 = x.insert_axis(Axis(0));
    let (y, cache) = mlp_forward_batch(p, x2, out_act)?;
    Ok((y.index_axis(Axis(0), 0).to_owned(), cache))
}

/// Batched backward pass. `d_out` is ∂L/∂output (same shape as the cached
/// output); returns parameter gradients and ∂L/∂input.
pub fn mlp_backward_batch(
    p: &MlpParams,
    cache: &ForwardCache,
    d_out: ArrayView2<f64>,
) -> Result<(Gradient, Array2<f64>)> {
    if d_out.dim() != cache.output.dim() {
        return Err(SmacError::ShapeMismatch {
            context: "mlp_backward output grad",
            expected: format!("{:?}", cache.output.dim()),
            got: format!("{:?}", d_out.dim()),
        });
    }
    assert_eq!(
        cache.inputs.len(),
        p.n_layers(),
        "forward cache does not match network depth"
    );
    let n_layers = p.n_layers();
    let mut grad = Gradient::zeros_like(p);
    // ∂L/∂(affine output of the last layer)
    let mut du = match cache.out_act {
        OutputActivation::Identity => d_out.to_owned(),
        OutputActivation::Tanh => {
            let mut g = d_out.to_owned();
            g.zip_mut_with(&cache.output, |gv, y| *gv *= 1.0 - y * y);
            g
        }
    };
    for l in (0..n_layers).rev() {
        grad.d_weights[l] = du.t().dot(&cache.inputs[l]);
        grad.d_biases[l] = du.sum_axis(Axis(0));
        let dx = du.dot(&p.weights[l]);
        if l > 0 {
            // ReLU output of layer l−1 is the cached input of layer l.
            du = dx;
            du.zip_mut_with(&cache.inputs[l], |g, h| {
                if *h <= 0.0 {
                    *g = 0.0;
                }
            });
        } else {
            return Ok((grad, dx));
        }
    }
    unreachable!("loop always returns at l == 0");
}

/// Single-input backward pass.
pub fn mlp_backward(
    p: &MlpParams,
    cache: &ForwardCache,
    d_out: ArrayView1<f64>,
) -> Result<(Gradient, Array1<f64>)> {
    let d2 = d_out.insert_axis(Axis(0));
    let (g, dx) = mlp_backward_batch(p, cache, d2)?;
    Ok((g, dx.index_axis(Axis(0), 0).to_owned()))
}

/// Standard Adam update with bias correction; increments `adam_t`.
pub fn adam_step(p: &mut MlpParams, grad: &Gradient, h: &AdamHyper) -> Result<()> {
    if !(h.lr > 0.0 && h.eps > 0.0) || !(0.0..1.0).contains(&h.beta1) || !(0.0..1.0).contains(&h.beta2) {
        return Err(SmacError::InvalidConfig(format!(
            "adam hyperparameters out of range: lr={} beta1={} beta2={} eps={}",
            h.lr, h.beta1, h.beta2, h.eps
        )));
    }
    if !grad.all_finite() {
        return Err(SmacError::NonFinite {
            context: "adam_step gradient".into(),
            value: f64::NAN,
        });
    }
    p.adam_t += 1;
    let t = p.adam_t as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for l in 0..p.weights.len() {
        // Matrix products can come back in column-major order; normalize so
        // the flat update walks both tensors in the same element order.
        let dw = grad.d_weights[l].as_standard_layout();
        update_tensor(
            p.weights[l].as_slice_mut().unwrap(),
            dw.as_slice().unwrap(),
            p.adam_m_w[l].as_slice_mut().unwrap(),
            p.adam_v_w[l].as_slice_mut().unwrap(),
            h,
            bc1,
            bc2,
        );
        let db = grad.d_biases[l].as_standard_layout();
        update_tensor(
            p.biases[l].as_slice_mut().unwrap(),
            db.as_slice().unwrap(),
            p.adam_m_b[l].as_slice_mut().unwrap(),
            p.adam_v_b[l].as_slice_mut().unwrap(),
            h,
            bc1,
            bc2,
        );
    }
    Ok(())
}

fn update_tensor(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    h: &AdamHyper,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..w.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// Serializable snapshot of one network: flat row-major arrays per layer.
#[derive(Debug, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub layer_sizes: Vec<usize>,
    pub adam_t: u64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub adam_m_w: Vec<Vec<f64>>,
    pub adam_v_w: Vec<Vec<f64>>,
    pub adam_m_b: Vec<Vec<f64>>,
    pub adam_v_b: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn to_snapshot(&self) -> NetSnapshot {
        let flat2 = |v: &[Array2<f64>]| v.iter().map(|a| a.iter().copied().collect()).collect();
        let flat1 = |v: &[Array1<f64>]| v.iter().map(|a| a.to_vec()).collect();
        NetSnapshot {
            layer_sizes: self.layer_sizes.clone(),
            adam_t: self.adam_t,
            weights: flat2(&self.weights),
            biases: flat1(&self.biases),
            adam_m_w: flat2(&self.adam_m_w),
            adam_v_w: flat2(&self.adam_v_w),
            adam_m_b: flat1(&self.adam_m_b),
            adam_v_b: flat1(&self.adam_v_b),
        }
    }

    pub fn from_snapshot(s: &NetSnapshot) -> Result<Self> {
        if s.layer_sizes.len() < 2 {
            return Err(SmacError::Data(format!(
                "network snapshot needs ≥ 2 layer sizes, got {:?}",
                s.layer_sizes
            )));
        }
        let n_layers = s.layer_sizes.len() - 1;
        let lists = [
            s.weights.len(),
            s.biases.len(),
            s.adam_m_w.len(),
            s.adam_v_w.len(),
            s.adam_m_b.len(),
            s.adam_v_b.len(),
        ];
        if lists.iter().any(|&l| l != n_layers) {
            return Err(SmacError::Data(
                "network snapshot layer list lengths inconsistent with layer_sizes".into(),
            ));
        }
        let mut p = MlpParams::zeros(&s.layer_sizes);
        let make2 = |flat: &Vec<f64>, rows: usize, cols: usize| -> Result<Array2<f64>> {
            Array2::from_shape_vec((rows, cols), flat.clone())
                .map_err(|_| SmacError::Data(format!("bad weight array length {}", flat.len())))
        };
        let make1 = |flat: &Vec<f64>, len: usize| -> Result<Array1<f64>> {
            if flat.len() != len {
                return Err(SmacError::Data(format!("bad bias array length {}", flat.len())));
            }
            Ok(Array1::from_vec(flat.clone()))
        };
        for l in 0..n_layers {
            let (rows, cols) = (s.layer_sizes[l + 1], s.layer_sizes[l]);
            p.weights[l] = make2(&s.weights[l], rows, cols)?;
            p.adam_m_w[l] = make2(&s.adam_m_w[l], rows, cols)?;
            p.adam_v_w[l] = make2(&s.adam_v_w[l], rows, cols)?;
            p.biases[l] = make1(&s.biases[l], rows)?;
            p.adam_m_b[l] = make1(&s.adam_m_b[l], rows)?;
            p.adam_v_b[l] = make1(&s.adam_v_b[l], rows)?;
        }
        p.adam_t = s.adam_t;
        if !p.all_finite() {
            return Err(SmacError::Data("network snapshot contains non-finite values".into()));
        }
        Ok(p)
    }
}
