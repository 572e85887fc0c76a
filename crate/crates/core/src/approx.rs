//! Small feed-forward networks with hand-written reverse-mode gradients, and
//! the squashed-Gaussian policy head built on top of them.
//!
//! Parameters live in one flat vector. Layer `l` (mapping `n_in -> n_out`)
//! occupies `n_out * n_in` weights stored row-major (`[out][in]`) followed by
//! `n_out` biases. Hidden layers use `tanh`; the output layer is linear.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::SimRng;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Sampled actions are kept strictly inside `(-1, 1)` so `atanh` stays finite.
pub const ACTION_BOUND: f64 = 1.0 - 1e-12;

const MLP_FORMAT: &str = "decmarl-mlp/1";

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("action component {0} lies on or outside the open interval (-1, 1)")]
    BoundaryAction(f64),
    #[error("non-finite parameter")]
    NonFinite,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ApproxError>;

/// Multi-layer perceptron with `tanh` hidden units and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass; `layers[0]` is the input and
/// `layers[l + 1]` the (post-activation) output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layers: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Gradients of `<upstream, output>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ApproxError::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init(sizes: &[usize], rng: &mut SimRng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let count = w[1] * w[0] + w[1];
            for p in &mut net.params[offset..offset + count] {
                *p = rng.random_range(-bound..bound);
            }
            offset += count;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(ApproxError::Shape(format!(
                "{} parameters for layout needing {}",
                params.len(),
                net.params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ApproxError::NonFinite);
        }
        Ok(Self { params, ..net })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    /// `W_l[out][inp]`.
    pub fn weight(&self, layer: usize, out: usize, inp: usize) -> f64 {
        self.params[self.layer_offset(layer) + out * self.sizes[layer] + inp]
    }

    pub fn bias(&self, layer: usize, out: usize) -> f64 {
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        self.params[self.layer_offset(layer) + n_out * n_in + out]
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.layers.pop().unwrap_or_default())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.input_dim() {
            return Err(ApproxError::Shape(format!(
                "input of length {} for a network expecting {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut layers = Vec::with_capacity(self.sizes.len());
        layers.push(input.to_vec());
        let mut offset = 0;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let weights = &self.params[offset..offset + n_out * n_in];
            let biases = &self.params[offset + n_out * n_in..offset + n_out * n_in + n_out];
            let x = &layers[l];
            let hidden = l + 1 < self.num_layers();
            let out: Vec<f64> = weights
                .chunks_exact(n_in)
                .zip(biases)
                .map(|(row, b)| {
                    let z = dot(row, x) + b;
                    if hidden {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            layers.push(out);
            offset += n_out * n_in + n_out;
        }
        Ok(ForwardTrace { layers })
    }

    /// Reverse-mode gradients of `<upstream, forward(input)>`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Gradients> {
        let trace = self.forward_trace(input)?;
        let mut params = vec![0.0; self.params.len()];
        let input = self.accumulate_backward(&trace, upstream, &mut params)?;
        Ok(Gradients { params, input })
    }

    /// Adds the parameter gradient of `<upstream, output>` into `grad` and
    /// returns the gradient with respect to the input.
    pub fn accumulate_backward(&self, trace: &ForwardTrace, upstream: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        self.backprop(trace, upstream, Some(grad))
    }

    /// Gradient of `<upstream, output>` with respect to the input only.
    pub fn input_gradient(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<Vec<f64>> {
        self.backprop(trace, upstream, None)
    }

    fn backprop(&self, trace: &ForwardTrace, upstream: &[f64], mut grad: Option<&mut [f64]>) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(ApproxError::Shape(format!(
                "upstream of length {} for output of {}",
                upstream.len(),
                self.output_dim()
            )));
        }
        if grad.as_ref().is_some_and(|g| g.len() != self.params.len()) || trace.layers.len() != self.sizes.len() {
            return Err(ApproxError::Shape("gradient buffer or trace does not match network".into()));
        }
        let mut delta = upstream.to_vec();
        let mut offset = self.params.len();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= n_out * n_in + n_out;
            if l + 1 < self.num_layers() {
                // through tanh: d/dz = 1 - y^2
                for (d, y) in delta.iter_mut().zip(&trace.layers[l + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            if let Some(grad) = grad.as_deref_mut() {
                let x = &trace.layers[l];
                let (gw, gb) = grad[offset..offset + n_out * n_in + n_out].split_at_mut(n_out * n_in);
                for (o, &d) in delta.iter().enumerate() {
                    gb[o] += d;
                    if d != 0.0 {
                        for (g, v) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                            *g += d * v;
                        }
                    }
                }
            }
            let weights = &self.params[offset..offset + n_out * n_in];
            let mut prev = vec![0.0; n_in];
            for (row, &d) in weights.chunks_exact(n_in).zip(&delta) {
                if d != 0.0 {
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// `self <- (1 - eps) self + eps other`.
    pub fn polyak_towards(&mut self, other: &Mlp, eps: f64) -> Result<()> {
        if self.sizes != other.sizes {
            return Err(ApproxError::Shape("polyak between different layouts".into()));
        }
        for (t, s) in self.params.iter_mut().zip(&other.params) {
            *t = (1.0 - eps) * *t + eps * s;
        }
        Ok(())
    }

    /// Writes the checkpoint container with [`MlpMeta`] metadata and the flat
    /// parameter vector as payload.
    pub fn save(&self, out: impl Write) -> Result<()> {
        let meta = MlpMeta {
            format: MLP_FORMAT.to_string(),
            layer_sizes: self.sizes.clone(),
            hidden_activation: "tanh".to_string(),
            layout: "per layer: weights [out][in] row-major, then bias [out]".to_string(),
        };
        Ok(checkpoint::write(out, &meta, &self.params)?)
    }

    pub fn load(input: impl Read) -> Result<Self> {
        let (meta, params): (MlpMeta, Vec<f64>) = checkpoint::read(input)?;
        if meta.format != MLP_FORMAT || meta.hidden_activation != "tanh" {
            return Err(ApproxError::Shape(format!("unsupported network format {}", meta.format)));
        }
        Self::from_params(&meta.layer_sizes, params)
    }
}

/// Inner product accumulated in four interleaved partial sums
/// `((s0 + s1) + (s2 + s3)) + tail`, where `s_k` sums indices `≡ k (mod 4)`
/// of the length-multiple-of-4 prefix and `tail` the remaining products in order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Checkpoint metadata for [`Mlp::save`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpMeta {
    pub format: String,
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: String,
    pub layout: String,
}

/// Plain stochastic gradient descent with optional momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `params -= lr * v` with `v <- momentum v + grad`.
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.apply(params, grad, -1.0);
    }

    /// `params += lr * v`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.apply(params, grad, 1.0);
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], sign: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p += sign * self.learning_rate * *v;
        }
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(1 - tanh(u)^2)` computed as `2 (log 2 - u - softplus(-2u))`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Diagonal Gaussian in pre-squash space for one state.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Whether each log-std coordinate was inside the clamp range (gradients
    /// flow only through unclamped coordinates).
    pub log_std_active: Vec<bool>,
    trace: ForwardTrace,
}

impl GaussianParams {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }
}

/// `a = tanh(μ(s) + σ(s) ⊙ ξ)` with `ξ ~ N(0, I)`; the trunk emits `μ` in its
/// first `d` outputs and `log σ` (clamped to `[-20, 2]`) in the last `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedGaussianHead {
    trunk: Mlp,
    action_dim: usize,
}

impl SquashedGaussianHead {
    /// Trunk layout `[state_dim, hidden..., 2 * action_dim]`.
    pub fn init(state_dim: usize, hidden: &[usize], action_dim: usize, rng: &mut SimRng) -> Result<Self> {
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        Self::from_trunk(Mlp::init(&sizes, rng)?)
    }

    pub fn from_trunk(trunk: Mlp) -> Result<Self> {
        let out = trunk.output_dim();
        if !out.is_multiple_of(2) {
            return Err(ApproxError::Shape(format!("trunk output {out} is not even")));
        }
        Ok(Self {
            trunk,
            action_dim: out / 2,
        })
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut Mlp {
        &mut self.trunk
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params()
    }

    pub fn gaussian(&self, state: &[f64]) -> Result<GaussianParams> {
        let trace = self.trunk.forward_trace(state)?;
        let out = trace.output();
        let d = self.action_dim;
        let mean = out[..d].to_vec();
        let raw = &out[d..];
        let log_std = raw.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        let log_std_active = raw.iter().map(|l| (LOG_STD_MIN..=LOG_STD_MAX).contains(l)).collect();
        Ok(GaussianParams {
            mean,
            log_std,
            log_std_active,
            trace,
        })
    }

    /// Deterministic part of the reparameterization: `f_θ(ξ, s)`.
    pub fn action_from_noise(&self, state: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
        if xi.len() != self.action_dim {
            return Err(ApproxError::Shape(format!("noise of length {}", xi.len())));
        }
        let g = self.gaussian(state)?;
        Ok(squash(&g, xi))
    }

    /// Draws `ξ ~ N(0, I)` and returns `(f_θ(ξ, s), ξ)`.
    pub fn sample_squashed(&self, state: &[f64], rng: &mut SimRng) -> Result<(Vec<f64>, Vec<f64>)> {
        let xi: Vec<f64> = (0..self.action_dim).map(|_| rng.sample(StandardNormal)).collect();
        let action = self.action_from_noise(state, &xi)?;
        Ok((action, xi))
    }

    /// Like [`Self::sample_squashed`] but also returns the log-density of the
    /// sampled action, bit-identical to [`Self::log_prob`] on it.
    pub fn sample_with_log_prob(&self, state: &[f64], rng: &mut SimRng) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let xi: Vec<f64> = (0..self.action_dim).map(|_| rng.sample(StandardNormal)).collect();
        let g = self.gaussian(state)?;
        let action = squash(&g, &xi);
        let lp = squashed_log_prob(&g, &action)?;
        Ok((action, xi, lp))
    }

    /// Log density of `action` under the squashed policy:
    /// `log N(atanh a; μ, σ) - Σ_k log(1 - a_k^2)`.
    pub fn log_prob(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        presquash(action, self.action_dim)?;
        squashed_log_prob(&self.gaussian(state)?, action)
    }

    /// Gradient of [`Self::log_prob`] with respect to the trunk parameters.
    pub fn log_prob_param_grad(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let pre = presquash(action, self.action_dim)?;
        let g = self.gaussian(state)?;
        let d = self.action_dim;
        let mut upstream = vec![0.0; 2 * d];
        for k in 0..d {
            let var = (2.0 * g.log_std[k]).exp();
            let diff = pre[k] - g.mean[k];
            upstream[k] = diff / var;
            if g.log_std_active[k] {
                upstream[d + k] = diff * diff / var - 1.0;
            }
        }
        let mut grad = vec![0.0; self.num_params()];
        self.trunk.accumulate_backward(&g.trace, &upstream, &mut grad)?;
        Ok(grad)
    }

    /// `f_θ(ξ, s)` together with what [`Self::accumulate_reparam_backward`]
    /// needs.
    pub fn reparam_forward(&self, state: &[f64], xi: &[f64]) -> Result<(Vec<f64>, ReparamCache)> {
        if xi.len() != self.action_dim {
            return Err(ApproxError::Shape(format!("noise of length {}", xi.len())));
        }
        let gaussian = self.gaussian(state)?;
        let action = squash(&gaussian, xi);
        Ok((
            action,
            ReparamCache {
                gaussian,
                xi: xi.to_vec(),
            },
        ))
    }

    /// Adds `∇_θ <upstream, f_θ(ξ, s)>` into `grad`.
    pub fn accumulate_reparam_backward(&self, cache: &ReparamCache, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        let d = self.action_dim;
        if upstream.len() != d {
            return Err(ApproxError::Shape("upstream length differs from action dim".into()));
        }
        let (g, xi) = (&cache.gaussian, &cache.xi);
        let mut trunk_up = vec![0.0; 2 * d];
        for k in 0..d {
            let sigma = g.log_std[k].exp();
            let a = (g.mean[k] + sigma * xi[k]).tanh();
            let du = upstream[k] * (1.0 - a * a);
            trunk_up[k] = du;
            if g.log_std_active[k] {
                trunk_up[d + k] = du * sigma * xi[k];
            }
        }
        self.trunk.accumulate_backward(&g.trace, &trunk_up, grad)?;
        Ok(())
    }

    /// Adds `∇_θ <upstream, f_θ(ξ, s)>` into `grad`.
    pub fn accumulate_reparam_grad(&self, state: &[f64], xi: &[f64], upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        let (_, cache) = self.reparam_forward(state, xi)?;
        self.accumulate_reparam_backward(&cache, upstream, grad)
    }

    pub fn save(&self, out: impl Write) -> Result<()> {
        self.trunk.save(out)
    }

    pub fn load(input: impl Read) -> Result<Self> {
        Self::from_trunk(Mlp::load(input)?)
    }
}

/// Forward state of one reparameterized action.
#[derive(Debug, Clone)]
pub struct ReparamCache {
    gaussian: GaussianParams,
    xi: Vec<f64>,
}

fn squashed_log_prob(g: &GaussianParams, action: &[f64]) -> Result<f64> {
    let pre = presquash(action, g.mean.len())?;
    Ok(gaussian_log_prob(g, &pre) - pre.iter().map(|&u| log_one_minus_tanh_sq(u)).sum::<f64>())
}

fn squash(g: &GaussianParams, xi: &[f64]) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.log_std)
        .zip(xi)
        .map(|((m, l), x)| (m + l.exp() * x).tanh().clamp(-ACTION_BOUND, ACTION_BOUND))
        .collect()
}

fn presquash(action: &[f64], dim: usize) -> Result<Vec<f64>> {
    if action.len() != dim {
        return Err(ApproxError::Shape(format!("action of length {} for dim {dim}", action.len())));
    }
    action
        .iter()
        .map(|&a| {
            if a.is_finite() && a.abs() < 1.0 {
                Ok(a.atanh())
            } else {
                Err(ApproxError::BoundaryAction(a))
            }
        })
        .collect()
}

fn gaussian_log_prob(g: &GaussianParams, pre: &[f64]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    pre.iter()
        .zip(&g.mean)
        .zip(&g.log_std)
        .map(|((u, m), l)| {
            let z = (u - m) / l.exp();
            -0.5 * z * z - l - half_log_2pi
        })
        .sum()
}
