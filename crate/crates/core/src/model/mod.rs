//! Layer-wise feed-forward network.
//!
//! Each layer computes `z = x̄ Wᵀ`, `h = act(z)` on a batch, where `x̄` is the
//! layer input with a trailing constant-1 column when the layer has a bias.
//! The forward pass caches every `x̄` and every pre-activation `z`; the
//! backward pass stores the per-sample errors `e = ∂ℓ/∂z`. Those two
//! quantities are all the Kronecker-factored curvature needs.
//!
//! Parameter vectors flatten the weight matrices layer by layer, each in
//! row-major order.

mod io;
mod penalty;
mod sampling;

pub use io::{parse_network, write_network};
pub use penalty::{grad_norm_penalty_grad, penalty_gradient_fd, DEFAULT_PENALTY_EPSILON};
pub(crate) use penalty::penalty_from_grad;
pub use sampling::sample_outputs;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::linalg::{LinalgError, Mat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("cache does not belong to this forward pass")]
    StaleCache,
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Self::Tanh => z.tanh(),
            Self::Relu => z.max(0.0),
            Self::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::Relu => "relu",
            Self::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Self::Tanh),
            "relu" => Some(Self::Relu),
            "identity" | "linear" => Some(Self::Identity),
            _ => None,
        }
    }
}

/// Output distribution of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Unit-variance Gaussian around the network output.
    Gaussian,
    /// Softmax over the final layer's outputs.
    Categorical,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Categorical => "categorical",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "gaussian" | "gaussian-regression" | "regression" => Some(Self::Gaussian),
            "categorical" | "classification" => Some(Self::Categorical),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `ω' × ω`, where `ω` counts the bias column when `bias` is set.
    pub weights: Mat,
    pub bias: bool,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols() - usize::from(self.bias)
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    head: Head,
}

impl Network {
    pub fn new(layers: Vec<Layer>, head: Head) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::InvalidNetwork("no layers".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(ModelError::InvalidNetwork(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        if layers.iter().any(|l| !l.weights.is_finite()) {
            return Err(ModelError::InvalidNetwork("non-finite weight".into()));
        }
        Ok(Self { layers, head })
    }

    /// Random network with `N(0, 1/fan_in)` weights and zero biases. Hidden
    /// layers use `hidden`; the last layer is linear (the head applies its own
    /// link).
    pub fn random<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        head: Head,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if dims.len() < 2 {
            return Err(ModelError::InvalidNetwork("need at least input and output dims".into()));
        }
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
                let cols = fan_in + usize::from(bias);
                let weights = Mat::from_fn(fan_out, cols, |_, c| {
                    if bias && c == fan_in {
                        0.0
                    } else {
                        normal.sample(rng)
                    }
                });
                let activation = if i + 1 == n_layers {
                    Activation::Identity
                } else {
                    hidden
                };
                Layer {
                    weights,
                    bias,
                    activation,
                }
            })
            .collect();
        Self::new(layers, head)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len()).sum()
    }

    /// Weight shapes `(ω', ω)` per layer.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weights.shape()).collect()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(l.weights.as_slice());
        }
        v
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<(), ModelError> {
        if theta.len() != self.num_params() {
            return Err(ModelError::DimensionMismatch(format!(
                "parameter vector has {} entries, network has {}",
                theta.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weights.as_slice().len();
            l.weights.as_mut_slice().copy_from_slice(&theta[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `W_i ← W_i + scale · delta_i` for every layer.
    pub fn apply_update(&mut self, deltas: &[Mat], scale: f64) -> Result<(), ModelError> {
        if deltas.len() != self.layers.len() {
            return Err(ModelError::DimensionMismatch("update layer count".into()));
        }
        for (l, d) in self.layers.iter_mut().zip(deltas) {
            l.weights.axpy(scale, d)?;
        }
        Ok(())
    }
}

/// Concatenates per-layer matrices in parameter order.
pub fn flatten(mats: &[Mat]) -> Vec<f64> {
    mats.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

/// Splits a parameter-ordered vector back into per-layer matrices.
pub fn unflatten(v: &[f64], shapes: &[(usize, usize)]) -> Result<Vec<Mat>, ModelError> {
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    if total != v.len() {
        return Err(ModelError::DimensionMismatch(format!(
            "vector of {} entries for {} parameters",
            v.len(),
            total
        )));
    }
    let mut off = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for &(r, c) in shapes {
        out.push(Mat::from_vec(r, c, v[off..off + r * c].to_vec())?);
        off += r * c;
    }
    Ok(out)
}

static FORWARD_ID: AtomicU64 = AtomicU64::new(1);

/// Network outputs for a batch. For the categorical head each row holds class
/// probabilities.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub outputs: Mat,
    pub head: Head,
    pass_id: u64,
}

impl Prediction {
    pub fn batch_size(&self) -> usize {
        self.outputs.rows()
    }
}

/// Per-layer forward inputs and backpropagated errors for one batch.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// `x̄_{i−1}` per layer, `m × ω_i` (bias column included).
    pub inputs: Vec<Mat>,
    /// Pre-activations `z_i`, `m × ω'_i`.
    pub preacts: Vec<Mat>,
    /// Per-sample errors `e_i = ∂ℓ/∂z_i`, `m × ω'_i`; empty until backward runs.
    pub errors: Vec<Mat>,
    pass_id: u64,
}

impl LayerCache {
    /// A detached cache, e.g. for synthetic factor statistics. It never
    /// matches a [`Prediction`], so backward passes reject it.
    pub fn from_parts(inputs: Vec<Mat>, preacts: Vec<Mat>, errors: Vec<Mat>) -> Self {
        Self {
            inputs,
            preacts,
            errors,
            pass_id: 0,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }

    pub fn has_errors(&self) -> bool {
        !self.errors.is_empty()
    }

    /// `mean_b e_b x̄_bᵀ` for layer `i`: the batch gradient of that layer.
    pub fn batch_gradient(&self, i: usize) -> Mat {
        let m = self.batch_size() as f64;
        let mut g = self.errors[i].t_matmul(&self.inputs[i]).expect("cached shapes agree");
        g.scale_in_place(1.0 / m);
        g
    }
}

fn with_bias(x: &Mat, bias: bool) -> Mat {
    if !bias {
        return x.clone();
    }
    let (m, d) = x.shape();
    Mat::from_fn(m, d + 1, |r, c| if c == d { 1.0 } else { x[(r, c)] })
}

fn softmax_rows(z: &Mat) -> Mat {
    let mut out = z.clone();
    for r in 0..z.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Forward pass over a batch (`m × d_i`).
pub fn forward(net: &Network, x: &Mat) -> Result<(Prediction, LayerCache), ModelError> {
    if x.cols() != net.input_dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "input has {} columns, network expects {}",
            x.cols(),
            net.input_dim()
        )));
    }
    if x.rows() == 0 {
        return Err(ModelError::DimensionMismatch("empty batch".into()));
    }
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut preacts = Vec::with_capacity(net.layers.len());
    let mut h = x.clone();
    for layer in &net.layers {
        let xb = with_bias(&h, layer.bias);
        let z = xb.matmul(&layer.weights.transpose())?;
        h = z.map(|v| layer.activation.apply(v));
        inputs.push(xb);
        preacts.push(z);
    }
    let outputs = match net.head {
        Head::Gaussian => h,
        Head::Categorical => softmax_rows(&h),
    };
    let pass_id = FORWARD_ID.fetch_add(1, Ordering::Relaxed);
    Ok((
        Prediction {
            outputs,
            head: net.head,
            pass_id,
        },
        LayerCache {
            inputs,
            preacts,
            errors: Vec::new(),
            pass_id,
        },
    ))
}

/// Expands class-index targets (`m × 1`) to one-hot rows; passes `m × d_o`
/// targets through unchanged.
pub fn expand_targets(y: &Mat, head: Head, d_o: usize) -> Result<Mat, ModelError> {
    if y.cols() == d_o {
        return Ok(y.clone());
    }
    if head == Head::Categorical && y.cols() == 1 {
        let mut out = Mat::zeros(y.rows(), d_o);
        for r in 0..y.rows() {
            let c = y[(r, 0)];
            if c < 0.0 || c.fract() != 0.0 || c as usize >= d_o {
                return Err(ModelError::DimensionMismatch(format!(
                    "class index {c} out of range for {d_o} classes"
                )));
            }
            out[(r, c as usize)] = 1.0;
        }
        return Ok(out);
    }
    Err(ModelError::DimensionMismatch(format!(
        "targets have {} columns, outputs have {d_o}",
        y.cols()
    )))
}

/// One-hot matrix from class indices.
pub fn one_hot(classes: &[usize], d_o: usize) -> Mat {
    let mut out = Mat::zeros(classes.len(), d_o);
    for (r, &c) in classes.iter().enumerate() {
        out[(r, c)] = 1.0;
    }
    out
}

/// Mean negative log-likelihood over the batch: `½‖ŷ − y‖²` per sample for
/// the Gaussian head, cross-entropy for the categorical head.
pub fn loss(pred: &Prediction, y: &Mat) -> Result<f64, ModelError> {
    let d_o = pred.outputs.cols();
    let y = expand_targets(y, pred.head, d_o)?;
    if y.rows() != pred.outputs.rows() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} targets for {} predictions",
            y.rows(),
            pred.outputs.rows()
        )));
    }
    let m = y.rows() as f64;
    let total: f64 = match pred.head {
        Head::Gaussian => pred
            .outputs
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(p, t)| 0.5 * (p - t) * (p - t))
            .sum(),
        Head::Categorical => pred
            .outputs
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .filter(|(_, &t)| t != 0.0)
            .map(|(&p, &t)| -t * p.max(f64::MIN_POSITIVE).ln())
            .sum(),
    };
    Ok(total / m)
}

/// Backward pass against `targets`.
///
/// Returns the per-layer mean gradients `mean_b e_b x̄_bᵀ` and stores the
/// per-sample errors in `cache`.
pub fn backward(
    net: &Network,
    cache: &mut LayerCache,
    pred: &Prediction,
    targets: &Mat,
) -> Result<Vec<Mat>, ModelError> {
    check_cache(net, cache, pred)?;
    let y = expand_targets(targets, pred.head, net.output_dim())?;
    if y.rows() != pred.outputs.rows() {
        return Err(ModelError::StaleCache);
    }
    // ∂ℓ/∂h_L: ŷ − y for the Gaussian head, p − y w.r.t. logits for softmax.
    let dh = pred.outputs.sub(&y)?;
    propagate(net, cache, dh)
}

/// Backward pass seeded with an arbitrary per-sample gradient with respect to
/// the prediction (`m × d_o`, w.r.t. probabilities for the categorical head).
pub fn backward_from_output_grad(
    net: &Network,
    cache: &mut LayerCache,
    pred: &Prediction,
    d_out: &Mat,
) -> Result<Vec<Mat>, ModelError> {
    check_cache(net, cache, pred)?;
    if d_out.shape() != pred.outputs.shape() {
        return Err(ModelError::DimensionMismatch("output seed shape".into()));
    }
    let dh = match pred.head {
        Head::Gaussian => d_out.clone(),
        Head::Categorical => {
            // Softmax Jacobian: ∂p_j/∂h_k = p_j(δ_jk − p_k).
            let p = &pred.outputs;
            let mut dh = Mat::zeros(p.rows(), p.cols());
            for r in 0..p.rows() {
                let dot: f64 = p.row(r).iter().zip(d_out.row(r)).map(|(a, b)| a * b).sum();
                for k in 0..p.cols() {
                    dh[(r, k)] = p[(r, k)] * (d_out[(r, k)] - dot);
                }
            }
            dh
        }
    };
    propagate(net, cache, dh)
}

fn check_cache(net: &Network, cache: &LayerCache, pred: &Prediction) -> Result<(), ModelError> {
    if cache.pass_id != pred.pass_id
        || cache.inputs.len() != net.layers.len()
        || cache
            .inputs
            .iter()
            .zip(&net.layers)
            .any(|(x, l)| x.cols() != l.weights.cols())
    {
        return Err(ModelError::StaleCache);
    }
    Ok(())
}

fn propagate(net: &Network, cache: &mut LayerCache, dh_last: Mat) -> Result<Vec<Mat>, ModelError> {
    let n = net.layers.len();
    let mut errors = vec![Mat::zeros(0, 0); n];
    let mut dh = dh_last;
    for i in (0..n).rev() {
        let layer = &net.layers[i];
        let z = &cache.preacts[i];
        let e = Mat::from_fn(z.rows(), z.cols(), |r, c| {
            dh[(r, c)] * layer.activation.derivative(z[(r, c)])
        });
        if i > 0 {
            let full = e.matmul(&layer.weights)?;
            let in_dim = layer.input_dim();
            dh = Mat::from_fn(full.rows(), in_dim, |r, c| full[(r, c)]);
        }
        errors[i] = e;
    }
    cache.errors = errors;
    Ok((0..n).map(|i| cache.batch_gradient(i)).collect())
}

/// Loss and per-layer gradient at the network's current parameters.
pub fn loss_and_grad(net: &Network, x: &Mat, y: &Mat) -> Result<(f64, Vec<Mat>), ModelError> {
    let (pred, mut cache) = forward(net, x)?;
    let l = loss(&pred, y)?;
    let g = backward(net, &mut cache, &pred, y)?;
    Ok((l, g))
}
