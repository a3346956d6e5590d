//! Regularized Kalman (R-Kalman) optimizer.
//!
//! The posterior over all parameters is a Gaussian with diagonal covariance.
//! Each observation runs predict → forward → Jacobian → noise estimate →
//! regularized gain → update, and writes the posterior mean back into the
//! network. The observation noise `R` is replaced by `R(I + ρR)⁻¹` inside the
//! gain, which is where gradient regularization enters.

mod checkpoint;

pub use checkpoint::{parse_checkpoint, write_checkpoint};

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{exact_inverse, solve, LinalgError, Mat};
use crate::model::{
    backward_from_output_grad, expand_targets, flatten, forward, loss_and_grad, Head, ModelError, Network,
};
use crate::optim::StepReport;
use crate::oracle::{full_cov_kalman_step, OracleError};

/// Smallest variance kept after an update.
pub const COVARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KalmanError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("innovation matrix is singular")]
    SingularInnovation,
    #[error("variance of parameter {index} collapsed to {value:e}")]
    CovarianceCollapse { index: usize, value: f64 },
    #[error("invalid kalman config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("checkpoint line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Mean and diagonal covariance of the parameter posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self, KalmanError> {
        if mu.len() != sigma.len() {
            return Err(KalmanError::DimensionMismatch(format!(
                "mu has {} entries, sigma {}",
                mu.len(),
                sigma.len()
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(KalmanError::InvalidConfig("posterior mean must be finite".into()));
        }
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(KalmanError::InvalidConfig("variances must be positive and finite".into()));
        }
        Ok(Self { mu, sigma })
    }

    /// Mean at the network's parameters, isotropic variance `sigma0`.
    pub fn from_network(net: &Network, sigma0: f64) -> Result<Self, KalmanError> {
        let mu = net.params();
        let n = mu.len();
        Self::new(mu, vec![sigma0; n])
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Exponentially averaged observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationNoise {
    pub r_mat: Mat,
    pub beta: f64,
}

impl ObservationNoise {
    /// `R₀ = 0`.
    pub fn zeros(dim: usize, beta: f64) -> Self {
        Self {
            r_mat: Mat::zeros(dim, dim),
            beta,
        }
    }
}

/// How `(I + ρR)⁻¹` is evaluated inside the gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainMode {
    Exact,
    /// `I − ρR`.
    FirstOrder,
}

impl GainMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::FirstOrder => "first-order",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "exact" => Some(Self::Exact),
            "first-order" | "neumann" => Some(Self::FirstOrder),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanConfig {
    /// ρ, the gain regularizer.
    pub rho: f64,
    /// β, forgetting factor of the noise average.
    pub beta: f64,
    /// σ₀, initial variance of every parameter.
    pub sigma0: f64,
    /// Process noise added to every variance in the predict step.
    pub q: f64,
    pub gain_mode: GainMode,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            rho: 0.01,
            beta: 0.97,
            sigma0: 0.1,
            q: 0.0,
            gain_mode: GainMode::Exact,
        }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<(), KalmanError> {
        let bad = |m: &str| Err(KalmanError::InvalidConfig(m.to_string()));
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad("sigma0 must be positive");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta must lie in (0, 1]");
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad("rho must be finite and nonnegative");
        }
        if !(self.q >= 0.0 && self.q.is_finite()) {
            return bad("q must be finite and nonnegative");
        }
        Ok(())
    }
}

/// Everything carried between R-Kalman steps.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub posterior: GaussianPosterior,
    pub noise: ObservationNoise,
    pub iteration: usize,
}

impl KalmanState {
    pub fn new(net: &Network, cfg: &KalmanConfig) -> Result<Self, KalmanError> {
        cfg.validate()?;
        Ok(Self {
            posterior: GaussianPosterior::from_network(net, cfg.sigma0)?,
            noise: ObservationNoise::zeros(observation_dim(net), cfg.beta),
            iteration: 0,
        })
    }
}

/// Number of observed outputs: all of them for regression, all but the last
/// class for classification (the probabilities sum to one, so the last row of
/// the Jacobian is minus the sum of the others).
pub fn observation_dim(net: &Network) -> usize {
    match net.head() {
        Head::Gaussian => net.output_dim(),
        Head::Categorical => net.output_dim().saturating_sub(1).max(1),
    }
}

/// `σ ← σ + q`.
pub fn predict(post: &GaussianPosterior, q: f64) -> GaussianPosterior {
    if q == 0.0 {
        return post.clone();
    }
    GaussianPosterior {
        mu: post.mu.clone(),
        sigma: post.sigma.iter().map(|s| s + q).collect(),
    }
}

/// `d_o × n` Jacobian of the prediction for one sample with respect to all
/// parameters, one backward pass per output.
pub fn jacobian(net: &Network, x: &Mat) -> Result<Mat, KalmanError> {
    if x.rows() != 1 || x.cols() != net.input_dim() {
        return Err(KalmanError::DimensionMismatch(format!(
            "jacobian needs a 1×{} sample, got {:?}",
            net.input_dim(),
            x.shape()
        )));
    }
    let (pred, mut cache) = forward(net, x)?;
    let d_o = net.output_dim();
    let n = net.num_params();
    let mut h = Mat::zeros(d_o, n);
    for j in 0..d_o {
        let mut seed = Mat::zeros(1, d_o);
        seed[(0, j)] = 1.0;
        let g = backward_from_output_grad(net, &mut cache, &pred, &seed)?;
        h.row_mut(j).copy_from_slice(&flatten(&g));
    }
    Ok(h)
}

/// `H diag(σ) Hᵀ` without forming `diag(σ)`.
fn projected_covariance(sigma: &[f64], h: &Mat) -> Mat {
    let d = h.rows();
    Mat::from_fn(d, d, |a, b| {
        h.row(a)
            .iter()
            .zip(h.row(b))
            .zip(sigma)
            .map(|((x, y), s)| x * s * y)
            .sum()
    })
}

fn check_shapes(sigma: &[f64], h: &Mat, d: usize) -> Result<(), KalmanError> {
    if h.cols() != sigma.len() || h.rows() != d {
        return Err(KalmanError::DimensionMismatch(format!(
            "H is {:?}, expected {d}×{}",
            h.shape(),
            sigma.len()
        )));
    }
    Ok(())
}

/// `R ← βR + (1−β)((y−ŷ)(y−ŷ)ᵀ + H diag(σ) Hᵀ)`, symmetrized.
pub fn estimate_r(
    y: &[f64],
    y_hat: &[f64],
    h: &Mat,
    sigma_prior: &[f64],
    noise: &ObservationNoise,
) -> Result<ObservationNoise, KalmanError> {
    let d = noise.r_mat.rows();
    if y.len() != d || y_hat.len() != d {
        return Err(KalmanError::DimensionMismatch(format!(
            "observation has {} / {} entries, noise is {d}×{d}",
            y.len(),
            y_hat.len()
        )));
    }
    check_shapes(sigma_prior, h, d)?;
    if noise.beta == 1.0 {
        return Ok(noise.clone());
    }
    let r: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| a - b).collect();
    let mut sample = projected_covariance(sigma_prior, h);
    sample.axpy(1.0, &Mat::outer(&r, &r))?;
    let mut next = noise.r_mat.scale(noise.beta);
    next.axpy(1.0 - noise.beta, &sample)?;
    Ok(ObservationNoise {
        r_mat: next.symmetrized(),
        beta: noise.beta,
    })
}

/// `R(I + ρR)⁻¹` (exact) or `R(I − ρR)` (first order).
pub fn regularized_noise(r: &Mat, rho: f64, mode: GainMode) -> Result<Mat, KalmanError> {
    match mode {
        // R and (I + ρR) commute, so R(I + ρR)⁻¹ = (I + ρR)⁻¹R.
        GainMode::Exact => {
            let shifted = r.scale(rho).add_diag(1.0);
            solve(&shifted, r).map_err(|_| KalmanError::SingularInnovation)
        }
        GainMode::FirstOrder => {
            let rr = r.matmul(r)?;
            let mut out = r.clone();
            out.axpy(-rho, &rr)?;
            Ok(out)
        }
    }
}

/// `diag(σ)Hᵀ (H diag(σ) Hᵀ + R_eff)⁻¹` for an already regularized noise.
fn gain_with_noise(sigma: &[f64], h: &Mat, r_eff: &Mat) -> Result<Mat, KalmanError> {
    check_shapes(sigma, h, r_eff.rows())?;
    let mut innovation = projected_covariance(sigma, h);
    innovation.axpy(1.0, r_eff)?;
    let innovation = innovation.symmetrized();
    // Row-scaled H diag(σ), d × n.
    let hs = Mat::from_fn(h.rows(), h.cols(), |a, i| h[(a, i)] * sigma[i]);
    // K̃ᵀ = S⁻¹ H diag(σ) since S is symmetric.
    let kt = solve(&innovation, &hs).map_err(|e| match e {
        LinalgError::SingularMatrix { .. } => KalmanError::SingularInnovation,
        other => other.into(),
    })?;
    Ok(kt.transpose())
}

/// Regularized gain `K̃ = diag(σ)Hᵀ(H diag(σ) Hᵀ + R(I+ρR)⁻¹)⁻¹`, `n × d`.
pub fn regularized_gain(
    sigma_prior: &[f64],
    h: &Mat,
    noise: &ObservationNoise,
    rho: f64,
    mode: GainMode,
) -> Result<Mat, KalmanError> {
    let r_eff = regularized_noise(&noise.r_mat, rho, mode)?;
    gain_with_noise(sigma_prior, h, &r_eff)
}

/// Unregularized Kalman gain `diag(σ)Hᵀ(H diag(σ) Hᵀ + R)⁻¹`.
pub fn standard_gain(sigma_prior: &[f64], h: &Mat, r: &Mat) -> Result<Mat, KalmanError> {
    gain_with_noise(sigma_prior, h, r)
}

/// `μ ← μ + K̃ r`, `σ_i ← σ_i(1 − Σ_j K̃_ij H_ji)`, floored at
/// [`COVARIANCE_FLOOR`].
pub fn update(
    prior: &GaussianPosterior,
    gain: &Mat,
    h: &Mat,
    residual: &[f64],
) -> Result<GaussianPosterior, KalmanError> {
    let n = prior.len();
    let d = residual.len();
    if gain.shape() != (n, d) || h.shape() != (d, n) {
        return Err(KalmanError::DimensionMismatch(format!(
            "gain {:?}, H {:?}, residual {d}, n = {n}",
            gain.shape(),
            h.shape()
        )));
    }
    let step = gain.matvec(residual)?;
    let mu = prior.mu.iter().zip(&step).map(|(m, s)| m + s).collect();
    let mut sigma = Vec::with_capacity(n);
    for (i, &s) in prior.sigma.iter().enumerate() {
        let shrink: f64 = (0..d).map(|j| gain[(i, j)] * h[(j, i)]).sum();
        let next = s - shrink * s;
        if !(next >= COVARIANCE_FLOOR / 10.0) {
            return Err(KalmanError::CovarianceCollapse { index: i, value: next });
        }
        sigma.push(next.max(COVARIANCE_FLOOR));
    }
    Ok(GaussianPosterior { mu, sigma })
}

/// One R-Kalman step on a single sample `(x, y)`, `x` of shape `1 × d_i`.
///
/// `y` holds the regression targets, or one class index for classification.
/// The reported loss and gradient norm are evaluated at the prior mean.
pub fn step_rkalman(
    net: &mut Network,
    x: &Mat,
    y: &Mat,
    state: &mut KalmanState,
    cfg: &KalmanConfig,
) -> Result<StepReport, KalmanError> {
    let start = Instant::now();
    if x.rows() != 1 || y.rows() != 1 {
        return Err(KalmanError::DimensionMismatch("R-Kalman consumes one sample per step".into()));
    }
    let iteration = state.iteration;
    let prior = predict(&state.posterior, cfg.q);
    net.set_params(&prior.mu)?;

    let (loss, grads) = loss_and_grad(net, x, y)?;
    if !loss.is_finite() {
        return Err(KalmanError::NonFiniteLoss { iteration });
    }
    let grad_norm = flatten(&grads).iter().map(|v| v * v).sum::<f64>().sqrt();

    let (pred, _) = forward(net, x)?;
    let target = expand_targets(y, net.head(), net.output_dim())?;
    let d = observation_dim(net);
    let full_h = jacobian(net, x)?;
    let h = if d == full_h.rows() {
        full_h
    } else {
        Mat::from_fn(d, full_h.cols(), |r, c| full_h[(r, c)])
    };
    let y_obs = &target.row(0)[..d];
    let y_hat = &pred.outputs.row(0)[..d];
    let residual: Vec<f64> = y_obs.iter().zip(y_hat).map(|(a, b)| a - b).collect();

    let noise = estimate_r(y_obs, y_hat, &h, &prior.sigma, &state.noise)?;
    let gain = regularized_gain(&prior.sigma, &h, &noise, cfg.rho, cfg.gain_mode)?;
    let posterior = update(&prior, &gain, &h, &residual)?;
    net.set_params(&posterior.mu)?;

    state.posterior = posterior;
    state.noise = noise;
    state.iteration += 1;
    Ok(StepReport {
        iteration,
        loss,
        grad_norm,
        damping: cfg.rho,
        refreshed: true,
        duration: start.elapsed(),
    })
}

/// A linear-Gaussian observation `y = Hθ + ε`, `ε ~ N(0, R)`, with a full
/// Gaussian prior `N(μ, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianInstance {
    pub mu: Vec<f64>,
    pub sigma: Mat,
    pub h: Mat,
    pub r: Mat,
    pub y: Vec<f64>,
}

fn random_spd<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mat {
    let a = Mat::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    a.t_matmul(&a).expect("square").scale(1.0 / n as f64).add_diag(0.5).symmetrized()
}

impl LinearGaussianInstance {
    /// Random well-conditioned instance with `n` parameters and `d` outputs.
    pub fn random<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Self {
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        let mu = (0..n).map(|_| normal()).collect();
        let h = Mat::from_fn(d, n, |_, _| normal() / (n as f64).sqrt());
        let y = (0..d).map(|_| normal()).collect();
        let sigma = random_spd(n, rng);
        let r = random_spd(d, rng);
        Self { mu, sigma, h, r, y }
    }
}

/// Largest deviations found by [`kalman_ngd_equivalence_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceReport {
    /// `max |(μ' − μ) + Σ'∇L|`.
    pub mean_deviation: f64,
    /// `max |(Σ'⁻¹ − Σ⁻¹) − HᵀR⁻¹H|`.
    pub precision_deviation: f64,
}

/// Checks that one full-covariance Kalman update is a natural-gradient step:
/// the mean moves by `−Σ'∇L` with `∇L = HᵀR⁻¹(Hμ − y)`, and the precision
/// grows by the Fisher `HᵀR⁻¹H`.
pub fn kalman_ngd_equivalence_check(inst: &LinearGaussianInstance) -> Result<EquivalenceReport, OracleError> {
    let y_hat = inst.h.matvec(&inst.mu)?;
    let next = full_cov_kalman_step(&inst.mu, &inst.sigma, &inst.h, &inst.r, &inst.y, &y_hat, 0.0)?;

    let d = inst.r.rows();
    let r_inv = if d == 0 { Mat::zeros(0, 0) } else { exact_inverse(&inst.r)? };
    let diff: Vec<f64> = y_hat.iter().zip(&inst.y).map(|(a, b)| a - b).collect();
    let grad = inst.h.t_matvec(&r_inv.matvec(&diff)?);
    let natural = next.sigma.matvec(&grad)?;
    let mean_deviation = next
        .mu
        .iter()
        .zip(&inst.mu)
        .zip(&natural)
        .map(|((a, b), g)| ((a - b) + g).abs())
        .fold(0.0, f64::max);

    let fisher = inst.h.t_matmul(&r_inv.matmul(&inst.h)?)?;
    let increment = exact_inverse(&next.sigma)?.sub(&exact_inverse(&inst.sigma)?)?;
    let precision_deviation = increment.max_abs_diff(&fisher);
    Ok(EquivalenceReport {
        mean_deviation,
        precision_deviation,
    })
}
