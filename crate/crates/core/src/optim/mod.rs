//! First- and second-order optimizers over a [`Network`].
//!
//! The natural-gradient family (NGD, RING, RENG) follows one loop per step:
//! data gradient, optional gradient-norm penalty (RENG), then either a full
//! factor refresh from sampled outputs (every `S` steps) or a lazy
//! first-order correction of the stored inverses, then the update
//! `W_i ← W_i − (α/L) Γ̃⁻¹ G_i Λ̃⁻¹`, then a Levenberg–Marquardt adjustment
//! of the damping coefficient.

mod lm;

pub use lm::{lm_damping_update, LM_MAX_DAMPING, LM_MIN_DAMPING};

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fisher::{
    estimate_factors, regularize_and_invert, DampingMode, DampingVariant, FisherError, FisherFactors, Inverter,
    DEFAULT_LAZY_BOUND,
};
use crate::linalg::{Mat, NewtonConfig};
use crate::model::{
    backward, forward, loss, loss_and_grad, penalty_from_grad, sample_outputs, ModelError, Network,
    DEFAULT_PENALTY_EPSILON,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fisher(#[from] FisherError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Sgd,
    /// Per-parameter second-moment scaling (RMSprop-style, no bias correction).
    Adaptive,
    /// K-FAC-style natural gradient with Tikhonov damping.
    Ngd,
    Ring,
    Reng,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [Self::Sgd, Self::Adaptive, Self::Ngd, Self::Ring, Self::Reng];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adaptive => "adaptive",
            Self::Ngd => "ngd",
            Self::Ring => "ring",
            Self::Reng => "reng",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(Self::Sgd),
            "adaptive" | "adaptive-baseline" => Some(Self::Adaptive),
            "ngd" => Some(Self::Ngd),
            "ring" => Some(Self::Ring),
            "reng" => Some(Self::Reng),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    /// α
    pub learning_rate: f64,
    /// ρ, the initial damping coefficient.
    pub rho: f64,
    /// φ; `1.0` freezes the damping.
    pub lm_discount: f64,
    /// S
    pub skip_frequency: usize,
    /// Weight of the gradient-norm penalty (RENG only).
    pub grad_reg_coeff: f64,
    pub inverter: Inverter,
    /// Lazy refresh bound as a fraction of the smallest damped eigenvalue.
    pub lazy_bound: f64,
    pub penalty_epsilon: f64,
    pub seed: u64,
}

impl OptimizerConfig {
    /// Defaults per algorithm: `ρ = 1e-6` for NGD, `1e-4` for RING/RENG,
    /// unit learning rate for the natural-gradient family, `S = 4`.
    pub fn new(algorithm: Algorithm) -> Self {
        let (learning_rate, rho) = match algorithm {
            Algorithm::Sgd => (0.3, 0.0),
            Algorithm::Adaptive => (0.01, 0.0),
            Algorithm::Ngd => (1.0, 1e-6),
            Algorithm::Ring | Algorithm::Reng => (1.0, 1e-4),
        };
        Self {
            algorithm,
            learning_rate,
            rho,
            lm_discount: 0.995,
            skip_frequency: 4,
            grad_reg_coeff: if algorithm == Algorithm::Reng { 0.01 } else { 0.0 },
            inverter: Inverter::Newton(NewtonConfig::default()),
            lazy_bound: DEFAULT_LAZY_BOUND,
            penalty_epsilon: DEFAULT_PENALTY_EPSILON,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.skip_frequency == 0 {
            return bad("skip_frequency must be >= 1");
        }
        if !(self.lm_discount > 0.0 && self.lm_discount <= 1.0) {
            return bad("lm_discount must lie in (0, 1]");
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad("rho must be finite and nonnegative");
        }
        if !(self.grad_reg_coeff >= 0.0 && self.grad_reg_coeff.is_finite()) {
            return bad("grad_reg_coeff must be finite and nonnegative");
        }
        if !(self.lazy_bound > 0.0) || !(self.penalty_epsilon > 0.0) {
            return bad("lazy_bound and penalty_epsilon must be positive");
        }
        if let Inverter::Newton(n) = &self.inverter {
            n.validate().map_err(|e| OptimError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    /// Batch loss before the update.
    pub loss: f64,
    /// `‖∇L‖₂` of the data gradient before the update.
    pub grad_norm: f64,
    /// Damping coefficient ρ used by this step.
    pub damping: f64,
    /// Whether the Fisher factors were re-estimated this step.
    pub refreshed: bool,
    pub duration: Duration,
}

impl StepReport {
    /// Equality on every field except wall-clock duration.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.iteration == other.iteration
            && self.loss.to_bits() == other.loss.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
            && self.damping.to_bits() == other.damping.to_bits()
            && self.refreshed == other.refreshed
    }
}

fn global_norm(mats: &[Mat]) -> f64 {
    mats.iter()
        .flat_map(|m| m.as_slice())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn frob_inner(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).sum::<f64>())
        .sum()
}

/// Plain gradient descent: `W_i ← W_i − α ∇_{W_i} L`.
pub fn step_sgd(net: &mut Network, x: &Mat, y: &Mat, learning_rate: f64, iteration: usize) -> Result<StepReport, OptimError> {
    let start = Instant::now();
    let (l, g) = loss_and_grad(net, x, y)?;
    if !l.is_finite() {
        return Err(OptimError::NonFiniteLoss { iteration });
    }
    net.apply_update(&g, -learning_rate)?;
    Ok(StepReport {
        iteration,
        loss: l,
        grad_norm: global_norm(&g),
        damping: 0.0,
        refreshed: false,
        duration: start.elapsed(),
    })
}

/// `−(α/L) Γ̃⁻¹ G_i Λ̃⁻¹` per layer: the weight increments of a natural step.
pub fn natural_update(
    factors: &FisherFactors,
    grads: &[Mat],
    learning_rate: f64,
    max_staleness: usize,
) -> Result<Vec<Mat>, OptimError> {
    let scale = -learning_rate / grads.len() as f64;
    let dirs = factors.natural_directions(grads, max_staleness)?;
    Ok(dirs.into_iter().map(|d| d.scale(scale)).collect())
}

/// Stateful optimizer: owns the Fisher factors, the current damping and the
/// iteration counter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    iteration: usize,
    rho: f64,
    factors: Option<FisherFactors>,
    second_moment: Option<Vec<Mat>>,
}

const ADAPTIVE_DECAY: f64 = 0.9;
const ADAPTIVE_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self, OptimError> {
        cfg.validate()?;
        Ok(Self {
            rho: cfg.rho,
            cfg,
            iteration: 0,
            factors: None,
            second_moment: None,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Jumps the iteration counter; refresh scheduling and output sampling
    /// are functions of it.
    pub fn set_iteration(&mut self, iteration: usize) {
        self.iteration = iteration;
    }

    /// Current damping coefficient ρ.
    pub fn damping(&self) -> f64 {
        self.rho
    }

    pub fn factors(&self) -> Option<&FisherFactors> {
        self.factors.as_ref()
    }

    /// One step on the batch `(x, y)`.
    pub fn step(&mut self, net: &mut Network, x: &Mat, y: &Mat) -> Result<StepReport, OptimError> {
        let report = match self.cfg.algorithm {
            Algorithm::Sgd => step_sgd(net, x, y, self.cfg.learning_rate, self.iteration),
            Algorithm::Adaptive => self.step_adaptive(net, x, y),
            Algorithm::Ngd => self.step_ngd(net, x, y),
            Algorithm::Ring => self.step_ring(net, x, y),
            Algorithm::Reng => self.step_reng(net, x, y),
        }?;
        self.iteration += 1;
        Ok(report)
    }

    fn step_adaptive(&mut self, net: &mut Network, x: &Mat, y: &Mat) -> Result<StepReport, OptimError> {
        let start = Instant::now();
        let (l, g) = loss_and_grad(net, x, y)?;
        if !l.is_finite() {
            return Err(OptimError::NonFiniteLoss {
                iteration: self.iteration,
            });
        }
        let v = self
            .second_moment
            .get_or_insert_with(|| g.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect());
        let mut deltas = Vec::with_capacity(g.len());
        for (vi, gi) in v.iter_mut().zip(&g) {
            for (s, &gr) in vi.as_mut_slice().iter_mut().zip(gi.as_slice()) {
                *s = ADAPTIVE_DECAY * *s + (1.0 - ADAPTIVE_DECAY) * gr * gr;
            }
            deltas.push(Mat::from_fn(gi.rows(), gi.cols(), |r, c| {
                gi[(r, c)] / (vi[(r, c)].sqrt() + ADAPTIVE_EPS)
            }));
        }
        net.apply_update(&deltas, -self.cfg.learning_rate)?;
        Ok(StepReport {
            iteration: self.iteration,
            loss: l,
            grad_norm: global_norm(&g),
            damping: 0.0,
            refreshed: false,
            duration: start.elapsed(),
        })
    }

    /// Natural-gradient step with Tikhonov damping `λ = ρ`.
    pub fn step_ngd(&mut self, net: &mut Network, x: &Mat, y: &Mat) -> Result<StepReport, OptimError> {
        self.step_natural(net, x, y, DampingVariant::Tikhonov, false)
    }

    /// Natural-gradient step with per-factor damping `λ = √ρ‖·‖₂`.
    pub fn step_ring(&mut self, net: &mut Network, x: &Mat, y: &Mat) -> Result<StepReport, OptimError> {
        self.step_natural(net, x, y, DampingVariant::Ring, false)
    }

    /// Natural-gradient step on the gradient-norm regularized loss with
    /// damping `λ = √ρ`.
    pub fn step_reng(&mut self, net: &mut Network, x: &Mat, y: &Mat) -> Result<StepReport, OptimError> {
        self.step_natural(net, x, y, DampingVariant::Reng, true)
    }

    fn sampling_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.iteration as u64);
        rng
    }

    fn step_natural(
        &mut self,
        net: &mut Network,
        x: &Mat,
        y: &Mat,
        variant: DampingVariant,
        explicit_penalty: bool,
    ) -> Result<StepReport, OptimError> {
        let start = Instant::now();
        let iteration = self.iteration;
        let (pred, mut cache) = forward(net, x)?;
        let loss_before = loss(&pred, y)?;
        if !loss_before.is_finite() {
            return Err(OptimError::NonFiniteLoss { iteration });
        }
        let grads = backward(net, &mut cache, &pred, y)?;
        let grad_norm = global_norm(&grads);

        let mut effective = grads.clone();
        if explicit_penalty && self.cfg.grad_reg_coeff > 0.0 {
            let pen = penalty_from_grad(net, x, y, &grads, self.cfg.grad_reg_coeff, self.cfg.penalty_epsilon)?;
            for (e, p) in effective.iter_mut().zip(&pen) {
                e.axpy(1.0, p).map_err(ModelError::from)?;
            }
        }

        let rho = self.rho;
        let mode = DampingMode::new(variant, rho);
        let s = self.cfg.skip_frequency;
        let mut refreshed = iteration % s == 0 || self.factors.is_none();
        if !refreshed {
            let factors = self.factors.as_mut().expect("checked above");
            match factors.lazy_refresh(&mode, self.cfg.lazy_bound) {
                Ok(()) => {}
                Err(FisherError::PerturbationTooLarge { .. }) => refreshed = true,
                Err(e) => return Err(e.into()),
            }
        }
        if refreshed {
            let sampled = sample_outputs(&pred, &mut self.sampling_rng());
            backward(net, &mut cache, &pred, &sampled)?;
            let mut factors = estimate_factors(&cache)?;
            regularize_and_invert(&mut factors, &mode, &self.cfg.inverter)?;
            self.factors = Some(factors);
        }
        let factors = self.factors.as_ref().expect("factors set");

        let deltas = natural_update(factors, &effective, self.cfg.learning_rate, s)?;
        net.apply_update(&deltas, 1.0)?;

        if self.cfg.lm_discount < 1.0 {
            // Quadratic model of the data loss under the damped factored Fisher.
            let mut curvature = 0.0;
            for (l, d) in factors.layers.iter().zip(&deltas) {
                let fd = l.apply_damped(d)?;
                curvature += frob_inner(std::slice::from_ref(d), std::slice::from_ref(&fd));
            }
            let predicted = -(frob_inner(&grads, &deltas) + 0.5 * curvature);
            let (after, _) = forward(net, x)?;
            let loss_after = loss(&after, y)?;
            self.rho = lm_damping_update(rho, loss_before, loss_after, predicted, self.cfg.lm_discount);
        }

        Ok(StepReport {
            iteration,
            loss: loss_before,
            grad_norm,
            damping: rho,
            refreshed,
            duration: start.elapsed(),
        })
    }
}
