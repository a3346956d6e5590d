//! Kronecker-factored Fisher blocks.
//!
//! For layer `i` the Fisher block is approximated by `Λ ⊗ Γ` with
//! `Λ = mean x̄ x̄ᵀ` (activation matrix, `ω × ω`) and `Γ = mean e eᵀ` (error
//! matrix, `ω' × ω'`), both estimated from errors backpropagated from outputs
//! sampled from the model's own predictive distribution.
//!
//! Vectorization convention: a layer gradient `G` is `ω' × ω` and `vec` stacks
//! columns. Then `(Λ̃ ⊗ Γ̃)⁻¹ vec(G) = vec(Γ̃⁻¹ G Λ̃⁻¹)`, so the error-side
//! inverse multiplies from the left and the activation-side inverse from the
//! right.

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{
    exact_inverse, lazy_inverse_update, newton_schulz_inverse, spectral_norm, LinalgError, Mat,
    NewtonConfig, SPECTRAL_MAX_ITERS, SPECTRAL_TOL,
};
use crate::model::LayerCache;

/// Acceptance gate for a freshly inverted factor: `‖Ã Ã⁻¹ − I‖_F`.
pub const INVERSE_GATE: f64 = 1e-4;
/// Default fraction of the smallest eigenvalue of a damped factor that a lazy
/// damping change may shift by.
pub const DEFAULT_LAZY_BOUND: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FisherError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("layer cache holds no backpropagated errors")]
    MissingErrors,
    #[error("inversion failed for layer {layer}: {reason}")]
    InversionFailed { layer: usize, reason: String },
    #[error("factors are {staleness} steps old, limit is {limit}")]
    StaleFactors { staleness: usize, limit: usize },
    #[error("damping change {d_lambda:e} exceeds the lazy bound {bound:e}")]
    PerturbationTooLarge { d_lambda: f64, bound: f64 },
    #[error("factors have not been inverted")]
    NotInverted,
    #[error("gradient shape {grad:?} does not match factors ({rows}, {cols})")]
    DimensionMismatch {
        grad: (usize, usize),
        rows: usize,
        cols: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DampingVariant {
    /// `λ = ρ` on both factors.
    Tikhonov,
    /// `λ_Λ = √ρ‖Λ‖₂`, `λ_Γ = √ρ‖Γ‖₂`.
    Ring,
    /// `λ = √ρ` on both factors.
    Reng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingMode {
    pub variant: DampingVariant,
    pub rho: f64,
}

impl DampingMode {
    pub fn new(variant: DampingVariant, rho: f64) -> Self {
        Self { variant, rho }
    }

    /// `(λ_Λ, λ_Γ)` for factors with the given spectral norms.
    pub fn lambdas(&self, activation_norm: f64, error_norm: f64) -> (f64, f64) {
        match self.variant {
            DampingVariant::Tikhonov => (self.rho, self.rho),
            DampingVariant::Ring => {
                let s = self.rho.sqrt();
                (s * activation_norm, s * error_norm)
            }
            DampingVariant::Reng => {
                let s = self.rho.sqrt();
                (s, s)
            }
        }
    }
}

/// How damped factors are inverted at refresh time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Inverter {
    /// Newton–Schulz, with one exact-inverse fallback.
    Newton(NewtonConfig),
    Exact,
}

impl Default for Inverter {
    fn default() -> Self {
        Self::Newton(NewtonConfig::default())
    }
}

/// Kronecker factors of one layer and their damped inverses.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    /// Λ
    pub activation: Mat,
    /// Γ
    pub error: Mat,
    pub activation_norm: f64,
    pub error_norm: f64,
    pub activation_inv: Option<Mat>,
    pub error_inv: Option<Mat>,
    pub activation_damping: f64,
    pub error_damping: f64,
    /// Lower bounds on the smallest eigenvalue of `Λ̃` and `Γ̃` at refresh.
    activation_floor: f64,
    error_floor: f64,
    /// Steps since the last full refresh.
    pub staleness: usize,
}

impl LayerFactors {
    /// Wraps given factor matrices; spectral norms are computed here.
    pub fn from_factors(activation: Mat, error: Mat) -> Self {
        let norm = |m: &Mat| spectral_norm(m, SPECTRAL_MAX_ITERS, SPECTRAL_TOL).unwrap_or(0.0);
        Self {
            activation_norm: norm(&activation),
            error_norm: norm(&error),
            activation,
            error,
            activation_inv: None,
            error_inv: None,
            activation_damping: 0.0,
            error_damping: 0.0,
            activation_floor: 0.0,
            error_floor: 0.0,
            staleness: 0,
        }
    }

    /// Weight shape `(ω', ω)` this layer's factors precondition.
    pub fn grad_shape(&self) -> (usize, usize) {
        (self.error.rows(), self.activation.rows())
    }

    /// `Λ̃ = Λ + λ_Λ I`
    pub fn damped_activation(&self) -> Mat {
        self.activation.add_diag(self.activation_damping)
    }

    /// `Γ̃ = Γ + λ_Γ I`
    pub fn damped_error(&self) -> Mat {
        self.error.add_diag(self.error_damping)
    }

    fn invert(&mut self, layer: usize, mode: &DampingMode, inverter: &Inverter) -> Result<(), FisherError> {
        let (la, le) = mode.lambdas(self.activation_norm, self.error_norm);
        let a = self.activation.add_diag(la);
        let e = self.error.add_diag(le);
        let a_inv = invert_gated(&a, inverter).map_err(|reason| FisherError::InversionFailed { layer, reason })?;
        let e_inv = invert_gated(&e, inverter).map_err(|reason| FisherError::InversionFailed { layer, reason })?;
        self.activation_floor = eigen_floor(&a_inv, la);
        self.error_floor = eigen_floor(&e_inv, le);
        self.activation_inv = Some(a_inv);
        self.error_inv = Some(e_inv);
        self.activation_damping = la;
        self.error_damping = le;
        self.staleness = 0;
        Ok(())
    }

    /// First-order correction of both inverses for new damping values.
    ///
    /// Each shift must satisfy `|dλ| ≤ bound_frac · λ_min(Ã)`, where `λ_min` is
    /// bounded below by both the stored damping and `1/‖Ã⁻¹‖₂` from the last
    /// refresh.
    pub fn lazy_refresh(
        &mut self,
        new_activation_damping: f64,
        new_error_damping: f64,
        bound_frac: f64,
    ) -> Result<(), FisherError> {
        let (Some(a_inv), Some(e_inv)) = (&self.activation_inv, &self.error_inv) else {
            return Err(FisherError::NotInverted);
        };
        let da = new_activation_damping - self.activation_damping;
        let de = new_error_damping - self.error_damping;
        let bound_a = bound_frac * self.activation_floor;
        let bound_e = bound_frac * self.error_floor;
        if da.abs() > bound_a {
            return Err(FisherError::PerturbationTooLarge {
                d_lambda: da,
                bound: bound_a,
            });
        }
        if de.abs() > bound_e {
            return Err(FisherError::PerturbationTooLarge {
                d_lambda: de,
                bound: bound_e,
            });
        }
        let a_next = lazy_inverse_update(a_inv, da);
        let e_next = lazy_inverse_update(e_inv, de);
        self.activation_inv = Some(a_next);
        self.error_inv = Some(e_next);
        self.activation_damping = new_activation_damping;
        self.error_damping = new_error_damping;
        // The floor tracks the shift so later bounds stay relative to Ã.
        self.activation_floor = (self.activation_floor + da).max(0.0);
        self.error_floor = (self.error_floor + de).max(0.0);
        self.staleness += 1;
        Ok(())
    }

    /// `Γ̃⁻¹ G Λ̃⁻¹`, the damped natural-gradient direction for this layer.
    pub fn natural_direction(&self, grad: &Mat, max_staleness: usize) -> Result<Mat, FisherError> {
        if self.staleness > max_staleness {
            return Err(FisherError::StaleFactors {
                staleness: self.staleness,
                limit: max_staleness,
            });
        }
        let (Some(a_inv), Some(e_inv)) = (&self.activation_inv, &self.error_inv) else {
            return Err(FisherError::NotInverted);
        };
        if grad.shape() != self.grad_shape() {
            return Err(FisherError::DimensionMismatch {
                grad: grad.shape(),
                rows: self.error.rows(),
                cols: self.activation.rows(),
            });
        }
        Ok(e_inv.matmul(grad)?.matmul(a_inv)?)
    }

    /// `Γ̃ Δ Λ̃`, i.e. the damped factored Fisher applied to `vec(Δ)`.
    pub fn apply_damped(&self, delta: &Mat) -> Result<Mat, FisherError> {
        Ok(self.damped_error().matmul(delta)?.matmul(&self.damped_activation())?)
    }
}

fn eigen_floor(inverse: &Mat, damping: f64) -> f64 {
    let inv_norm = spectral_norm(inverse, SPECTRAL_MAX_ITERS, SPECTRAL_TOL).unwrap_or(f64::INFINITY);
    damping.max(1.0 / inv_norm)
}

fn gate_residual(a: &Mat, a_inv: &Mat) -> f64 {
    a.matmul(a_inv)
        .and_then(|p| p.sub(&Mat::identity(a.rows())))
        .map(|r| r.frobenius_norm())
        .unwrap_or(f64::INFINITY)
}

fn invert_gated(a: &Mat, inverter: &Inverter) -> Result<Mat, String> {
    if let Inverter::Newton(cfg) = inverter {
        if let Ok(res) = newton_schulz_inverse(a, cfg) {
            if res.inverse.is_finite() && gate_residual(a, &res.inverse) <= INVERSE_GATE {
                return Ok(res.inverse);
            }
        }
    }
    let inv = exact_inverse(a).map_err(|e| e.to_string())?;
    let r = gate_residual(a, &inv);
    if r <= INVERSE_GATE {
        Ok(inv)
    } else {
        Err(format!("inverse residual {r:e} above gate {INVERSE_GATE:e}"))
    }
}

/// Factors for every layer of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherFactors {
    pub layers: Vec<LayerFactors>,
}

impl FisherFactors {
    /// Largest staleness across layers.
    pub fn staleness(&self) -> usize {
        self.layers.iter().map(|l| l.staleness).max().unwrap_or(0)
    }

    /// Applies [`LayerFactors::lazy_refresh`] to every layer with the damping
    /// values `mode` implies for the stored factor norms. Either all layers
    /// are updated or none.
    pub fn lazy_refresh(&mut self, mode: &DampingMode, bound_frac: f64) -> Result<(), FisherError> {
        let mut next = self.layers.clone();
        for l in &mut next {
            let (la, le) = mode.lambdas(l.activation_norm, l.error_norm);
            l.lazy_refresh(la, le, bound_frac)?;
        }
        self.layers = next;
        Ok(())
    }

    pub fn natural_directions(&self, grads: &[Mat], max_staleness: usize) -> Result<Vec<Mat>, FisherError> {
        self.layers
            .iter()
            .zip(grads)
            .map(|(l, g)| l.natural_direction(g, max_staleness))
            .collect()
    }
}

/// `Λ_i = mean x̄ x̄ᵀ` and `Γ_i = mean e eᵀ` for every layer of the cache.
///
/// The cache errors should come from a backward pass against outputs sampled
/// from the model distribution.
pub fn estimate_factors(cache: &LayerCache) -> Result<FisherFactors, FisherError> {
    if cache.inputs.is_empty() || cache.batch_size() == 0 {
        return Err(FisherError::EmptyBatch);
    }
    if !cache.has_errors() {
        return Err(FisherError::MissingErrors);
    }
    let inv_m = 1.0 / cache.batch_size() as f64;
    let layers = cache
        .inputs
        .iter()
        .zip(&cache.errors)
        .map(|(x, e)| {
            let mut lambda = x.t_matmul(x).expect("same rows");
            lambda.scale_in_place(inv_m);
            let mut gamma = e.t_matmul(e).expect("same rows");
            gamma.scale_in_place(inv_m);
            LayerFactors::from_factors(lambda, gamma)
        })
        .collect();
    Ok(FisherFactors { layers })
}

/// Damps and inverts every layer's factors; resets staleness.
pub fn regularize_and_invert(
    factors: &mut FisherFactors,
    mode: &DampingMode,
    inverter: &Inverter,
) -> Result<(), FisherError> {
    factors
        .layers
        .par_iter_mut()
        .enumerate()
        .try_for_each(|(i, l)| l.invert(i, mode, inverter))
}
