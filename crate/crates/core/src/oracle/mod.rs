//! Brute-force reference computations.
//!
//! Nothing here is meant for production sizes: matrices are built
//! explicitly and inverted exactly so the factored and diagonal fast paths
//! have something independent to be compared against.

mod theorem1;

pub use theorem1::{
    output_jacobian, run_output_space_ngd, run_theorem1_experiment, teacher_data, ConvergenceDiagnostic,
    FisherKind, Theorem1Config, Theorem1Outcome, STABLE_JACOBIAN_LIMIT,
};

use thiserror::Error;

use crate::fisher::{FisherError, LayerFactors};
use crate::linalg::{exact_inverse, LinalgError, Mat};
use crate::model::{flatten, loss, forward, unflatten, LayerCache, ModelError, Network};
use crate::optim::OptimError;

/// Largest layer input/output width for [`explicit_fisher`].
pub const EXPLICIT_FISHER_CAP: usize = 6;
/// Largest parameter count for [`full_cov_kalman_step`].
pub const FULL_KALMAN_CAP: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("{what} dimension {dim} exceeds oracle cap {cap}")]
    TooLarge { what: &'static str, dim: usize, cap: usize },
    #[error("innovation matrix is singular")]
    SingularInnovation,
    #[error("initial Gram matrix is singular: smallest eigenvalue {lambda_min:e}")]
    GramSingular { lambda_min: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fisher(#[from] FisherError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

fn check_layer_dims(rows: usize, cols: usize) -> Result<(), OracleError> {
    for dim in [rows, cols] {
        if dim > EXPLICIT_FISHER_CAP {
            return Err(OracleError::TooLarge {
                what: "layer",
                dim,
                cap: EXPLICIT_FISHER_CAP,
            });
        }
    }
    Ok(())
}

/// `mean_b (x̄_b x̄_bᵀ) ⊗ (e_b e_bᵀ)` for one layer, built sample by sample.
pub fn explicit_fisher(cache: &LayerCache, layer: usize) -> Result<Mat, OracleError> {
    if !cache.has_errors() {
        return Err(FisherError::MissingErrors.into());
    }
    let x = cache
        .inputs
        .get(layer)
        .ok_or_else(|| OracleError::DimensionMismatch(format!("no layer {layer}")))?;
    let e = &cache.errors[layer];
    check_layer_dims(x.cols(), e.cols())?;
    let m = x.rows();
    if m == 0 {
        return Err(FisherError::EmptyBatch.into());
    }
    let size = x.cols() * e.cols();
    let mut total = Mat::zeros(size, size);
    for b in 0..m {
        let xx = Mat::outer(x.row(b), x.row(b));
        let ee = Mat::outer(e.row(b), e.row(b));
        total.axpy(1.0, &xx.kron(&ee))?;
    }
    total.scale_in_place(1.0 / m as f64);
    Ok(total)
}

/// `‖mean(x̄x̄ᵀ ⊗ eeᵀ) − mean(x̄x̄ᵀ) ⊗ mean(eeᵀ)‖_F` for one layer.
pub fn factorization_gap(cache: &LayerCache, layer: usize) -> Result<f64, OracleError> {
    let exact = explicit_fisher(cache, layer)?;
    let x = &cache.inputs[layer];
    let e = &cache.errors[layer];
    let inv_m = 1.0 / x.rows() as f64;
    let lambda = x.t_matmul(x)?.scale(inv_m);
    let gamma = e.t_matmul(e)?.scale(inv_m);
    Ok(exact.sub(&lambda.kron(&gamma))?.frobenius_norm())
}

/// `(Λ̃ ⊗ Γ̃)⁻¹ vec(G)` with the Kronecker product formed explicitly and
/// inverted exactly. The damping stored in `factors` is used.
pub fn explicit_natural_direction(factors: &LayerFactors, grad: &Mat) -> Result<Mat, OracleError> {
    let (rows, cols) = factors.grad_shape();
    check_layer_dims(cols, rows)?;
    if grad.shape() != (rows, cols) {
        return Err(OracleError::DimensionMismatch(format!(
            "gradient {:?} vs layer {:?}",
            grad.shape(),
            (rows, cols)
        )));
    }
    let big = factors.damped_activation().kron(&factors.damped_error());
    let v = exact_inverse(&big)?.matvec(&grad.vec_col_major())?;
    Ok(Mat::from_col_major(rows, cols, &v)?)
}

/// Result of a full-covariance Kalman update.
#[derive(Debug, Clone, PartialEq)]
pub struct FullCovUpdate {
    pub mu: Vec<f64>,
    /// Covariance form `(I − KH)Σ(I − KH)ᵀ + K R̃ Kᵀ`.
    pub sigma: Mat,
    /// Information form `Σ⁻¹ + Hᵀ R̃⁻¹ H`.
    pub precision: Mat,
}

/// Exact Kalman update with full matrices and the regularized noise
/// `R̃ = R(I + ρR)⁻¹`.
pub fn full_cov_kalman_step(
    mu: &[f64],
    sigma: &Mat,
    h: &Mat,
    r: &Mat,
    y: &[f64],
    y_hat: &[f64],
    rho: f64,
) -> Result<FullCovUpdate, OracleError> {
    let n = mu.len();
    let d = y.len();
    if n > FULL_KALMAN_CAP {
        return Err(OracleError::TooLarge {
            what: "parameter",
            dim: n,
            cap: FULL_KALMAN_CAP,
        });
    }
    if sigma.shape() != (n, n) || h.shape() != (d, n) || r.shape() != (d, d) || y_hat.len() != d {
        return Err(OracleError::DimensionMismatch(format!(
            "Σ {:?}, H {:?}, R {:?}, n = {n}, d = {d}",
            sigma.shape(),
            h.shape(),
            r.shape()
        )));
    }
    let shifted = r.scale(rho).add_diag(1.0);
    let r_reg = r.matmul(&exact_inverse(&shifted)?)?.symmetrized();

    let sht = sigma.matmul(&h.transpose())?;
    let innovation = h.matmul(&sht)?.add(&r_reg)?.symmetrized();
    let s_inv = exact_inverse(&innovation).map_err(|_| OracleError::SingularInnovation)?;
    let gain = sht.matmul(&s_inv)?;

    let residual: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| a - b).collect();
    let step = gain.matvec(&residual)?;
    let mu_next = mu.iter().zip(&step).map(|(a, b)| a + b).collect();

    let a = gain.matmul(h)?.scale(-1.0).add_diag(1.0);
    let joseph = a.matmul(sigma)?.matmul(&a.transpose())?;
    let noise_part = gain.matmul(&r_reg)?.matmul(&gain.transpose())?;
    let sigma_next = joseph.add(&noise_part)?.symmetrized();

    let mut precision = exact_inverse(sigma)?;
    if h.max_abs() > 0.0 {
        let info = h.t_matmul(&exact_inverse(&r_reg)?.matmul(h)?)?;
        precision = precision.add(&info)?;
    }
    Ok(FullCovUpdate {
        mu: mu_next,
        sigma: sigma_next,
        precision: precision.symmetrized(),
    })
}

/// Central-difference gradient of the batch loss, per layer.
pub fn finite_diff_grad(net: &Network, x: &Mat, y: &Mat, epsilon: f64) -> Result<Vec<Mat>, OracleError> {
    let theta = net.params();
    let mut probe = net.clone();
    let mut eval = |t: &[f64]| -> Result<f64, OracleError> {
        probe.set_params(t)?;
        let (pred, _) = forward(&probe, x)?;
        Ok(loss(&pred, y)?)
    };
    let mut grad = vec![0.0; theta.len()];
    let mut t = theta.clone();
    for i in 0..theta.len() {
        t[i] = theta[i] + epsilon;
        let up = eval(&t)?;
        t[i] = theta[i] - epsilon;
        let down = eval(&t)?;
        t[i] = theta[i];
        grad[i] = (up - down) / (2.0 * epsilon);
    }
    Ok(unflatten(&grad, &net.shapes())?)
}

/// Largest relative entrywise difference between two per-layer gradients,
/// with the denominator floored at `floor`.
pub fn max_relative_error(a: &[Mat], b: &[Mat], floor: f64) -> f64 {
    flatten(a)
        .iter()
        .zip(flatten(b))
        .map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
        .fold(0.0, f64::max)
}
