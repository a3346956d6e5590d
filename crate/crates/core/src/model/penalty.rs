use super::{flatten, loss_and_grad, unflatten, ModelError, Network};
use crate::linalg::Mat;

/// Default relative step for the finite-difference Hessian-vector product.
pub const DEFAULT_PENALTY_EPSILON: f64 = 1e-4;

/// `ρ · ∇(½‖∇L‖²) = ρ · H g` via a central difference along `ĝ = g/‖g‖`:
///
/// `H g ≈ ‖g‖ (∇L(θ + hĝ) − ∇L(θ − hĝ)) / 2h`,  `h = ε(1 + ‖θ‖)`.
///
/// Returns zeros when `ρ = 0` or the gradient vanishes.
pub fn penalty_gradient_fd<E>(
    theta: &[f64],
    grad: &[f64],
    rho: f64,
    epsilon: f64,
    mut grad_at: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
) -> Result<Vec<f64>, E> {
    let n = theta.len();
    let g_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rho == 0.0 || g_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let theta_norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = epsilon * (1.0 + theta_norm);
    let step: Vec<f64> = grad.iter().map(|g| h * g / g_norm).collect();
    let plus: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + s).collect();
    let minus: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t - s).collect();
    let gp = grad_at(&plus)?;
    let gm = grad_at(&minus)?;
    let scale = rho * g_norm / (2.0 * h);
    Ok(gp.iter().zip(&gm).map(|(a, b)| scale * (a - b)).collect())
}

/// Gradient of the gradient-norm penalty `ρ · ½‖∇L‖²` on a batch, per layer.
///
/// This is double backpropagation realised as a finite-difference
/// Hessian-vector product; see [`penalty_gradient_fd`].
pub fn grad_norm_penalty_grad(
    net: &Network,
    x: &Mat,
    y: &Mat,
    rho: f64,
    epsilon: f64,
) -> Result<Vec<Mat>, ModelError> {
    let (_, g) = loss_and_grad(net, x, y)?;
    penalty_from_grad(net, x, y, &g, rho, epsilon)
}

/// As [`grad_norm_penalty_grad`] but reusing an already computed batch
/// gradient.
pub(crate) fn penalty_from_grad(
    net: &Network,
    x: &Mat,
    y: &Mat,
    grad: &[Mat],
    rho: f64,
    epsilon: f64,
) -> Result<Vec<Mat>, ModelError> {
    if !(epsilon > 0.0) || rho < 0.0 {
        return Err(ModelError::InvalidNetwork(format!(
            "penalty needs rho >= 0 and epsilon > 0 (got {rho}, {epsilon})"
        )));
    }
    let shapes = net.shapes();
    let theta = net.params();
    let mut probe = net.clone();
    let flat = penalty_gradient_fd(&theta, &flatten(grad), rho, epsilon, |t| {
        probe.set_params(t)?;
        let (_, g) = loss_and_grad(&probe, x, y)?;
        Ok::<_, ModelError>(flatten(&g))
    })?;
    unflatten(&flat, &shapes)
}
