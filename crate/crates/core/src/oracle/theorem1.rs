//! Full-batch output-space convergence experiment.
//!
//! A wide two-layer network is fit to teacher labels with the exact
//! gradient-regularized natural gradient. With `H` the `m × n` output
//! Jacobian and `r = ŷ − y`, the Fisher is `HᵀH` and the step
//! `(HᵀH + ρ̃I)⁻¹Hᵀr` is computed as `Hᵀ(HHᵀ + ρ̃I)⁻¹r`, where
//! `ρ̃ = ρ‖Hᵀr‖²`. Every iteration records the residual, the contraction
//! ratio, `κ(G)`, the Jacobian drift and the per-step bound factor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::OracleError;
use crate::fisher::Inverter;
use crate::kalman::{jacobian, KalmanError};
use crate::linalg::{solve, spectral_norm, symmetric_eigenvalues, LinalgError, Mat, SPECTRAL_TOL};
use crate::model::{forward, Activation, Head, Network};
use crate::optim::{Algorithm, Optimizer, OptimizerConfig};

/// Drift constant above which the stable-Jacobian assumption fails.
pub const STABLE_JACOBIAN_LIMIT: f64 = 0.5;
const GRAM_FLOOR: f64 = 1e-10;
const DRIFT_ITERS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherKind {
    /// Exact output-space Fisher via the Gram matrix.
    Exact,
    /// Kronecker-factored Fisher (RING step, refreshed every iteration).
    Factored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Config {
    pub input_dim: usize,
    pub width: usize,
    pub teacher_width: usize,
    pub samples: usize,
    pub iters: usize,
    pub rho: f64,
    pub seed: u64,
    /// The run stops early once the residual falls below this.
    pub stop_residual: f64,
    pub fisher: FisherKind,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Self {
            input_dim: 2,
            width: 256,
            teacher_width: 8,
            samples: 20,
            iters: 50,
            rho: 1e-4,
            seed: 0,
            stop_residual: 1e-10,
            fisher: FisherKind::Exact,
        }
    }
}

/// One iteration of the experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceDiagnostic {
    pub iteration: usize,
    /// `‖ŷ_k − y‖₂`
    pub residual: f64,
    /// `‖ŷ_{k+1} − y‖ / ‖ŷ_k − y‖`; absent on the last record.
    pub ratio: Option<f64>,
    /// `κ(G_k)`
    pub kappa: f64,
    /// `‖H_k − H₀‖₂`
    pub drift: f64,
    /// Drift constant `3‖H_k − H₀‖₂ / √λ_min(G₀)`.
    pub c_est: f64,
    /// `(2 + C)/(1 + C) + ρ κ(G_k) ‖ŷ_k − y‖²`
    pub m_k: f64,
    /// `(1 + C) M_k`
    pub bound_factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Outcome {
    pub records: Vec<ConvergenceDiagnostic>,
    /// `λ_min(G₀)`
    pub lambda_min0: f64,
    pub max_c: f64,
    /// Whether the drift constant stayed below [`STABLE_JACOBIAN_LIMIT`].
    pub within_stable_ball: bool,
}

impl Theorem1Outcome {
    pub fn final_residual(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.residual)
    }
}

impl From<KalmanError> for OracleError {
    fn from(e: KalmanError) -> Self {
        match e {
            KalmanError::Model(m) => OracleError::Model(m),
            KalmanError::Linalg(l) => OracleError::Linalg(l),
            other => OracleError::DimensionMismatch(other.to_string()),
        }
    }
}

/// Inputs `N(0, I)` labelled by a random tanh teacher with `N(0, 1)` hidden
/// biases, plus optional Gaussian label noise. Returns `(x, y, teacher)`.
pub fn teacher_data(
    samples: usize,
    input_dim: usize,
    teacher_width: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Mat, Mat, Network), OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut teacher = Network::random(&[input_dim, teacher_width, 1], Activation::Tanh, Head::Gaussian, true, &mut rng)?;
    let hidden = teacher.layer_mut(0);
    for r in 0..teacher_width {
        hidden.weights[(r, input_dim)] = StandardNormal.sample(&mut rng);
    }
    let x = Mat::from_fn(samples, input_dim, |_, _| StandardNormal.sample(&mut rng));
    let mut y = forward(&teacher, &x)?.0.outputs;
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).map_err(|e| OracleError::DimensionMismatch(e.to_string()))?;
        for v in y.as_mut_slice() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok((x, y, teacher))
}

/// Stacked per-sample Jacobians, `(m·d_o) × n`, sample-major.
pub fn output_jacobian(net: &Network, x: &Mat) -> Result<Mat, OracleError> {
    let d_o = net.output_dim();
    let n = net.num_params();
    let mut h = Mat::zeros(x.rows() * d_o, n);
    for b in 0..x.rows() {
        let xb = Mat::from_rows(&[x.row(b).to_vec()]);
        let hb = jacobian(net, &xb)?;
        for j in 0..d_o {
            h.row_mut(b * d_o + j).copy_from_slice(hb.row(j));
        }
    }
    Ok(h)
}

fn gram(h: &Mat) -> Mat {
    h.matmul(&h.transpose()).expect("conforming").symmetrized()
}

fn residual(net: &Network, x: &Mat, y: &Mat) -> Result<Vec<f64>, OracleError> {
    let (pred, _) = forward(net, x)?;
    Ok(pred.outputs.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a - b).collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn drift(h: &Mat, h0: &Mat) -> Result<f64, OracleError> {
    match spectral_norm(&h.sub(h0)?, DRIFT_ITERS, SPECTRAL_TOL) {
        Ok(v) => Ok(v),
        Err(LinalgError::ZeroMatrix) => Ok(0.0),
        Err(e) => Err(e.into()),
    }
}

fn run_with<F>(
    net: &mut Network,
    x: &Mat,
    y: &Mat,
    iters: usize,
    rho: f64,
    stop_residual: f64,
    mut step: F,
) -> Result<Theorem1Outcome, OracleError>
where
    F: FnMut(&mut Network, &Mat, &[f64]) -> Result<(), OracleError>,
{
    if y.shape() != (x.rows(), net.output_dim()) {
        return Err(OracleError::DimensionMismatch(format!(
            "targets {:?} for {} samples with {} outputs",
            y.shape(),
            x.rows(),
            net.output_dim()
        )));
    }
    let h0 = output_jacobian(net, x)?;
    let lambda_min0 = symmetric_eigenvalues(&gram(&h0))?[0];
    if !(lambda_min0 >= GRAM_FLOOR) {
        return Err(OracleError::GramSingular { lambda_min: lambda_min0 });
    }
    let sqrt_l0 = lambda_min0.sqrt();

    let mut records: Vec<ConvergenceDiagnostic> = Vec::with_capacity(iters + 1);
    let mut h = h0.clone();
    for k in 0..=iters {
        if k > 0 {
            h = output_jacobian(net, x)?;
        }
        let r = residual(net, x, y)?;
        let res = norm(&r);
        let eig = symmetric_eigenvalues(&gram(&h))?;
        let (lo, hi) = (eig[0], eig[eig.len() - 1]);
        let kappa = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        let d = drift(&h, &h0)?;
        let c = 3.0 * d / sqrt_l0;
        let m_k = (2.0 + c) / (1.0 + c) + rho * kappa * res * res;
        if let Some(prev) = records.last_mut() {
            prev.ratio = Some(res / prev.residual);
        }
        records.push(ConvergenceDiagnostic {
            iteration: k,
            residual: res,
            ratio: None,
            kappa,
            drift: d,
            c_est: c,
            m_k,
            bound_factor: (1.0 + c) * m_k,
        });
        if k == iters || res < stop_residual || !res.is_finite() {
            break;
        }
        step(net, &h, &r)?;
    }
    let max_c = records.iter().map(|r| r.c_est).fold(0.0, f64::max);
    Ok(Theorem1Outcome {
        records,
        lambda_min0,
        max_c,
        within_stable_ball: max_c < STABLE_JACOBIAN_LIMIT,
    })
}

/// Exact gradient-regularized natural gradient in output space, full batch.
pub fn run_output_space_ngd(
    net: &mut Network,
    x: &Mat,
    y: &Mat,
    iters: usize,
    rho: f64,
    stop_residual: f64,
) -> Result<Theorem1Outcome, OracleError> {
    run_with(net, x, y, iters, rho, stop_residual, |net, h, r| {
        let grad = h.t_matvec(r);
        let reg = rho * grad.iter().map(|g| g * g).sum::<f64>();
        let g = gram(h).add_diag(reg);
        let z = solve(&g, &Mat::column(r))?;
        let delta = h.t_matvec(z.as_slice());
        let theta: Vec<f64> = net.params().iter().zip(&delta).map(|(t, d)| t - d).collect();
        net.set_params(&theta)?;
        Ok(())
    })
}

/// Teacher data, a fresh student of the configured width, and a full-batch
/// run with the configured Fisher.
pub fn run_theorem1_experiment(cfg: &Theorem1Config) -> Result<Theorem1Outcome, OracleError> {
    let (x, y, _) = teacher_data(cfg.samples, cfg.input_dim, cfg.teacher_width, 0.0, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_57d3);
    let mut net = Network::random(&[cfg.input_dim, cfg.width, 1], Activation::Tanh, Head::Gaussian, true, &mut rng)?;
    let hidden = net.layer_mut(0);
    for r in 0..cfg.width {
        hidden.weights[(r, cfg.input_dim)] = StandardNormal.sample(&mut rng);
    }
    match cfg.fisher {
        FisherKind::Exact => run_output_space_ngd(&mut net, &x, &y, cfg.iters, cfg.rho, cfg.stop_residual),
        FisherKind::Factored => {
            let mut oc = OptimizerConfig::new(Algorithm::Ring);
            oc.rho = cfg.rho;
            oc.skip_frequency = 1;
            oc.lm_discount = 1.0;
            oc.inverter = Inverter::Exact;
            oc.seed = cfg.seed;
            let mut opt = Optimizer::new(oc)?;
            run_with(&mut net, &x, &y, cfg.iters, cfg.rho, cfg.stop_residual, |net, _, _| {
                opt.step(net, &x, &y)?;
                Ok(())
            })
        }
    }
}
