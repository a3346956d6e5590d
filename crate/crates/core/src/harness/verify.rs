//! Randomised equivalence checks of the fast paths against the brute-force
//! oracles. Each check is seeded and deterministic.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::fisher::{estimate_factors, regularize_and_invert, DampingMode, DampingVariant, Inverter};
use crate::kalman::{
    kalman_ngd_equivalence_check, regularized_gain, standard_gain, GainMode, LinearGaussianInstance,
    ObservationNoise,
};
use crate::linalg::{
    exact_inverse, lazy_inverse_update, newton_schulz_inverse, spectral_norm, Mat, NewtonConfig, NewtonOrder,
};
use crate::model::{
    flatten, grad_norm_penalty_grad, loss_and_grad, Activation, Head, LayerCache, Network, DEFAULT_PENALTY_EPSILON,
};
use crate::oracle::{explicit_natural_direction, finite_diff_grad, max_relative_error};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub duration: Duration,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| normal(rng))
}

/// Random orthogonal matrix by Gram–Schmidt on a Gaussian matrix.
fn orthogonal(n: usize, rng: &mut impl Rng) -> Mat {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.iter().map(|x| x / norm).collect());
        }
    }
    Mat::from_fn(n, n, |i, j| cols[j][i])
}

/// SPD matrix with eigenvalues log-uniform in `[lo, lo·cond]`, both ends hit.
pub fn random_spd_with_condition(n: usize, lo: f64, cond: f64, rng: &mut impl Rng) -> Mat {
    let q = orthogonal(n, rng);
    let eig: Vec<f64> = (0..n)
        .map(|i| match i {
            0 => lo,
            1 => lo * cond,
            _ => lo * cond.powf(rng.random::<f64>()),
        })
        .collect();
    let qd = Mat::from_fn(n, n, |i, j| q[(i, j)] * eig[j]);
    qd.matmul(&q.transpose()).expect("square").symmetrized()
}

/// Factored natural direction against the explicit Kronecker inverse.
pub fn check_factored_fisher(cases: usize, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let cols = rng.random_range(1..=4);
        let rows = rng.random_range(1..=4);
        let m = rng.random_range(1..=8);
        let x = gaussian(m, cols, &mut rng);
        let e = gaussian(m, rows, &mut rng);
        let cache = LayerCache::from_parts(vec![x], vec![Mat::zeros(m, rows)], vec![e]);
        let variant = [DampingVariant::Tikhonov, DampingVariant::Ring, DampingVariant::Reng][rng.random_range(0..3)];
        let rho = 10f64.powf(rng.random_range(-3.0..0.0));
        let mut f = match estimate_factors(&cache) {
            Ok(f) => f,
            Err(e) => return (false, e.to_string()),
        };
        if let Err(e) = regularize_and_invert(&mut f, &DampingMode::new(variant, rho), &Inverter::Exact) {
            return (false, e.to_string());
        }
        let g = gaussian(rows, cols, &mut rng);
        let layer = &f.layers[0];
        let (fast, slow) = match (layer.natural_direction(&g, 0), explicit_natural_direction(layer, &g)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) => return (false, e.to_string()),
            (_, Err(e)) => return (false, e.to_string()),
        };
        worst = worst.max(fast.max_abs_diff(&slow) / slow.max_abs().max(f64::MIN_POSITIVE));
    }
    (worst <= 1e-8, format!("{cases} layers, max relative error {worst:.2e} (tol 1e-8)"))
}

/// Newton–Schulz convergence, monotonicity and order ranking.
pub fn check_newton_schulz(cases: usize, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_res = 0.0f64;
    let mut max_iters = 0;
    let mut monotone = true;
    let mut quartic_wins = 0;
    let iters_for = |a: &Mat, order: NewtonOrder| {
        let cfg = NewtonConfig {
            order,
            max_iters: 200,
            ..NewtonConfig::default()
        };
        newton_schulz_inverse(a, &cfg).map(|r| r.iterations)
    };
    for _ in 0..cases {
        let n = rng.random_range(2..=32);
        let cond = rng.random_range(1.0..=100.0);
        let a = random_spd_with_condition(n, 10f64.powf(rng.random_range(-2.0..2.0)), cond, &mut rng);
        let cfg = NewtonConfig {
            max_iters: 40,
            ..NewtonConfig::default()
        };
        let res = match newton_schulz_inverse(&a, &cfg) {
            Ok(r) => r,
            Err(e) => return (false, e.to_string()),
        };
        worst_res = worst_res.max(res.residual);
        max_iters = max_iters.max(res.iterations);
        monotone &= res.residuals.windows(2).all(|w| w[1] <= w[0]);
        match (iters_for(&a, NewtonOrder::Quartic), iters_for(&a, NewtonOrder::Quadratic)) {
            (Ok(q4), Ok(q2)) if q4 < q2 => quartic_wins += 1,
            (Ok(_), Ok(_)) => {}
            (Err(e), _) | (_, Err(e)) => return (false, e.to_string()),
        }
    }
    let frac = quartic_wins as f64 / cases as f64;
    let passed = worst_res < 1e-6 && monotone && frac >= 0.9;
    (
        passed,
        format!(
            "{cases} SPD, worst residual {worst_res:.2e} in <= {max_iters} steps, monotone {monotone}, \
             quartic < quadratic on {:.0}%",
            frac * 100.0
        ),
    )
}

/// Least-squares slope of `y` on `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Log–log slope of the lazy inverse error against the shift size.
pub fn check_lazy_order(cases: usize, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = [0.2, 0.1, 0.05, 0.025];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..cases {
        let n = rng.random_range(2..=8);
        let a = random_spd_with_condition(n, 2.0, rng.random_range(1.0..10.0), &mut rng);
        let log_err = exact_inverse(&a).and_then(|inv| {
            steps
                .iter()
                .map(|&d| {
                    let exact = exact_inverse(&a.add_diag(d))?;
                    Ok(exact.sub(&lazy_inverse_update(&inv, d))?.frobenius_norm().ln())
                })
                .collect::<Result<Vec<f64>, _>>()
        });
        let log_err = match log_err {
            Ok(v) => v,
            Err(e) => return (false, e.to_string()),
        };
        let log_step: Vec<f64> = steps.iter().map(|d| d.ln()).collect();
        let s = slope(&log_step, &log_err);
        lo = lo.min(s);
        hi = hi.max(s);
    }
    let passed = (lo - 2.0).abs() <= 0.2 && (hi - 2.0).abs() <= 0.2;
    (passed, format!("{cases} SPD factors, slopes in [{lo:.3}, {hi:.3}] (target 2 ± 0.2)"))
}

/// Full-covariance Kalman update against the natural-gradient identities.
pub fn check_kalman_ngd(cases: usize, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean_dev, mut prec_dev) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let n = rng.random_range(1..=20);
        let d = rng.random_range(1..=4);
        let inst = LinearGaussianInstance::random(n, d, &mut rng);
        match kalman_ngd_equivalence_check(&inst) {
            Ok(r) => {
                mean_dev = mean_dev.max(r.mean_deviation);
                prec_dev = prec_dev.max(r.precision_deviation);
            }
            Err(e) => return (false, e.to_string()),
        }
    }
    (
        mean_dev <= 1e-8 && prec_dev <= 1e-8,
        format!("{cases} instances, mean {mean_dev:.2e}, precision {prec_dev:.2e} (tol 1e-8)"),
    )
}

/// `ρ = 0` gain identity and the quadratic first-order gain error.
pub fn check_gain_degeneracy(cases: usize, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exact_match = true;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..cases {
        let n = rng.random_range(1..=12);
        let d = rng.random_range(1..=4);
        let inst = LinearGaussianInstance::random(n, d, &mut rng);
        let norm = match spectral_norm(&inst.r, 500, 1e-14) {
            Ok(v) => v,
            Err(e) => return (false, e.to_string()),
        };
        let noise = ObservationNoise {
            r_mat: inst.r.scale(1.0 / norm),
            beta: 1.0,
        };
        let sigma: Vec<f64> = (0..n).map(|i| inst.sigma[(i, i)]).collect();
        let gains = (|| {
            let zero = regularized_gain(&sigma, &inst.h, &noise, 0.0, GainMode::Exact)?;
            let std = standard_gain(&sigma, &inst.h, &noise.r_mat)?;
            let mut errs = Vec::new();
            for rho in [0.02, 0.04, 0.08] {
                let a = regularized_gain(&sigma, &inst.h, &noise, rho, GainMode::Exact)?;
                let b = regularized_gain(&sigma, &inst.h, &noise, rho, GainMode::FirstOrder)?;
                errs.push(a.sub(&b)?.frobenius_norm());
            }
            Ok::<_, crate::kalman::KalmanError>((zero == std, errs))
        })();
        let (same, errs) = match gains {
            Ok(v) => v,
            Err(e) => return (false, e.to_string()),
        };
        exact_match &= same;
        for r in [errs[1] / errs[0], errs[2] / errs[1]] {
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    let passed = exact_match && (lo - 4.0).abs() <= 0.4 && (hi - 4.0).abs() <= 0.4;
    (
        passed,
        format!("{cases} instances, rho=0 bitwise {exact_match}, error ratios in [{lo:.3}, {hi:.3}] (target 4 ± 0.4)"),
    )
}

/// Random tanh network with at most `max_params` parameters.
fn random_net(max_params: usize, head: Head, rng: &mut impl Rng) -> Network {
    loop {
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(1..=6)];
        for _ in 0..depth {
            dims.push(rng.random_range(1..=12));
        }
        dims.push(rng.random_range(2..=4));
        let net = Network::random(&dims, Activation::Tanh, head, true, rng).expect("valid dims");
        if net.num_params() <= max_params {
            return net;
        }
    }
}

fn random_targets(net: &Network, m: usize, rng: &mut impl Rng) -> Mat {
    match net.head() {
        Head::Categorical => {
            let k = net.output_dim();
            Mat::from_fn(m, 1, |_, _| rng.random_range(0..k) as f64)
        }
        _ => gaussian(m, net.output_dim(), rng),
    }
}

fn norm_relative(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let scale = b.iter().map(|q| q * q).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

/// Central difference of `P(θ) = ½ρ‖∇L(θ)‖²`.
pub fn penalty_fd_oracle(net: &Network, x: &Mat, y: &Mat, rho: f64, eps: f64) -> Result<Vec<f64>, crate::model::ModelError> {
    let theta = net.params();
    let mut probe = net.clone();
    let mut p = |t: &[f64]| -> Result<f64, crate::model::ModelError> {
        probe.set_params(t)?;
        let (_, g) = loss_and_grad(&probe, x, y)?;
        Ok(0.5 * rho * flatten(&g).iter().map(|v| v * v).sum::<f64>())
    };
    let mut t = theta.clone();
    let mut out = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        t[i] = theta[i] + eps;
        let up = p(&t)?;
        t[i] = theta[i] - eps;
        let down = p(&t)?;
        t[i] = theta[i];
        out[i] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

/// Backprop against finite differences, penalty gradient against a finite
/// difference of the penalty itself.
pub fn check_gradients(cases: usize, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_grad, mut worst_pen) = (0.0f64, 0.0f64);
    for c in 0..cases {
        let head = if c % 2 == 0 { Head::Gaussian } else { Head::Categorical };
        let net = random_net(500, head, &mut rng);
        let m = rng.random_range(1..=6);
        let x = gaussian(m, net.input_dim(), &mut rng);
        let y = random_targets(&net, m, &mut rng);
        let rho = 0.1;
        let result = (|| {
            let (_, g) = loss_and_grad(&net, &x, &y)?;
            let fd = finite_diff_grad(&net, &x, &y, 1e-5).map_err(|e| crate::model::ModelError::InvalidNetwork(e.to_string()))?;
            let pen = grad_norm_penalty_grad(&net, &x, &y, rho, DEFAULT_PENALTY_EPSILON)?;
            let pen_fd = penalty_fd_oracle(&net, &x, &y, rho, 1e-5)?;
            Ok::<_, crate::model::ModelError>((max_relative_error(&g, &fd, 1e-3), norm_relative(&flatten(&pen), &pen_fd)))
        })();
        match result {
            Ok((a, b)) => {
                worst_grad = worst_grad.max(a);
                worst_pen = worst_pen.max(b);
            }
            Err(e) => return (false, e.to_string()),
        }
    }
    (
        worst_grad <= 1e-6 && worst_pen <= 1e-4,
        format!("{cases} nets, backward {worst_grad:.2e} (tol 1e-6), penalty {worst_pen:.2e} (tol 1e-4)"),
    )
}

type Check = (&'static str, fn(usize, u64) -> (bool, String), usize);

const CHECKS: [Check; 6] = [
    ("factored Fisher = explicit Kronecker", check_factored_fisher, 200),
    ("Newton-Schulz convergence", check_newton_schulz, 100),
    ("lazy inverse O(dλ²)", check_lazy_order, 20),
    ("Kalman update = natural gradient", check_kalman_ngd, 100),
    ("rho=0 gain and first-order gain", check_gain_degeneracy, 20),
    ("backward and penalty gradients", check_gradients, 10),
];

/// Runs every check with the given seed.
pub fn run_verify_suite(seed: u64) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, f, cases))| {
            let start = Instant::now();
            let (passed, detail) = f(*cases, seed.wrapping_add(i as u64));
            CheckOutcome {
                id: i + 1,
                name,
                passed,
                detail,
                duration: start.elapsed(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::condition_number;

    #[test]
    fn spd_condition_is_as_requested() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd_with_condition(6, 0.5, 40.0, &mut rng);
        let k = condition_number(&a).unwrap();
        assert!((k - 40.0).abs() < 1e-6 * 40.0, "{k}");
    }

    #[test]
    fn slope_of_line() {
        assert!((slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn every_check_passes() {
        for out in run_verify_suite(0) {
            assert!(out.passed, "{}: {}", out.name, out.detail);
        }
    }
}
