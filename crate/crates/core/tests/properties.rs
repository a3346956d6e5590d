use grng::fisher::{regularize_and_invert, DampingMode, DampingVariant, FisherFactors, Inverter, LayerFactors};
use grng::harness::{accuracy, pearson};
use grng::kalman::{step_rkalman, KalmanConfig, KalmanState};
use grng::linalg::{exact_inverse, kron_matvec, newton_schulz_inverse, Mat, NewtonConfig, NewtonOrder};
use grng::model::{forward, grad_norm_penalty_grad, Activation, Head, Network};
use grng::optim::{Algorithm, Optimizer, OptimizerConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Mat::from_vec(rows, cols, v).unwrap())
}

/// `BᵀB/n + shift·I`, so the smallest eigenvalue is at least `shift`.
fn spd(n: usize, shift: f64) -> impl Strategy<Value = Mat> {
    matrix(n, n).prop_map(move |b| b.t_matmul(&b).unwrap().scale(1.0 / n as f64).add_diag(shift).symmetrized())
}

fn sized_spd(max: usize, shift: f64) -> impl Strategy<Value = Mat> {
    (1..=max).prop_flat_map(move |n| spd(n, shift))
}

fn layer_factors() -> impl Strategy<Value = (Mat, Mat, Mat)> {
    (1..=4usize, 1..=4usize).prop_flat_map(|(cols, rows)| (spd(cols, 0.0), spd(rows, 0.0), matrix(rows, cols)))
}

fn direction(activation: &Mat, error: &Mat, grad: &Mat, variant: DampingVariant, rho: f64) -> Mat {
    let mut f = FisherFactors {
        layers: vec![LayerFactors::from_factors(activation.clone(), error.clone())],
    };
    regularize_and_invert(&mut f, &DampingMode::new(variant, rho), &Inverter::Exact).unwrap();
    f.layers[0].natural_direction(grad, 0).unwrap()
}

fn small_net(seed: u64, head: Head) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::random(&[3, 5, 2], Activation::Tanh, head, true, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn newton_residuals_never_increase(a in sized_spd(12, 0.05), psi in 2u32..=4) {
        let cfg = NewtonConfig { order: NewtonOrder::from_psi(psi).unwrap(), max_iters: 200, ..NewtonConfig::default() };
        let res = newton_schulz_inverse(&a, &cfg).unwrap();
        prop_assume!(res.residuals[0] < 1.0);
        prop_assert!(res.residuals.windows(2).all(|w| w[1] <= w[0]), "{:?}", res.residuals);
    }

    #[test]
    fn double_inverse_is_identity(a in sized_spd(10, 0.01)) {
        let back = exact_inverse(&exact_inverse(&a).unwrap()).unwrap();
        prop_assert!(back.sub(&a).unwrap().frobenius_norm() <= 1e-8 * a.frobenius_norm());
    }

    #[test]
    fn kron_matvec_matches_explicit(
        (a, b, c) in (1..=4usize, 1..=4usize, 1..=4usize, 1..=4usize)
            .prop_flat_map(|(ar, ac, br, bc)| (matrix(ar, ac), matrix(br, bc), matrix(bc, ac)))
    ) {
        let fast = kron_matvec(&a, &b, &c).unwrap().vec_col_major();
        let slow = a.kron(&b).matvec(&c.vec_col_major()).unwrap();
        for (p, q) in fast.iter().zip(&slow) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn more_damping_gives_shorter_steps(
        (lam, gam, g) in layer_factors(),
        variant in prop::sample::select(vec![DampingVariant::Tikhonov, DampingVariant::Ring, DampingVariant::Reng]),
        log_rho in -4.0f64..0.0,
    ) {
        prop_assume!(g.frobenius_norm() > 1e-3);
        prop_assume!(variant != DampingVariant::Ring || (lam.frobenius_norm() > 1e-3 && gam.frobenius_norm() > 1e-3));
        let rho = 10f64.powf(log_rho);
        let small = direction(&lam, &gam, &g, variant, rho).frobenius_norm();
        let large = direction(&lam, &gam, &g, variant, 2.0 * rho).frobenius_norm();
        prop_assert!(large < small, "{large} !< {small}");
    }

    #[test]
    fn ring_direction_scales_inverse_square(
        (lam, gam, g) in layer_factors(),
        c in 0.1f64..10.0,
        log_rho in -4.0f64..0.0,
    ) {
        prop_assume!(lam.frobenius_norm() > 1e-3 && gam.frobenius_norm() > 1e-3);
        let rho = 10f64.powf(log_rho);
        let base = direction(&lam, &gam, &g, DampingVariant::Ring, rho);
        let scaled = direction(&lam.scale(c), &gam.scale(c), &g, DampingVariant::Ring, rho).scale(c * c);
        prop_assert!(scaled.max_abs_diff(&base) <= 1e-10 * base.max_abs().max(1.0));
    }

    #[test]
    fn inverses_pass_the_gate((lam, gam, _g) in layer_factors(), log_rho in -4.0f64..0.0) {
        let mut f = FisherFactors { layers: vec![LayerFactors::from_factors(lam, gam)] };
        regularize_and_invert(&mut f, &DampingMode::new(DampingVariant::Reng, 10f64.powf(log_rho)), &Inverter::default()).unwrap();
        let l = &f.layers[0];
        let eye_a = Mat::identity(l.activation.rows());
        let eye_e = Mat::identity(l.error.rows());
        prop_assert!(l.damped_activation().matmul(l.activation_inv.as_ref().unwrap()).unwrap().sub(&eye_a).unwrap().frobenius_norm() <= 1e-4);
        prop_assert!(l.damped_error().matmul(l.error_inv.as_ref().unwrap()).unwrap().sub(&eye_e).unwrap().frobenius_norm() <= 1e-4);
    }

    #[test]
    fn categorical_rows_are_distributions(seed in any::<u64>(), x in matrix(6, 3)) {
        let net = small_net(seed, Head::Categorical);
        let (pred, _) = forward(&net, &x.scale(5.0)).unwrap();
        for r in 0..pred.outputs.rows() {
            let row = pred.outputs.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn accuracy_and_correlation_are_bounded(a in prop::collection::vec(-5.0f64..5.0, 2..30), seed in any::<u64>()) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * ((seed >> (i % 60)) & 1) as f64 - 0.5 * i as f64).collect();
        if let Some(r) = pearson(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
        let probs = Mat::from_fn(a.len(), 2, |i, j| if j == 0 { 0.5 + 0.1 * a[i].tanh() } else { 0.5 - 0.1 * a[i].tanh() });
        let labels = Mat::from_fn(a.len(), 1, |i, _| (b[i] > 0.0) as usize as f64);
        let acc = accuracy(&probs, &labels);
        prop_assert!((0.0..=1.0).contains(&acc));
    }
}

proptest! {
    #[test]
    fn heavy_reng_damping_recovers_the_gradient_direction((lam, gam, g) in layer_factors()) {
        prop_assume!(g.frobenius_norm() > 1e-3);
        let d = direction(&lam, &gam, &g, DampingVariant::Reng, 1e6);
        let dot: f64 = d.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
        let cos = dot / (d.frobenius_norm() * g.frobenius_norm());
        prop_assert!(cos >= 1.0 - 1e-3, "{}", cos);
    }
}

#[test]
fn step_reports_are_deterministic() {
    let x = Mat::from_fn(40, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
    let y = Mat::from_fn(40, 1, |i, _| (i % 2) as f64);
    for algorithm in [Algorithm::Sgd, Algorithm::Adaptive, Algorithm::Ngd, Algorithm::Ring, Algorithm::Reng] {
        let trace = || {
            let mut cfg = OptimizerConfig::new(algorithm);
            cfg.learning_rate = 0.05;
            cfg.seed = 4;
            let mut opt = Optimizer::new(cfg).unwrap();
            let mut net = small_net(2, Head::Categorical);
            let reports: Vec<(usize, u64, u64, u64, bool)> = (0..8)
                .map(|_| {
                    let r = opt.step(&mut net, &x, &y).unwrap();
                    (r.iteration, r.loss.to_bits(), r.grad_norm.to_bits(), r.damping.to_bits(), r.refreshed)
                })
                .collect();
            (reports, net)
        };
        assert_eq!(trace(), trace(), "{algorithm:?}");
    }
}

#[test]
fn posterior_variances_stay_positive_on_long_streams() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = Network::random(&[2, 1], Activation::Identity, Head::Gaussian, true, &mut rng).unwrap();
    let cfg = KalmanConfig {
        beta: 1.0,
        ..KalmanConfig::default()
    };
    let mut state = KalmanState::new(&net, &cfg).unwrap();
    state.noise.r_mat = Mat::identity(1).scale(0.1);
    let mut prev = state.posterior.sigma.clone();
    for k in 0..10_000 {
        let t = k as f64 * 0.37;
        let x = Mat::from_rows(&[vec![t.sin(), (1.3 * t).cos()]]);
        let y = Mat::from_rows(&[vec![0.5 * t.sin() - 0.2 * (1.3 * t).cos() + 0.1]]);
        step_rkalman(&mut net, &x, &y, &mut state, &cfg).unwrap();
        let sigma = &state.posterior.sigma;
        assert!(sigma.iter().all(|&s| s > 0.0), "step {k}: {sigma:?}");
        assert!(sigma.iter().zip(&prev).all(|(a, b)| a <= b), "step {k}");
        prev = sigma.clone();
    }
}

#[test]
fn penalty_gradient_error_is_second_order_in_epsilon() {
    let net = small_net(5, Head::Gaussian);
    let x = Mat::from_fn(4, 3, |i, j| ((i + 2 * j) as f64 * 0.7).sin());
    let y = Mat::from_fn(4, 2, |i, j| ((i * 3 + j) as f64 * 0.4).cos());
    let eps = [0.08, 0.04, 0.02, 0.01];
    let at = |e: f64| grad_norm_penalty_grad(&net, &x, &y, 1.0, e).unwrap();
    let flat = |m: &[Mat]| m.iter().flat_map(|l| l.as_slice().to_vec()).collect::<Vec<f64>>();
    let (xs, ys): (Vec<f64>, Vec<f64>) = eps
        .iter()
        .map(|&e| {
            let a = flat(&at(e));
            let b = flat(&at(e / 2.0));
            let d = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            (e.ln(), d.ln())
        })
        .unzip();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let slope = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / xs.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>();
    assert!((slope - 2.0).abs() <= 0.3, "{slope}");
}
