use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{OptimizerKind, RunConfig};
use super::dataset::{load_csv, make_synthetic, Dataset, SyntheticKind, Task};
use super::metrics::{MetricsRecord, Split};
use super::HarnessError;
use crate::fisher::FisherError;
use crate::kalman::{step_rkalman, KalmanError, KalmanState};
use crate::linalg::Mat;
use crate::model::{flatten, forward, loss, backward, Head, Network};
use crate::optim::{OptimError, Optimizer, StepReport};

const INIT_STREAM: u64 = 0x1a7e_0001;
const SHUFFLE_STREAM: u64 = 0x1a7e_0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// A non-finite loss stopped the run before this iteration's update.
    Diverged { iteration: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub records: Vec<MetricsRecord>,
    pub status: RunStatus,
    pub iterations: usize,
    pub wall: Duration,
    /// Final posterior of an R-Kalman run.
    pub kalman_state: Option<KalmanState>,
}

impl TrainOutcome {
    /// Last end-of-epoch record of the given split.
    pub fn last_eval(&self, split: Split) -> Option<&MetricsRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

/// Synthetic dataset by name, or a CSV file by path.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    match SyntheticKind::from_name(&cfg.dataset) {
        Some(kind) => make_synthetic(kind, cfg.samples, cfg.seed),
        None => load_csv(Path::new(&cfg.dataset), None),
    }
}

/// `[d_i, hidden…, d_o]` network with the head matching the task.
pub fn build_network(cfg: &RunConfig, ds: &Dataset) -> Result<Network, HarnessError> {
    let mut dims = vec![ds.input_dim()];
    dims.extend(&cfg.hidden);
    dims.push(ds.num_outputs);
    let head = match ds.task {
        Task::Classification => Head::Categorical,
        Task::Regression => Head::Gaussian,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    Ok(Network::random(&dims, cfg.activation, head, true, &mut rng)?)
}

/// Fraction of rows whose arg-max class matches the label.
pub fn accuracy(probs: &Mat, labels: &Mat) -> f64 {
    let hits = (0..probs.rows())
        .filter(|&r| {
            let row = probs.row(r);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == labels[(r, 0)] as usize
        })
        .count();
    hits as f64 / probs.rows().max(1) as f64
}

/// Pearson correlation of two equally long series; `None` when either has
/// zero variance or fewer than two points.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Loss, task metric and gradient norm on a whole dataset.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<(f64, Option<f64>, f64), HarnessError> {
    let (pred, mut cache) = forward(net, &ds.features)?;
    let l = loss(&pred, &ds.targets)?;
    let g = backward(net, &mut cache, &pred, &ds.targets)?;
    let grad_norm = flatten(&g).iter().map(|v| v * v).sum::<f64>().sqrt();
    let metric = match ds.task {
        Task::Classification => Some(accuracy(&pred.outputs, &ds.targets)),
        Task::Regression => pearson(pred.outputs.as_slice(), ds.targets.as_slice()),
    };
    Ok((l, metric, grad_norm))
}

enum Stepper {
    Frequentist(Optimizer),
    Kalman(KalmanState, crate::kalman::KalmanConfig),
}

impl Stepper {
    fn damping(&self) -> f64 {
        match self {
            Self::Frequentist(o) => o.damping(),
            Self::Kalman(_, c) => c.rho,
        }
    }
}

/// Trains on `train_set`, evaluating on `train_set` and `val_set` after
/// every epoch. Every record is passed to `sink` as soon as it exists, so a
/// diverging run still leaves its partial metrics behind.
pub fn train(
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    run_id: &str,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<(), HarnessError>,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(HarnessError::Config("training set is empty".into()));
    }
    let start = Instant::now();
    let mut net = build_network(cfg, train_set)?;
    let mut stepper = match cfg.optimizer {
        OptimizerKind::Frequentist(_) => Stepper::Frequentist(Optimizer::new(cfg.optimizer_config()?)?),
        OptimizerKind::RKalman => {
            let kc = cfg.kalman_config();
            Stepper::Kalman(KalmanState::new(&net, &kc)?, kc)
        }
    };
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(SHUFFLE_STREAM);

    let mut records = Vec::new();
    let mut emit = |rec: MetricsRecord, records: &mut Vec<MetricsRecord>| -> Result<(), HarnessError> {
        sink(&rec)?;
        records.push(rec);
        Ok(())
    };
    let ms = |t: Instant| t.elapsed().as_secs_f64() * 1e3;

    let mut iteration = 0;
    let mut status = RunStatus::Completed;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.rows(chunk);
            let damping = stepper.damping();
            let result: Result<StepReport, HarnessError> = match &mut stepper {
                Stepper::Frequentist(opt) => opt.step(&mut net, &x, &y).map_err(Into::into),
                Stepper::Kalman(state, kc) => step_rkalman(&mut net, &x, &y, state, kc).map_err(Into::into),
            };
            let report = match result {
                Ok(r) => r,
                Err(HarnessError::Optim(OptimError::NonFiniteLoss { iteration }))
                | Err(HarnessError::Kalman(KalmanError::NonFiniteLoss { iteration })) => {
                    status = RunStatus::Diverged { iteration };
                    break 'epochs;
                }
                // A factor that collapsed to zero under RING damping.
                Err(HarnessError::Optim(OptimError::Fisher(FisherError::InversionFailed { .. }))) => {
                    status = RunStatus::Diverged { iteration };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            emit(
                MetricsRecord {
                    run_id: run_id.to_string(),
                    iteration,
                    epoch,
                    split: Split::Step,
                    loss: report.loss,
                    metric: None,
                    grad_norm: report.grad_norm,
                    damping: if report.damping.is_finite() { report.damping } else { damping },
                    wall_ms: ms(start),
                },
                &mut records,
            )?;
            iteration += 1;
        }
        for (split, ds) in [(Split::Train, train_set), (Split::Validation, val_set)] {
            if ds.is_empty() {
                continue;
            }
            let (l, metric, grad_norm) = evaluate(&net, ds)?;
            emit(
                MetricsRecord {
                    run_id: run_id.to_string(),
                    iteration,
                    epoch,
                    split,
                    loss: l,
                    metric,
                    grad_norm,
                    damping: stepper.damping(),
                    wall_ms: ms(start),
                },
                &mut records,
            )?;
        }
    }
    let kalman_state = match stepper {
        Stepper::Kalman(state, _) => Some(state),
        Stepper::Frequentist(_) => None,
    };
    Ok(TrainOutcome {
        kalman_state,
        network: net,
        records,
        status,
        iterations: iteration,
        wall: start.elapsed(),
    })
}

/// Loads the configured dataset, splits it and trains, collecting records.
pub fn run(cfg: &RunConfig, run_id: &str) -> Result<TrainOutcome, HarnessError> {
    let ds = load_dataset(cfg)?;
    let (tr, va) = ds.split(cfg.val_fraction)?;
    train(cfg, &tr, &va, run_id, &mut |_| Ok(()))
}
