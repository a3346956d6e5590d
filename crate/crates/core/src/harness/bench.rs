//! Optimizer comparison grid over seeds.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::RunConfig;
use super::metrics::{MetricsRecord, Split};
use super::train::{load_dataset, train, RunStatus};
use super::{io_err, HarnessError};
use crate::kalman::write_checkpoint;
use crate::model::write_network;

/// Result of one (optimizer, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchCell {
    pub optimizer: String,
    pub seed: u64,
    /// Final validation metric, or the train metric without a validation split.
    pub metric: Option<f64>,
    pub loss: f64,
    pub wall_ms: f64,
    pub status: RunStatus,
}

/// Aggregate over the seeds of one optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub optimizer: String,
    pub runs: usize,
    pub diverged: usize,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub wall_ms_mean: f64,
}

pub fn run_id(cfg: &RunConfig) -> String {
    format!("{}-s{}", cfg.optimizer.name(), cfg.seed)
}

/// Writes `config.cfg`, streams `metrics.txt` and finally writes
/// `model.net` (plus `posterior.ckpt` for R-Kalman) into `dir`.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path) -> Result<super::TrainOutcome, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let cfg_path = dir.join("config.cfg");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| io_err(&cfg_path, e))?;
    let metrics_path = dir.join("metrics.txt");
    let file = fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let ds = load_dataset(cfg)?;
    let (tr, va) = ds.split(cfg.val_fraction)?;
    let mut sink = |r: &MetricsRecord| writeln!(writer, "{r}").map_err(|e| io_err(&metrics_path, e));
    let outcome = train(cfg, &tr, &va, &run_id(cfg), &mut sink);
    writer.flush().map_err(|e| io_err(&metrics_path, e))?;
    let outcome = outcome?;
    let net_path = dir.join("model.net");
    fs::write(&net_path, write_network(&outcome.network)).map_err(|e| io_err(&net_path, e))?;
    if let Some(state) = &outcome.kalman_state {
        let ckpt = dir.join("posterior.ckpt");
        fs::write(&ckpt, write_checkpoint(state, &cfg.kalman_config())).map_err(|e| io_err(&ckpt, e))?;
    }
    Ok(outcome)
}

/// Runs every config in parallel. With `out`, each run gets its own
/// directory named by optimizer and seed.
pub fn run_bench(configs: &[RunConfig], out: Option<&Path>) -> Result<Vec<BenchCell>, HarnessError> {
    configs
        .par_iter()
        .map(|cfg| {
            let outcome = match out {
                Some(root) => run_to_dir(cfg, &cell_dir(root, cfg))?,
                None => super::train::run(cfg, &run_id(cfg))?,
            };
            let last = outcome
                .last_eval(Split::Validation)
                .or_else(|| outcome.last_eval(Split::Train));
            Ok(BenchCell {
                optimizer: cfg.optimizer.name().to_string(),
                seed: cfg.seed,
                metric: last.and_then(|r| r.metric),
                loss: last.map_or(f64::NAN, |r| r.loss),
                wall_ms: outcome.wall.as_secs_f64() * 1e3,
                status: outcome.status,
            })
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per optimizer, in order of first appearance. Diverged runs are
/// counted but left out of the averages.
pub fn summarize(cells: &[BenchCell]) -> Vec<BenchRow> {
    let mut names: Vec<&str> = Vec::new();
    for c in cells {
        if !names.contains(&c.optimizer.as_str()) {
            names.push(&c.optimizer);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mine: Vec<&BenchCell> = cells.iter().filter(|c| c.optimizer == name).collect();
            let ok: Vec<&&BenchCell> = mine.iter().filter(|c| c.status == RunStatus::Completed).collect();
            let metrics: Vec<f64> = ok.iter().filter_map(|c| c.metric).collect();
            let losses: Vec<f64> = ok.iter().map(|c| c.loss).collect();
            let walls: Vec<f64> = mine.iter().map(|c| c.wall_ms).collect();
            let (metric_mean, metric_std) = mean_std(&metrics);
            let (loss_mean, loss_std) = mean_std(&losses);
            BenchRow {
                optimizer: name.to_string(),
                runs: mine.len(),
                diverged: mine.len() - ok.len(),
                metric_mean,
                metric_std,
                loss_mean,
                loss_std,
                wall_ms_mean: mean_std(&walls).0,
            }
        })
        .collect()
}

pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<10} {:>4} {:>8} {:>20} {:>22} {:>12}\n",
        "optimizer", "runs", "diverged", "metric", "loss", "wall_ms"
    );
    for r in rows {
        s += &format!(
            "{:<10} {:>4} {:>8} {:>20} {:>22} {:>12.1}\n",
            r.optimizer,
            r.runs,
            r.diverged,
            format!("{:.4} ± {:.4}", r.metric_mean, r.metric_std),
            format!("{:.5} ± {:.5}", r.loss_mean, r.loss_std),
            r.wall_ms_mean
        );
    }
    s
}

/// Directory for one bench run under `root`.
pub fn cell_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(run_id(cfg))
}
