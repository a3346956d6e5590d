//! Flat `key = value` run configuration.
//!
//! Resolution order: per-optimizer defaults, then the config file, then
//! command-line overrides. [`RunConfig::to_text`] writes every key, so a
//! saved config reproduces the run on its own.

use std::collections::BTreeMap;
use std::path::Path;

use super::{io_err, HarnessError};
use crate::fisher::Inverter;
use crate::kalman::{GainMode, KalmanConfig};
use crate::linalg::{NewtonConfig, NewtonOrder};
use crate::model::Activation;
use crate::optim::{Algorithm, OptimizerConfig};

/// Every optimizer the harness can drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Frequentist(Algorithm),
    RKalman,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        Self::Frequentist(Algorithm::Sgd),
        Self::Frequentist(Algorithm::Adaptive),
        Self::Frequentist(Algorithm::Ngd),
        Self::Frequentist(Algorithm::Ring),
        Self::Frequentist(Algorithm::Reng),
        Self::RKalman,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Frequentist(a) => a.name(),
            Self::RKalman => "rkalman",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "rkalman" | "r-kalman" => Some(Self::RKalman),
            other => Algorithm::from_name(other).map(Self::Frequentist),
        }
    }
}

/// One run's complete configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub optimizer: OptimizerKind,
    /// Synthetic dataset name or CSV path.
    pub dataset: String,
    /// Rows generated for synthetic datasets.
    pub samples: usize,
    pub val_fraction: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub rho: f64,
    pub phi: f64,
    pub skip_freq: usize,
    pub grad_reg: f64,
    pub inverter: String,
    pub newton_order: u32,
    pub newton_iters: usize,
    pub newton_tol: f64,
    pub lazy_bound: f64,
    pub beta: f64,
    pub sigma0: f64,
    pub q: f64,
    pub gain: GainMode,
}

/// Keys accepted in config files and as `--<key>` overrides.
pub const CONFIG_KEYS: [&str; 23] = [
    "optimizer",
    "dataset",
    "samples",
    "val_fraction",
    "hidden",
    "activation",
    "epochs",
    "batch_size",
    "seed",
    "learning_rate",
    "rho",
    "phi",
    "skip_freq",
    "grad_reg",
    "inverter",
    "newton_order",
    "newton_iters",
    "newton_tol",
    "lazy_bound",
    "beta",
    "sigma0",
    "q",
    "gain",
];

/// Default step size for NGD, RING and RENG runs from a random
/// initialization. The optimizer library keeps α = 1, which only suits
/// starting points near a minimum.
pub const NATURAL_LEARNING_RATE: f64 = 0.03;

impl RunConfig {
    pub fn defaults(optimizer: OptimizerKind) -> Self {
        let newton = NewtonConfig::default();
        let kal = KalmanConfig::default();
        let (learning_rate, rho, grad_reg, batch_size) = match optimizer {
            OptimizerKind::Frequentist(a) => {
                let oc = OptimizerConfig::new(a);
                let lr = match a {
                    Algorithm::Ngd | Algorithm::Ring | Algorithm::Reng => NATURAL_LEARNING_RATE,
                    Algorithm::Sgd | Algorithm::Adaptive => oc.learning_rate,
                };
                (lr, oc.rho, oc.grad_reg_coeff, 100)
            }
            OptimizerKind::RKalman => (1.0, kal.rho, 0.0, 1),
        };
        Self {
            optimizer,
            dataset: "two-moons".into(),
            samples: 400,
            val_fraction: 0.2,
            hidden: vec![32],
            activation: Activation::Tanh,
            epochs: 20,
            batch_size,
            seed: 0,
            learning_rate,
            rho,
            phi: 0.995,
            skip_freq: 4,
            grad_reg,
            inverter: "newton".into(),
            newton_order: newton.order.psi(),
            newton_iters: newton.max_iters,
            newton_tol: newton.residual_tol,
            lazy_bound: crate::fisher::DEFAULT_LAZY_BOUND,
            beta: kal.beta,
            sigma0: kal.sigma0,
            q: kal.q,
            gain: kal.gain_mode,
        }
    }

    /// Resolves a config from file pairs and override pairs. The optimizer
    /// is taken from the overrides, then the file, then `ring`, and its
    /// defaults are applied before any other key.
    pub fn resolve(file: &[(usize, String, String)], overrides: &[(String, String)]) -> Result<Self, HarnessError> {
        let pick = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "optimizer")
            .map(|(_, v)| v.clone())
            .or_else(|| file.iter().rev().find(|(_, k, _)| k == "optimizer").map(|(_, _, v)| v.clone()));
        let optimizer = match pick {
            Some(name) => OptimizerKind::from_name(&name)
                .ok_or_else(|| HarnessError::Config(format!("unknown optimizer `{name}`")))?,
            None => OptimizerKind::Frequentist(Algorithm::Ring),
        };
        let mut cfg = Self::defaults(optimizer);
        for (line, k, v) in file {
            cfg.set(k, v).map_err(|e| match e {
                HarnessError::Config(m) => HarnessError::Parse { line: *line, message: m },
                other => other,
            })?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
            v.parse()
                .map_err(|_| HarnessError::Config(format!("invalid value `{v}` for {key}")))
        }
        let v = value.trim();
        match key {
            "optimizer" => {
                let kind = OptimizerKind::from_name(v)
                    .ok_or_else(|| HarnessError::Config(format!("unknown optimizer `{v}`")))?;
                if kind != self.optimizer {
                    return Err(HarnessError::Config(format!(
                        "optimizer `{v}` conflicts with resolved `{}`",
                        self.optimizer.name()
                    )));
                }
            }
            "dataset" => self.dataset = v.to_string(),
            "samples" => self.samples = num(key, v)?,
            "val_fraction" => self.val_fraction = num(key, v)?,
            "hidden" => {
                self.hidden = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|p| num(key, p.trim())).collect::<Result<_, _>>()?
                }
            }
            "activation" => {
                self.activation =
                    Activation::from_name(v).ok_or_else(|| HarnessError::Config(format!("unknown activation `{v}`")))?
            }
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "rho" => self.rho = num(key, v)?,
            "phi" => self.phi = num(key, v)?,
            "skip_freq" => self.skip_freq = num(key, v)?,
            "grad_reg" => self.grad_reg = num(key, v)?,
            "inverter" => {
                if v != "newton" && v != "exact" {
                    return Err(HarnessError::Config(format!("inverter must be newton|exact, got `{v}`")));
                }
                self.inverter = v.to_string();
            }
            "newton_order" => self.newton_order = num(key, v)?,
            "newton_iters" => self.newton_iters = num(key, v)?,
            "newton_tol" => self.newton_tol = num(key, v)?,
            "lazy_bound" => self.lazy_bound = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "sigma0" => self.sigma0 = num(key, v)?,
            "q" => self.q = num(key, v)?,
            "gain" => {
                self.gain = GainMode::from_name(v)
                    .ok_or_else(|| HarnessError::Config(format!("gain must be exact|first-order, got `{v}`")))?
            }
            other => return Err(HarnessError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.optimizer == OptimizerKind::RKalman && self.batch_size != 1 {
            return Err(HarnessError::Config("rkalman consumes one sample per step (batch_size = 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(HarnessError::Config("val_fraction must lie in [0, 1)".into()));
        }
        if self.hidden.contains(&0) {
            return Err(HarnessError::Config("hidden widths must be positive".into()));
        }
        match self.optimizer {
            OptimizerKind::Frequentist(_) => self.optimizer_config()?.validate()?,
            OptimizerKind::RKalman => self.kalman_config().validate()?,
        }
        Ok(())
    }

    pub fn newton_config(&self) -> Result<NewtonConfig, HarnessError> {
        Ok(NewtonConfig {
            order: NewtonOrder::from_psi(self.newton_order).map_err(|e| HarnessError::Config(e.to_string()))?,
            max_iters: self.newton_iters,
            residual_tol: self.newton_tol,
            ..NewtonConfig::default()
        })
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig, HarnessError> {
        let algorithm = match self.optimizer {
            OptimizerKind::Frequentist(a) => a,
            OptimizerKind::RKalman => {
                return Err(HarnessError::Config("rkalman has no frequentist optimizer config".into()))
            }
        };
        let inverter = if self.inverter == "exact" {
            Inverter::Exact
        } else {
            Inverter::Newton(self.newton_config()?)
        };
        Ok(OptimizerConfig {
            algorithm,
            learning_rate: self.learning_rate,
            rho: self.rho,
            lm_discount: self.phi,
            skip_frequency: self.skip_freq,
            grad_reg_coeff: self.grad_reg,
            inverter,
            lazy_bound: self.lazy_bound,
            seed: self.seed,
            ..OptimizerConfig::new(algorithm)
        })
    }

    pub fn kalman_config(&self) -> KalmanConfig {
        KalmanConfig {
            rho: self.rho,
            beta: self.beta,
            sigma0: self.sigma0,
            q: self.q,
            gain_mode: self.gain,
        }
    }

    /// All keys, one per line, in [`CONFIG_KEYS`] order.
    pub fn to_text(&self) -> String {
        let hidden = if self.hidden.is_empty() {
            "none".to_string()
        } else {
            self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
        };
        let values: BTreeMap<&str, String> = [
            ("optimizer", self.optimizer.name().to_string()),
            ("dataset", self.dataset.clone()),
            ("samples", self.samples.to_string()),
            ("val_fraction", format!("{:?}", self.val_fraction)),
            ("hidden", hidden),
            ("activation", self.activation.name().to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("rho", format!("{:?}", self.rho)),
            ("phi", format!("{:?}", self.phi)),
            ("skip_freq", self.skip_freq.to_string()),
            ("grad_reg", format!("{:?}", self.grad_reg)),
            ("inverter", self.inverter.clone()),
            ("newton_order", self.newton_order.to_string()),
            ("newton_iters", self.newton_iters.to_string()),
            ("newton_tol", format!("{:?}", self.newton_tol)),
            ("lazy_bound", format!("{:?}", self.lazy_bound)),
            ("beta", format!("{:?}", self.beta)),
            ("sigma0", format!("{:?}", self.sigma0)),
            ("q", format!("{:?}", self.q)),
            ("gain", self.gain.name().to_string()),
        ]
        .into_iter()
        .collect();
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", values[k]))
            .collect()
    }
}

/// Parses `key = value` lines; `#` starts a comment. Returns
/// `(line, key, value)` triples in file order.
pub fn parse_config_text(text: &str) -> Result<Vec<(usize, String, String)>, HarnessError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::Parse {
            line: i + 1,
            message: "expected `key = value`".into(),
        })?;
        let k = k.trim();
        if !CONFIG_KEYS.contains(&k) {
            return Err(HarnessError::Parse {
                line: i + 1,
                message: format!("unknown config key `{k}`"),
            });
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn load_config_file(path: &Path) -> Result<Vec<(usize, String, String)>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            HarnessError::FileNotFound(path.display().to_string())
        } else {
            io_err(path, e)
        }
    })?;
    parse_config_text(&text)
}
