//! One `key:value` record per line.
//!
//! ```text
//! run:ring-s0 iter:3 epoch:0 split:step loss:0.6931 metric:- grad_norm:0.12 damping:0.0001 wall_ms:0.41
//! ```

use std::fmt;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// One optimizer step on a minibatch.
    Step,
    /// End-of-epoch evaluation on the full training set.
    Train,
    /// End-of-epoch evaluation on the validation set.
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Step => "step",
            Self::Train => "train",
            Self::Validation => "val",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "step" => Some(Self::Step),
            "train" => Some(Self::Train),
            "val" => Some(Self::Validation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    /// Optimizer steps taken before this record's values were measured.
    pub iteration: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Accuracy (classification) or Pearson correlation (regression) on
    /// evaluation records; absent on step records.
    pub metric: Option<f64>,
    pub grad_norm: f64,
    pub damping: f64,
    pub wall_ms: f64,
}

impl MetricsRecord {
    /// Equality on every field except `wall_ms`, bit-for-bit on floats.
    pub fn same_values(&self, other: &Self) -> bool {
        let bits = |a: f64, b: f64| a.to_bits() == b.to_bits();
        self.run_id == other.run_id
            && self.iteration == other.iteration
            && self.epoch == other.epoch
            && self.split == other.split
            && bits(self.loss, other.loss)
            && match (self.metric, other.metric) {
                (Some(a), Some(b)) => bits(a, b),
                (None, None) => true,
                _ => false,
            }
            && bits(self.grad_norm, other.grad_norm)
            && bits(self.damping, other.damping)
    }
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run:{} iter:{} epoch:{} split:{} loss:{:?} metric:",
            self.run_id,
            self.iteration,
            self.epoch,
            self.split.name(),
            self.loss
        )?;
        match self.metric {
            Some(m) => write!(f, "{m:?}")?,
            None => write!(f, "-")?,
        }
        write!(
            f,
            " grad_norm:{:?} damping:{:?} wall_ms:{:?}",
            self.grad_norm, self.damping, self.wall_ms
        )
    }
}

/// Parses one line written by the `Display` impl.
pub fn parse_record(line: &str) -> Result<MetricsRecord, HarnessError> {
    let mut fields = std::collections::HashMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once(':')
            .ok_or_else(|| HarnessError::Config(format!("metrics token `{tok}` lacks `:`")))?;
        fields.insert(k, v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| HarnessError::Config(format!("metrics record lacks `{k}`")))
    };
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, HarnessError> {
        v.parse()
            .map_err(|_| HarnessError::Config(format!("bad metrics value `{v}` for {k}")))
    }
    let metric = match get("metric")? {
        "-" => None,
        v => Some(num("metric", v)?),
    };
    Ok(MetricsRecord {
        run_id: get("run")?.to_string(),
        iteration: num("iter", get("iter")?)?,
        epoch: num("epoch", get("epoch")?)?,
        split: Split::from_name(get("split")?).ok_or_else(|| HarnessError::Config("unknown split".into()))?,
        loss: num("loss", get("loss")?)?,
        metric,
        grad_norm: num("grad_norm", get("grad_norm")?)?,
        damping: num("damping", get("damping")?)?,
        wall_ms: num("wall_ms", get("wall_ms")?)?,
    })
}

pub fn parse_records(text: &str) -> Result<Vec<MetricsRecord>, HarnessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_record(l).map_err(|e| HarnessError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
