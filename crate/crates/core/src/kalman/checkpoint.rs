//! Posterior checkpoint format.
//!
//! ```text
//! grng-posterior 1
//! rho 0.01
//! beta 0.97
//! sigma0 0.1
//! q 0
//! gain exact
//! iteration 120
//! noise <d>
//! <d rows of R>
//! params <n>
//! <n lines: mu sigma>
//! ```

use super::{GainMode, GaussianPosterior, KalmanConfig, KalmanError, KalmanState, ObservationNoise};
use crate::linalg::Mat;

const MAGIC: &str = "grng-posterior 1";

pub fn write_checkpoint(state: &KalmanState, cfg: &KalmanConfig) -> String {
    let mut s = String::new();
    s.push_str(MAGIC);
    s.push('\n');
    s.push_str(&format!("rho {:?}\n", cfg.rho));
    s.push_str(&format!("beta {:?}\n", cfg.beta));
    s.push_str(&format!("sigma0 {:?}\n", cfg.sigma0));
    s.push_str(&format!("q {:?}\n", cfg.q));
    s.push_str(&format!("gain {}\n", cfg.gain_mode.name()));
    s.push_str(&format!("iteration {}\n", state.iteration));
    let r = &state.noise.r_mat;
    s.push_str(&format!("noise {}\n", r.rows()));
    for i in 0..r.rows() {
        let row: Vec<String> = r.row(i).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    let p = &state.posterior;
    s.push_str(&format!("params {}\n", p.len()));
    for (m, v) in p.mu.iter().zip(&p.sigma) {
        s.push_str(&format!("{m:?} {v:?}\n"));
    }
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str, KalmanError> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            let l = l.trim();
            if !l.is_empty() && !l.starts_with('#') {
                return Ok(l);
            }
        }
        Err(self.err("unexpected end of checkpoint"))
    }

    fn err(&self, message: &str) -> KalmanError {
        KalmanError::Parse {
            line: self.last,
            message: message.to_string(),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str, KalmanError> {
        let l = self.next()?;
        match l.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim()),
            _ => Err(self.err(&format!("expected `{key} <value>`"))),
        }
    }

    fn number<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, KalmanError> {
        let v = self.keyed(key)?;
        v.parse().map_err(|_| self.err(&format!("bad value for {key}")))
    }

    fn floats(&mut self, expected: usize) -> Result<Vec<f64>, KalmanError> {
        let l = self.next()?;
        let vals = l
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| self.err("bad number"))?;
        if vals.len() != expected {
            return Err(self.err(&format!("expected {expected} values")));
        }
        Ok(vals)
    }
}

pub fn parse_checkpoint(text: &str) -> Result<(KalmanState, KalmanConfig), KalmanError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    if lines.next()? != MAGIC {
        return Err(lines.err("missing grng-posterior header"));
    }
    let rho = lines.number("rho")?;
    let beta = lines.number("beta")?;
    let sigma0 = lines.number("sigma0")?;
    let q = lines.number("q")?;
    let gain = lines.keyed("gain")?;
    let gain_mode = GainMode::from_name(gain).ok_or_else(|| lines.err("unknown gain mode"))?;
    let cfg = KalmanConfig {
        rho,
        beta,
        sigma0,
        q,
        gain_mode,
    };
    cfg.validate()?;
    let iteration = lines.number("iteration")?;

    let d: usize = lines.number("noise")?;
    let mut r = Vec::with_capacity(d * d);
    for _ in 0..d {
        r.extend(lines.floats(d)?);
    }
    let n: usize = lines.number("params")?;
    let mut mu = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for _ in 0..n {
        let v = lines.floats(2)?;
        mu.push(v[0]);
        sigma.push(v[1]);
    }
    let state = KalmanState {
        posterior: GaussianPosterior::new(mu, sigma)?,
        noise: ObservationNoise {
            r_mat: Mat::from_vec(d, d, r)?,
            beta,
        },
        iteration,
    };
    Ok((state, cfg))
}
