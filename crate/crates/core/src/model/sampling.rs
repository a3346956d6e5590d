use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Head, Prediction};
use crate::linalg::Mat;

/// Draws one output per row from the model's predictive distribution.
///
/// Gaussian head: `ŷ + ε`, `ε ~ N(0, I)`. Categorical head: a one-hot row for
/// a class drawn from the predicted probabilities.
pub fn sample_outputs<R: Rng + ?Sized>(pred: &Prediction, rng: &mut R) -> Mat {
    let p = &pred.outputs;
    match pred.head {
        Head::Gaussian => {
            let mut out = p.clone();
            for v in out.as_mut_slice() {
                let eps: f64 = StandardNormal.sample(rng);
                *v += eps;
            }
            out
        }
        Head::Categorical => {
            let mut out = Mat::zeros(p.rows(), p.cols());
            for r in 0..p.rows() {
                let u: f64 = rng.random();
                let row = p.row(r);
                let mut acc = 0.0;
                // Last class with positive mass absorbs rounding in the CDF.
                let mut chosen = row.iter().rposition(|&q| q > 0.0).unwrap_or(row.len() - 1);
                for (k, &q) in row.iter().enumerate() {
                    acc += q;
                    if u < acc && q > 0.0 {
                        chosen = k;
                        break;
                    }
                }
                out[(r, chosen)] = 1.0;
            }
            out
        }
    }
}
