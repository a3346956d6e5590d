//! Dense small-matrix arithmetic and the iterative inversion machinery used by
//! the Kronecker-factored optimizers.
//!
//! Everything here is a pure function of its inputs. Matrices are row-major
//! `f64`; vectorization for Kronecker identities is column-stacking
//! ([`Mat::vec_col_major`]).

mod inverse;
mod mat;
mod spectral;

pub use inverse::{
    exact_inverse, lazy_inverse_update, newton_schulz_inverse, solve, AlphaMode, NewtonConfig,
    NewtonOrder, NewtonResult,
};
pub use mat::Mat;
pub use spectral::{
    condition_number, kron_matvec, spectral_norm, symmetric_eigenvalues, SPECTRAL_MAX_ITERS,
    SPECTRAL_TOL,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not square: {0:?}")]
    NotSquare((usize, usize)),
    #[error("singular matrix: pivot {pivot:e} at column {column}")]
    SingularMatrix { column: usize, pivot: f64 },
    #[error("Newton-Schulz iteration diverged at iteration {iteration}: residual {residual:e} (initial {initial:e})")]
    Diverged {
        iteration: usize,
        residual: f64,
        initial: f64,
    },
    #[error("zero matrix has no spectral direction")]
    ZeroMatrix,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
