use super::{spectral_norm, LinalgError, Mat, SPECTRAL_MAX_ITERS, SPECTRAL_TOL};

/// Relative pivot threshold for Gaussian elimination.
const PIVOT_REL_TOL: f64 = 1e-12;

/// Inverse by Gauss-Jordan elimination with partial pivoting.
///
/// A pivot is rejected when its magnitude falls below `1e-12` times the
/// largest absolute entry of the row it came from in the original matrix.
pub fn exact_inverse(a: &Mat) -> Result<Mat, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare(a.shape()));
    }
    let n = a.rows();
    let id = Mat::identity(n);
    gauss_jordan(a, &id)
}

/// Solves `A X = B` by Gauss-Jordan elimination with partial pivoting.
pub fn solve(a: &Mat, b: &Mat) -> Result<Mat, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare(a.shape()));
    }
    if a.rows() != b.rows() {
        return Err(LinalgError::DimensionMismatch {
            op: "solve",
            left: a.shape(),
            right: b.shape(),
        });
    }
    gauss_jordan(a, b)
}

fn gauss_jordan(a: &Mat, b: &Mat) -> Result<Mat, LinalgError> {
    let n = a.rows();
    let m = b.cols();
    let mut lhs = a.clone();
    let mut rhs = b.clone();
    // Scale of each row in the original matrix, carried along with swaps.
    let mut scale: Vec<f64> = (0..n)
        .map(|i| lhs.row(i).iter().fold(0.0f64, |s, v| s.max(v.abs())))
        .collect();

    for col in 0..n {
        let (piv_row, piv_abs) = (col..n)
            .map(|r| (r, lhs[(r, col)].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(piv_abs > PIVOT_REL_TOL * scale[piv_row]) || piv_abs == 0.0 {
            return Err(LinalgError::SingularMatrix {
                column: col,
                pivot: piv_abs,
            });
        }
        if piv_row != col {
            swap_rows(&mut lhs, piv_row, col);
            swap_rows(&mut rhs, piv_row, col);
            scale.swap(piv_row, col);
        }
        let inv_p = 1.0 / lhs[(col, col)];
        for v in lhs.row_mut(col) {
            *v *= inv_p;
        }
        for v in rhs.row_mut(col) {
            *v *= inv_p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = lhs[(r, col)];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                let p = lhs[(col, c)];
                lhs[(r, c)] -= f * p;
            }
            for c in 0..m {
                let p = rhs[(col, c)];
                rhs[(r, c)] -= f * p;
            }
        }
    }
    Ok(rhs)
}

fn swap_rows(m: &mut Mat, a: usize, b: usize) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    for c in 0..cols {
        data.swap(a * cols + c, b * cols + c);
    }
}

/// Convergence order ψ of the Newton–Schulz recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewtonOrder {
    /// `X(2I − AX)`
    Quadratic,
    /// `X(3I − 3AX + (AX)²)`
    Cubic,
    /// `X(4I − AX(6I − AX(4I − AX)))`
    Quartic,
}

impl NewtonOrder {
    pub fn from_psi(psi: u32) -> Result<Self, LinalgError> {
        match psi {
            2 => Ok(Self::Quadratic),
            3 => Ok(Self::Cubic),
            4 => Ok(Self::Quartic),
            other => Err(LinalgError::InvalidConfig(format!(
                "Newton order must be 2, 3 or 4, got {other}"
            ))),
        }
    }

    pub fn psi(self) -> u32 {
        match self {
            Self::Quadratic => 2,
            Self::Cubic => 3,
            Self::Quartic => 4,
        }
    }
}

/// Scaling of the initial iterate `X₀ = α Aᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    /// `α = 1 / Tr(AᵀA)`
    Trace,
    /// `α = 1 / (‖A‖₂ ‖A‖_∞)`
    NormProduct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    pub order: NewtonOrder,
    pub max_iters: usize,
    pub residual_tol: f64,
    pub alpha_mode: AlphaMode,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            order: NewtonOrder::Cubic,
            max_iters: 30,
            residual_tol: 1e-6,
            alpha_mode: AlphaMode::Trace,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<(), LinalgError> {
        if self.max_iters == 0 {
            return Err(LinalgError::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.residual_tol > 0.0) {
            return Err(LinalgError::InvalidConfig("residual_tol must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub inverse: Mat,
    /// Number of recurrence updates applied.
    pub iterations: usize,
    pub residual: f64,
    /// `‖AX_k − I‖_F` for `k = 0..=iterations`.
    pub residuals: Vec<f64>,
}

fn residual(a: &Mat, x: &Mat) -> (Mat, f64) {
    let ax = a.mul_unchecked(x);
    let r = ax.sub(&Mat::identity(a.rows())).expect("square").frobenius_norm();
    (ax, r)
}

/// Newton–Schulz iterative inverse.
///
/// Stops as soon as `‖AX − I‖_F ≤ residual_tol`, otherwise returns the iterate
/// after `max_iters` updates. Fails with [`LinalgError::Diverged`] when the
/// residual grows past ten times its starting value.
pub fn newton_schulz_inverse(a: &Mat, cfg: &NewtonConfig) -> Result<NewtonResult, LinalgError> {
    cfg.validate()?;
    if !a.is_square() {
        return Err(LinalgError::NotSquare(a.shape()));
    }
    let n = a.rows();
    let alpha = match cfg.alpha_mode {
        AlphaMode::Trace => {
            let t = a.frobenius_norm().powi(2);
            if t == 0.0 {
                return Err(LinalgError::SingularMatrix { column: 0, pivot: 0.0 });
            }
            1.0 / t
        }
        AlphaMode::NormProduct => {
            let two = spectral_norm(a, SPECTRAL_MAX_ITERS, SPECTRAL_TOL)
                .map_err(|_| LinalgError::SingularMatrix { column: 0, pivot: 0.0 })?;
            1.0 / (two * a.inf_norm())
        }
    };
    let mut x = a.transpose().scale(alpha);
    let id = Mat::identity(n);
    let (mut ax, r0) = residual(a, &x);
    let mut residuals = vec![r0];
    let mut iterations = 0;
    let mut current = r0;

    while current > cfg.residual_tol && iterations < cfg.max_iters {
        let poly = match cfg.order {
            NewtonOrder::Quadratic => id.scale(2.0).sub(&ax).expect("square"),
            NewtonOrder::Cubic => {
                let ax2 = ax.mul_unchecked(&ax);
                let mut p = id.scale(3.0);
                p.axpy(-3.0, &ax).expect("square");
                p.axpy(1.0, &ax2).expect("square");
                p
            }
            NewtonOrder::Quartic => {
                let inner = id.scale(4.0).sub(&ax).expect("square");
                let mid = id.scale(6.0).sub(&ax.mul_unchecked(&inner)).expect("square");
                id.scale(4.0).sub(&ax.mul_unchecked(&mid)).expect("square")
            }
        };
        x = x.mul_unchecked(&poly);
        iterations += 1;
        let (next_ax, r) = residual(a, &x);
        ax = next_ax;
        current = r;
        residuals.push(r);
        if !r.is_finite() || r > 10.0 * r0 {
            return Err(LinalgError::Diverged {
                iteration: iterations,
                residual: r,
                initial: r0,
            });
        }
    }

    Ok(NewtonResult {
        inverse: x,
        iterations,
        residual: current,
        residuals,
    })
}

/// First-order update of `A⁻¹` for the shift `A → A + dλ·I`:
/// `A⁻¹ − dλ·A⁻¹A⁻¹`. Error against the exact inverse is `O(dλ²)`.
pub fn lazy_inverse_update(a_inv: &Mat, d_lambda: f64) -> Mat {
    if d_lambda == 0.0 {
        return a_inv.clone();
    }
    let mut out = a_inv.clone();
    out.axpy(-d_lambda, &a_inv.mul_unchecked(a_inv)).expect("same shape");
    out
}
