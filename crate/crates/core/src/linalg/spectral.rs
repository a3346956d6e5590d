use super::{LinalgError, Mat};

/// Default power-iteration budget for damping computations.
pub const SPECTRAL_MAX_ITERS: usize = 50;
/// Default relative convergence tolerance for power iteration.
pub const SPECTRAL_TOL: f64 = 1e-8;

/// Largest singular value of `a` by power iteration on `AᵀA`.
///
/// The start vector is the normalized all-ones vector, so the result is a
/// deterministic function of `a`. Iteration stops once the estimate changes
/// by less than `tol` relative, or after `max_iters` products. An estimate
/// below the largest column norm (a lower bound on `‖A‖₂`) means the start
/// vector was nearly orthogonal to the top singular direction; the iteration
/// then restarts from that column.
pub fn spectral_norm(a: &Mat, max_iters: usize, tol: f64) -> Result<f64, LinalgError> {
    if a.frobenius_norm() == 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }
    let n = a.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut estimate = 0.0;
    for it in 0..max_iters.max(1) {
        let av = a.matvec(&v)?;
        let atav = a.t_matvec(&av);
        let norm = l2(&atav);
        if norm == 0.0 {
            // Start vector in the null space; fall back to the largest column.
            if it == 0 {
                return Ok(largest_column_restart(a, max_iters, tol));
            }
            break;
        }
        // Rayleigh quotient vᵀAᵀAv with ‖v‖ = 1.
        let next = l2(&av);
        for (vi, wi) in v.iter_mut().zip(&atav) {
            *vi = wi / norm;
        }
        let done = it > 0 && (next - estimate).abs() <= tol * next;
        estimate = next;
        if done {
            break;
        }
    }
    if estimate < max_column_norm(a) {
        return Ok(largest_column_restart(a, max_iters, tol));
    }
    Ok(estimate)
}

fn max_column_norm(a: &Mat) -> f64 {
    (0..a.cols())
        .map(|c| (0..a.rows()).map(|r| a[(r, c)].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn largest_column_restart(a: &Mat, max_iters: usize, tol: f64) -> f64 {
    let n = a.cols();
    let best = (0..n)
        .max_by(|&i, &j| {
            let ci: f64 = (0..a.rows()).map(|r| a[(r, i)].powi(2)).sum();
            let cj: f64 = (0..a.rows()).map(|r| a[(r, j)].powi(2)).sum();
            ci.total_cmp(&cj)
        })
        .unwrap_or(0);
    let mut v = vec![0.0; n];
    v[best] = 1.0;
    let mut estimate = 0.0;
    for it in 0..max_iters.max(1) {
        let av = a.matvec(&v).expect("conformable");
        let atav = a.t_matvec(&av);
        let norm = l2(&atav);
        let next = l2(&av);
        if norm == 0.0 {
            return next;
        }
        for (vi, wi) in v.iter_mut().zip(&atav) {
            *vi = wi / norm;
        }
        let done = it > 0 && (next - estimate).abs() <= tol * next;
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Mat {
    /// `selfᵀ v`
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows(), v.len());
        let mut out = vec![0.0; self.cols()];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
///
/// Only the symmetric part of `a` is used.
pub fn symmetric_eigenvalues(a: &Mat) -> Result<Vec<f64>, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare(a.shape()));
    }
    let n = a.rows();
    let mut m = a.symmetrized();
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig = m.diag();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// `λ_max / λ_min` of a symmetric positive definite matrix. Returns
/// `INFINITY` when the smallest eigenvalue is not positive.
pub fn condition_number(a: &Mat) -> Result<f64, LinalgError> {
    let eig = symmetric_eigenvalues(a)?;
    let (lo, hi) = (eig[0], eig[eig.len() - 1]);
    Ok(if lo <= 0.0 { f64::INFINITY } else { hi / lo })
}

/// `(A ⊗ B) vec(C)` returned as the matrix `B C Aᵀ`, without forming `A ⊗ B`.
pub fn kron_matvec(a: &Mat, b: &Mat, c: &Mat) -> Result<Mat, LinalgError> {
    if b.cols() != c.rows() || a.cols() != c.cols() {
        return Err(LinalgError::DimensionMismatch {
            op: "kron_matvec",
            left: (a.rows() * b.rows(), a.cols() * b.cols()),
            right: c.shape(),
        });
    }
    let bc = b.mul_unchecked(c);
    Ok(bc.mul_unchecked(&a.transpose()))
}
