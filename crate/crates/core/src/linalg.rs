//! Dense linear-algebra helpers shared by the posterior, inducing and credible modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Smallest ridge, relative to `trace / dim`, tried after a failed factorization.
pub const JITTER_START: f64 = 1e-10;
/// Largest ridge, relative to `trace / dim`, before giving up.
pub const JITTER_MAX: f64 = 1e-6;

/// A Cholesky factor together with the ridge that was needed to obtain it.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn l(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(rhs)
    }

    /// `L^{-1} rhs` for the lower factor `L`.
    pub fn solve_lower(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor
            .l_dirty()
            .solve_lower_triangular(rhs)
            .expect("cholesky factor has a nonzero diagonal")
    }

    pub fn solve_lower_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.factor
            .l_dirty()
            .solve_lower_triangular(rhs)
            .expect("cholesky factor has a nonzero diagonal")
    }

    pub fn log_det(&self) -> f64 {
        let l = self.factor.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

/// Cholesky factorization with the escalating-ridge fallback.
///
/// Tries the plain factorization first, then adds `c * trace / dim` to the
/// diagonal for `c = 1e-10, 1e-9, ..., 1e-6`.
pub fn cholesky_jittered(matrix: &DMatrix<f64>, what: &str) -> Result<JitteredCholesky> {
    let dim = matrix.nrows();
    if dim != matrix.ncols() {
        return Err(Error::numeric(
            format!("{what}: matrix is not square"),
            format!("shape {}x{}", dim, matrix.ncols()),
        ));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(
            format!("{what}: non-finite entries"),
            format!("dim={dim}"),
        ));
    }
    if let Some(factor) = Cholesky::new(matrix.clone()) {
        if factor_is_finite(&factor) {
            return Ok(JitteredCholesky { factor, jitter: 0.0 });
        }
    }
    let trace = matrix.trace();
    let scale = if dim > 0 && trace > 0.0 {
        trace / dim as f64
    } else {
        1.0
    };
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut shifted = matrix.clone();
        for i in 0..dim {
            shifted[(i, i)] += jitter;
        }
        if let Some(factor) = Cholesky::new(shifted) {
            if factor_is_finite(&factor) {
                return Ok(JitteredCholesky { factor, jitter });
            }
        }
        rel *= 10.0;
    }
    let (min_diag, max_diag) = matrix
        .diagonal()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    Err(Error::numeric(
        format!("{what}: cholesky failed after maximum jitter"),
        format!(
            "dim={dim}, trace={trace:.3e}, min_diag={min_diag:.3e}, max_diag={max_diag:.3e}, max_jitter={:.3e}",
            JITTER_MAX * scale
        ),
    ))
}

fn factor_is_finite(factor: &Cholesky<f64, Dyn>) -> bool {
    factor.l_dirty().iter().all(|v| v.is_finite())
}

/// Copies the upper triangle onto the lower one.
pub fn symmetrize_upper(matrix: &mut DMatrix<f64>) {
    let n = matrix.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            matrix[(i, j)] = matrix[(j, i)];
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues in nonincreasing order.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Eigenvalues, largest first.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: DMatrix<f64>,
}

impl SymmetricEigen {
    pub fn trace(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Zeroes eigenvalues in `[-tol * |trace|, 0)`; more negative values are kept.
    pub fn clamp_small_negative(&mut self, rel_tol: f64) {
        let tol = rel_tol * self.values.iter().map(|v| v.abs()).sum::<f64>();
        for v in &mut self.values {
            if *v < 0.0 && *v >= -tol {
                *v = 0.0;
            }
        }
    }
}

/// Self-adjoint eigendecomposition (backed by faer's divide-and-conquer solver).
///
/// faer runs sequentially so results do not depend on the worker count.
pub fn symmetric_eigen(matrix: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen> {
    let n = matrix.nrows();
    if n != matrix.ncols() {
        return Err(Error::numeric(
            format!("{what}: matrix is not square"),
            format!("shape {}x{}", n, matrix.ncols()),
        ));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(
            format!("{what}: non-finite entries"),
            format!("dim={n}"),
        ));
    }
    if n == 0 {
        return Ok(SymmetricEigen {
            values: Vec::new(),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    static SEQUENTIAL: std::sync::Once = std::sync::Once::new();
    SEQUENTIAL.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
    let mat = faer::Mat::<f64>::from_fn(n, n, |i, j| matrix[(i, j)]);
    let evd = mat
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::numeric(format!("{what}: eigendecomposition failed"), format!("{e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    // faer returns ascending order
    let values: Vec<f64> = (0..n).rev().map(|k| s[k]).collect();
    let vectors = DMatrix::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    Ok(SymmetricEigen { values, vectors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn jitter_rescues_a_singular_matrix() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let rank_one = &v * v.transpose();
        let chol = cholesky_jittered(&rank_one, "rank one").unwrap();
        assert!(chol.jitter > 0.0);
        assert!(chol.jitter <= JITTER_MAX * rank_one.trace() / 3.0 * 1.0001);
    }

    #[test]
    fn indefinite_matrix_is_a_numeric_error() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = cholesky_jittered(&m, "indefinite").unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn eigen_is_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]);
        let e = symmetric_eigen(&m, "test").unwrap();
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let d = DMatrix::from_diagonal(&DVector::from_vec(e.values.clone()));
        let back = &e.vectors * d * e.vectors.transpose();
        assert_relative_eq!(back, m, epsilon = 1e-12);
        let gram = e.vectors.transpose() * &e.vectors;
        assert_relative_eq!(gram, DMatrix::identity(3, 3), epsilon = 1e-12);
    }
}
