//! Dense linear algebra helpers built on `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of a symmetric matrix after diagonal jitter.
///
/// The jitter starts at `1e-10` times the mean diagonal and grows by a factor of ten
/// until the factorization succeeds, up to `1e-4` times the mean diagonal.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    chol: Cholesky<f64, Dyn>,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn new(matrix: &DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if n != matrix.ncols() {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: matrix.ncols(),
            });
        }
        if n == 0 {
            return Err(Error::InvalidArgument("empty matrix".into()));
        }
        let mean_diag = (matrix.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * mean_diag;
            let mut m = matrix.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                let ok = chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0);
                if ok {
                    return Ok(Self { chol, jitter });
                }
            }
            rel *= 10.0;
        }
        Err(Error::NotPositiveDefinite {
            jitter: JITTER_MAX * mean_diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Solves `L x = b` for the lower factor `L`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// Solves `L x = b` for a single right-hand side.
    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// `log det(A)` for a symmetric positive definite matrix.
pub fn log_det_spd(matrix: &DMatrix<f64>) -> Result<f64> {
    Ok(JitteredCholesky::new(matrix)?.log_det())
}

/// Symmetrizes in place: `A ← (A + Aᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Leading `k × k` block of a square matrix.
pub fn leading_block(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    m.view((0, 0), (k, k)).into_owned()
}
