//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Cholesky factor of a symmetric positive-definite matrix, with the
/// diagonal jitter (if any) that was needed to obtain it.
pub(crate) struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub jitter: f64,
}

impl SpdFactor {
    /// Factor `s`; on failure add `1e-10 * trace / n` to the diagonal and
    /// retry, growing the jitter tenfold a few times.
    pub fn new(s: DMatrix<f64>) -> Option<SpdFactor> {
        if let Some(chol) = Cholesky::new(s.clone()) {
            return Some(SpdFactor { chol, jitter: 0.0 });
        }
        let n = s.nrows().max(1) as f64;
        let base = 1e-10 * s.trace().abs().max(f64::MIN_POSITIVE) / n;
        let mut jitter = base;
        for _ in 0..6 {
            let mut t = s.clone();
            for i in 0..t.nrows() {
                t[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(t) {
                return Some(SpdFactor { chol, jitter });
            }
            jitter *= 10.0;
        }
        None
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>()
    }
}

/// `W' diag(d) W` for nonnegative `d`.
pub(crate) fn weighted_gram(w: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let mut b = w.clone();
    for (i, mut row) in b.row_iter_mut().enumerate() {
        row *= d[i].sqrt();
    }
    b.tr_mul(&b)
}

/// Orthonormal basis of the column space of `w` (assumed full column rank).
pub(crate) fn column_basis(w: &DMatrix<f64>) -> DMatrix<f64> {
    w.clone().qr().q()
}

/// `log sum exp` of the finite entries; `-inf` when none are finite.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = values
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| (v - max).exp())
        .sum();
    max + s.ln()
}
