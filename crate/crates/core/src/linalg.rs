//! Symmetric positive-definite solves with escalating diagonal jitter.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// First jitter, relative to the mean diagonal entry.
pub const JITTER_START: f64 = 1e-12;
/// Largest jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-6;

/// Cholesky factor of `A + shift·I + jitter·I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    /// Extra diagonal added beyond the requested shift.
    pub jitter: f64,
}

impl SpdFactor {
    /// Factors `a + shift·I`. If that fails, jitter of `1e-12·trace(a)/m`
    /// is added and multiplied by ten until `1e-6·trace(a)/m`.
    pub fn new(a: &DMatrix<f64>, shift: f64) -> Result<Self> {
        let m = a.nrows();
        debug_assert_eq!(m, a.ncols());
        let mut shifted = a.clone();
        for i in 0..m {
            shifted[(i, i)] += shift;
        }
        if let Some(chol) = Cholesky::new(shifted.clone()) {
            return Ok(SpdFactor { chol, jitter: 0.0 });
        }

        let base = if m == 0 { 0.0 } else { a.trace().abs() / m as f64 };
        let base = if base > 0.0 { base } else { 1.0 };
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * base;
            let mut trial = shifted.clone();
            for i in 0..m {
                trial[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(trial) {
                return Ok(SpdFactor { chol, jitter });
            }
            rel *= 10.0;
        }
        Err(Error::Numerical {
            message: format!("Cholesky factorization of a {m}x{m} system failed after maximal jitter"),
            condition: condition_estimate(&shifted),
        })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_slice(&self, b: &[f64]) -> Vec<f64> {
        self.solve(&DVector::from_column_slice(b)).as_slice().to_vec()
    }
}

/// λ_max / |λ_min| of a symmetric matrix; infinite when singular.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 1.0;
    }
    let ev = a.clone().symmetric_eigenvalues();
    let max = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = ev.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_conditioned_needs_no_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let f = SpdFactor::new(&a, 0.0).unwrap();
        assert_eq!(f.jitter, 0.0);
        let x = f.solve_slice(&[3.0, 3.0]);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn duplicate_rows_trigger_jitter() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let f = SpdFactor::new(&a, 0.0).unwrap();
        assert!(f.jitter > 0.0 && f.jitter <= 1e-6);
    }

    #[test]
    fn indefinite_matrix_fails_with_condition() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match SpdFactor::new(&a, 0.0) {
            Err(Error::Numerical { condition, .. }) => assert!((condition - 1.0).abs() < 1e-12),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }
}
