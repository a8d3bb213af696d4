use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative covariance factors of all grouping factors, concatenated.
///
/// Each factor with `q` random terms contributes the `q(q+1)/2` lower-triangular
/// entries of `T_f` in column-major order; the random-effect covariance is
/// `σ²·T_f·T_fᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub values: Vec<f64>,
}

/// Per-factor sizes used to slice a [`Theta`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaLayout {
    pub dims: Vec<usize>,
}

impl ThetaLayout {
    pub fn new(dims: Vec<usize>) -> Self {
        ThetaLayout { dims }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().map(|q| q * (q + 1) / 2).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lower bounds: 0 on diagonal entries, unbounded elsewhere.
    pub fn lower_bounds(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for &q in &self.dims {
            for j in 0..q {
                for i in j..q {
                    out.push(if i == j { 0.0 } else { f64::NEG_INFINITY });
                }
            }
        }
        out
    }

    /// Positions of diagonal entries in the flat vector.
    pub fn diagonal_positions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut pos = 0;
        for &q in &self.dims {
            for j in 0..q {
                out.push(pos);
                pos += q - j;
            }
        }
        out
    }

    /// Diagonal entries set to `diag`, off-diagonal entries to zero.
    pub fn initial(&self, diag: f64) -> Theta {
        let mut v = vec![0.0; self.len()];
        for p in self.diagonal_positions() {
            v[p] = diag;
        }
        Theta { values: v }
    }

    pub fn check(&self, theta: &Theta) -> Result<()> {
        if theta.values.len() != self.len() {
            return Err(Error::validation(format!(
                "theta has {} entries but the model needs {}",
                theta.values.len(),
                self.len()
            )));
        }
        if let Some(p) = self
            .diagonal_positions()
            .into_iter()
            .find(|&p| !(theta.values[p] >= 0.0))
        {
            return Err(Error::validation(format!(
                "theta[{p}] = {} is a diagonal entry and must be >= 0",
                theta.values[p]
            )));
        }
        if theta.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("theta must be finite"));
        }
        Ok(())
    }

    /// The lower-triangular factor of each grouping factor.
    pub fn factors(&self, theta: &[f64]) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(self.dims.len());
        let mut pos = 0;
        for &q in &self.dims {
            let mut t = DMatrix::zeros(q, q);
            for j in 0..q {
                for i in j..q {
                    t[(i, j)] = theta[pos];
                    pos += 1;
                }
            }
            out.push(t);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_for_two_by_two() {
        let l = ThetaLayout::new(vec![2, 2]);
        assert_eq!(l.len(), 6);
        assert_eq!(l.diagonal_positions(), vec![0, 2, 3, 5]);
        let lb = l.lower_bounds();
        assert_eq!(lb[0], 0.0);
        assert_eq!(lb[1], f64::NEG_INFINITY);
        let f = l.factors(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(f[0][(1, 0)], 2.0);
        assert_eq!(f[0][(1, 1)], 3.0);
        assert_eq!(f[1][(0, 0)], 4.0);
        assert_eq!(f[0][(0, 1)], 0.0);
    }

    #[test]
    fn negative_diagonal_rejected() {
        let l = ThetaLayout::new(vec![1, 2]);
        assert!(l
            .check(&Theta {
                values: vec![0.1, 0.2, -0.3, 0.4]
            })
            .is_ok());
        assert!(l
            .check(&Theta {
                values: vec![0.1, 0.2, 0.3, -0.4]
            })
            .is_err());
        assert!(l.check(&Theta { values: vec![0.1] }).is_err());
    }
}
