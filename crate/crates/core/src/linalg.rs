//! Dense LU factorization with partial (row) pivoting.

use crate::error::{Error, Result};

/// Row-major square matrix factored in place as `PA = LU`.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    factors: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(n: usize, mut a: Vec<f64>) -> Result<Self> {
        assert_eq!(a.len(), n * n, "matrix buffer must be n*n");
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (pivot_row, pivot_abs) =
                (k..n)
                    .map(|r| (r, a[r * n + k].abs()))
                    .fold(
                        (k, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            if pivot_abs == 0.0 || !pivot_abs.is_finite() {
                return Err(Error::IllConditioned {
                    residual: f64::INFINITY,
                });
            }
            if pivot_row != k {
                for c in 0..n {
                    a.swap(k * n + c, pivot_row * n + c);
                }
                perm.swap(k, pivot_row);
            }
            let pivot = a[k * n + k];
            for r in k + 1..n {
                let factor = a[r * n + k] / pivot;
                a[r * n + k] = factor;
                if factor != 0.0 {
                    for c in k + 1..n {
                        a[r * n + c] -= factor * a[k * n + c];
                    }
                }
            }
        }
        Ok(Self {
            n,
            factors: a,
            perm,
        })
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let mut acc = x[r];
            for c in 0..r {
                acc -= self.factors[r * n + c] * x[c];
            }
            x[r] = acc;
        }
        for r in (0..n).rev() {
            let mut acc = x[r];
            for c in r + 1..n {
                acc -= self.factors[r * n + c] * x[c];
            }
            x[r] = acc / self.factors[r * n + r];
        }
        x
    }
}

/// `‖A x − b‖∞` for a row-major `A`.
pub fn residual_inf(n: usize, a: &[f64], x: &[f64], b: &[f64]) -> f64 {
    (0..n)
        .map(|r| {
            let ax: f64 = (0..n).map(|c| a[r * n + c] * x[c]).sum();
            (ax - b[r]).abs()
        })
        .fold(0.0, f64::max)
}

/// Transpose of a row-major square matrix.
pub fn transpose(n: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            t[c * n + r] = a[r * n + c];
        }
    }
    t
}
