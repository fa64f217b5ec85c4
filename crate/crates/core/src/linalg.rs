//! Dense symmetric positive-definite solves for the ridge probes.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a row-major `n×n` SPD matrix.
#[derive(Debug, Clone)]
pub(crate) struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub(crate) fn factor(a: &[f64], n: usize) -> Result<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::invalid(format!(
                            "matrix is not positive definite (pivot {i} = {s})"
                        )));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Cholesky { n, l })
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    /// Solve `a x = b`, followed by one step of iterative refinement against
    /// the original matrix.
    pub(crate) fn solve_refined(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut x = self.solve(b);
        let r = residual(a, self.n, &x, b);
        let dx = self.solve(&r);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
        x
    }
}

/// `b - a x` for a row-major square `a`.
pub(crate) fn residual(a: &[f64], n: usize, x: &[f64], b: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let ax: f64 = (0..n).map(|j| a[i * n + j] * x[j]).sum();
            b[i] - ax
        })
        .collect()
}

/// Ridge normal equations for design `[h | 1]`: returns `(AᵀA + εI, Aᵀt)`
/// with `A` the `n×(d+1)` augmented design.
pub(crate) fn ridge_system(h: &[f64], n: usize, d: usize, targets: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let m = d + 1;
    let mut gram = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    let mut row = vec![0.0; m];
    for i in 0..n {
        row[..d].copy_from_slice(&h[i * d..(i + 1) * d]);
        row[d] = 1.0;
        for a in 0..m {
            let ra = row[a];
            rhs[a] += ra * targets[i];
            for b in a..m {
                gram[a * m + b] += ra * row[b];
            }
        }
    }
    for a in 0..m {
        gram[a * m + a] += eps;
        for b in 0..a {
            gram[a * m + b] = gram[b * m + a];
        }
    }
    (gram, rhs)
}
