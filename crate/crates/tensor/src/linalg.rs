//! Small dense LU factorization, enough for the channel-mixing matrices of
//! invertible 1×1 convolutions.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// LU factorization with partial pivoting, `P·A = L·U` packed in one buffer.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

fn square_dim(a: &Tensor) -> Result<usize> {
    match a.shape() {
        &[r, c] if r == c => Ok(r),
        other => Err(TensorError::InvalidShape {
            shape: other.to_vec(),
            reason: "expected a square matrix".into(),
        }),
    }
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Lu> {
        let n = square_dim(a)?;
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (pivot_row, pivot) = (k..n)
                .map(|r| (r, lu[r * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(TensorError::Singular);
            }
            if pivot_row != k {
                for j in 0..n {
                    lu.swap(k * n + j, pivot_row * n + j);
                }
                perm.swap(k, pivot_row);
                sign = -sign;
            }
            let diag = lu[k * n + k];
            for r in k + 1..n {
                let factor = lu[r * n + k] / diag;
                lu[r * n + k] = factor;
                for j in k + 1..n {
                    lu[r * n + j] -= factor * lu[k * n + j];
                }
            }
        }
        Ok(Lu { n, lu, perm, sign })
    }

    /// Sign and natural log of `|det A|`.
    pub fn log_abs_det(&self) -> (f64, f64) {
        let mut sign = self.sign;
        let mut log = 0.0;
        for k in 0..self.n {
            let d = self.lu[k * self.n + k];
            if d < 0.0 {
                sign = -sign;
            }
            log += d.abs().ln();
        }
        (sign, log)
    }

    pub fn det(&self) -> f64 {
        let (sign, log) = self.log_abs_det();
        sign * log.exp()
    }

    /// Solve `A x = b` for one right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Tensor {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for col in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[col] = 1.0;
            let x = self.solve_vec(&e);
            for row in 0..n {
                inv[row * n + col] = x[row];
            }
        }
        Tensor::from_parts(vec![n, n], inv)
    }
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    Ok(Lu::factor(a)?.inverse())
}

pub fn log_abs_det(a: &Tensor) -> Result<f64> {
    Ok(Lu::factor(a)?.log_abs_det().1)
}
