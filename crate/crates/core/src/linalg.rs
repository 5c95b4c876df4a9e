//! Cholesky factorisation and the log-determinant routines built on it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower-triangular factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    factor: Tensor,
}

impl Cholesky {
    /// Factorises a symmetric positive-definite matrix. Only the lower
    /// triangle of `a` is read.
    pub fn new(a: &Tensor) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::Shape(format!("cholesky of a {}x{} matrix", a.rows(), a.cols())));
        }
        let mut l = Tensor::zeros(n, n);
        for j in 0..n {
            let lj = l.row(j);
            let mut d = a[(j, j)] - dot(&lj[..j], &lj[..j]);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numerical(format!("non-positive pivot {d:e} at column {j}")));
            }
            d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
                l[(i, j)] = s / d;
            }
        }
        Ok(Cholesky { factor: l })
    }

    pub fn factor(&self) -> &Tensor {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    pub fn logdet(&self) -> f64 {
        (0..self.dim()).map(|i| self.factor[(i, i)].ln()).sum::<f64>() * 2.0
    }

    /// Diagonal pivots `L_ii`; all strictly positive by construction.
    pub fn pivots(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.factor[(i, i)]).collect()
    }

    /// `A⁻¹`, formed as `L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> Tensor {
        let n = self.dim();
        let l = &self.factor;
        // Row j of `linv_t` holds column j of L⁻¹ (i.e. L⁻¹ stored transposed),
        // so both triangular solves walk contiguous memory.
        let mut linv = Tensor::zeros(n, n);
        for j in 0..n {
            linv[(j, j)] = 1.0 / l[(j, j)];
            for i in j + 1..n {
                let mut s = 0.0;
                for k in j..i {
                    s -= l[(i, k)] * linv[(k, j)];
                }
                linv[(i, j)] = s / l[(i, i)];
            }
        }
        let linv_t = linv.transpose();
        let mut inv = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                // (L⁻ᵀ L⁻¹)_ij = Σ_k L⁻¹_ki L⁻¹_kj over k ≥ max(i, j) = i
                let s = dot(&linv_t.row(i)[i..], &linv_t.row(j)[i..]);
                inv[(i, j)] = s;
                inv[(j, i)] = s;
            }
        }
        inv
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let l = &self.factor;
        let mut y = b.to_vec();
        for i in 0..n {
            let s = dot(&l.row(i)[..i], &y[..i]);
            y[i] = (y[i] - s) / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        y
    }
}

/// Factorises `a + jitter·I`, escalating the jitter by 10x (starting from
/// `initial_jitter`, capped at `max_jitter`) only when the plain factorisation fails.
/// Returns the factor and the jitter actually applied (0 when none was needed).
pub fn cholesky_with_jitter(a: &Tensor, initial_jitter: f64, max_jitter: f64) -> Result<(Cholesky, f64)> {
    match Cholesky::new(a) {
        Ok(c) => return Ok((c, 0.0)),
        Err(Error::Shape(s)) => return Err(Error::Shape(s)),
        Err(_) => {}
    }
    let mut jitter = initial_jitter;
    let mut last = String::new();
    while jitter <= max_jitter * (1.0 + 1e-12) {
        let mut shifted = a.clone();
        for i in 0..a.rows() {
            shifted[(i, i)] += jitter;
        }
        match Cholesky::new(&shifted) {
            Ok(c) => return Ok((c, jitter)),
            Err(e) => last = e.to_string(),
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!("cholesky failed even with jitter {max_jitter:e}: {last}")))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize, seed: u64) -> Tensor {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let b = Tensor::from_vec(n, n, (0..n * n).map(|_| next()).collect());
        let mut a = b.matmul(&b.transpose());
        for i in 0..n {
            a[(i, i)] += 0.1;
        }
        a
    }

    #[test]
    fn reconstructs_and_inverts() {
        let a = spd(7, 3);
        let c = Cholesky::new(&a).unwrap();
        let l = c.factor();
        let back = l.matmul(&l.transpose());
        assert!(back.zip_map(&a, |x, y| x - y).max_abs() < 1e-12);
        let prod = a.matmul(&c.inverse());
        assert!(prod.zip_map(&Tensor::identity(7), |x, y| x - y).max_abs() < 1e-9);
        let x = c.solve(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let ax = a.matmul(&Tensor::from_vec(7, 1, x));
        for (i, v) in ax.data().iter().enumerate() {
            assert!((v - (i + 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn logdet_of_diagonal() {
        let mut a = Tensor::zeros(3, 3);
        a[(0, 0)] = 2.0;
        a[(1, 1)] = 3.0;
        a[(2, 2)] = 0.5;
        let c = Cholesky::new(&a).unwrap();
        assert!((c.logdet() - 3.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_needs_jitter() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        assert!(Cholesky::new(&a).is_err());
        let (_, used) = cholesky_with_jitter(&a, 1e-8, 1e-4).unwrap();
        assert!(used >= 1e-8);
        let neg = Tensor::from_vec(1, 1, vec![-1.0]);
        assert!(matches!(cholesky_with_jitter(&neg, 1e-8, 1e-4), Err(Error::Numerical(_))));
    }
}
