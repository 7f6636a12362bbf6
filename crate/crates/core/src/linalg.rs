//! Dense row-major kernels and a symmetric positive-definite solver.
//!
//! Matrices are plain `&[f64]` slices in row-major order with explicit
//! dimensions; everything here is small enough that a blocked BLAS would not
//! pay for itself.

use crate::error::{Error, Result};

/// `out (m×n) += a (m×k) · b (k×n)`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `a (m×k) · b (k×n) + bias (n)` broadcast over rows.
pub fn affine(a: &[f64], w: &[f64], bias: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for _ in 0..m {
        out.extend_from_slice(bias);
    }
    matmul_acc(a, w, &mut out, m, k, n);
    out
}

/// `out (k×n) += aᵀ · b` where `a` is m×k and `b` is m×n.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `a (m×n) · bᵀ` where `b` is k×n; returns m×k.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = dot(a_row, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

/// `xᵀ · w` for a single row vector `x` (k) and `w` (k×n).
pub fn vec_mat(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    matmul_acc(x, w, &mut out, 1, x.len(), n);
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators let the compiler vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Cholesky factor `L` of a symmetric positive-definite matrix (`A = L Lᵀ`).
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factorizes the n×n matrix `a`. A pivot at or below
    /// `rel_tol · max(diag(a))` is treated as loss of definiteness.
    pub fn factor(a: &[f64], n: usize, rel_tol: f64) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::invalid(format!(
                "cholesky: expected {}x{} matrix, got {} entries",
                n,
                n,
                a.len()
            )));
        }
        let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
        let floor = rel_tol * max_diag.max(f64::MIN_POSITIVE);
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a[j * n + j] - dot(&l[j * n..j * n + j], &l[j * n..j * n + j]);
            if !(d > floor) || !d.is_finite() {
                return Err(Error::Numeric(format!(
                    "matrix not positive definite (pivot {j} = {d:e})"
                )));
            }
            d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let s = a[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n, "cholesky solve: dimension mismatch");
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let s = dot(&l[i * n..i * n + i], &y[..i]);
            y[i] = (y[i] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s -= l[j * n + i] * y[j];
            }
            y[i] = s / l[i * n + i];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut out = vec![0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, vec![58.0, 64.0, 139.0, 154.0]);

        // aᵀ b with a 2x3, b 2x2 -> 3x2
        let bb = [1.0, 0.0, 0.0, 1.0];
        let mut t = vec![0.0; 6];
        matmul_at_b_acc(&a, &bb, &mut t, 2, 3, 2);
        assert_eq!(t, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);

        // a (2x3) · aᵀ
        let g = matmul_a_bt(&a, &a, 2, 3, 2);
        assert_eq!(g, vec![14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let ch = Cholesky::factor(&a, 3, 1e-14).unwrap();
        let x = ch.solve(&[1.0, 2.0, 3.0]);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| a[i * 3 + j] * x[j]).sum();
            assert!((r - [1.0, 2.0, 3.0][i]).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_singular() {
        let a = [1.0, 1.0, 1.0, 1.0];
        assert!(Cholesky::factor(&a, 2, 1e-12).is_err());
    }
}
