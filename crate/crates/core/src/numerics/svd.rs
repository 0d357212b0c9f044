use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::Result;

/// Column-pair orthogonality threshold for the one-sided Jacobi sweeps.
pub const SVD_TOLERANCE: f64 = 1e-12;
pub const SVD_MAX_SWEEPS: usize = 60;

/// Thin SVD `W = U · diag(S) · Vt` with `p = min(m, n)`.
///
/// Singular values are non-negative and non-increasing. Signs of paired
/// singular vectors are not normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `m × p`
    pub u: Tensor,
    /// length `p`
    pub s: Vec<f64>,
    /// `p × n`
    pub vt: Tensor,
}

impl SvdFactors {
    /// `Σ_{i<r} s_i u_i v_iᵀ`, dense `m × n`.
    pub fn truncated(&self, r: usize) -> Tensor {
        let m = self.u.shape()[0];
        let p = self.s.len();
        let n = self.vt.shape()[1];
        let r = r.min(p);
        let mut out = Tensor::zeros(&[m, n]);
        let u = self.u.data();
        let vt = self.vt.data();
        let data = out.data_mut();
        for t in 0..r {
            let s = self.s[t];
            if s == 0.0 {
                continue;
            }
            let vrow = &vt[t * n..(t + 1) * n];
            for i in 0..m {
                let coeff = u[i * p + t] * s;
                if coeff == 0.0 {
                    continue;
                }
                let row = &mut data[i * n..(i + 1) * n];
                for (o, &v) in row.iter_mut().zip(vrow) {
                    *o += coeff * v;
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Tensor {
        self.truncated(self.s.len())
    }
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(w: &Tensor) -> Result<SvdFactors> {
    let (m, n) = w.dims2()?;
    w.check_finite()?;
    if m >= n {
        let (u, s, v) = jacobi_tall(w.data(), m, n);
        Ok(SvdFactors {
            u: Tensor::matrix(m, n, u).expect("u shape"),
            s,
            vt: Tensor::matrix(n, n, transpose(&v, n, n)).expect("vt shape"),
        })
    } else {
        // Wᵀ = U' S V'ᵀ  ⇒  W = V' S U'ᵀ
        let wt = w.transpose()?;
        let (u2, s, v2) = jacobi_tall(wt.data(), n, m);
        Ok(SvdFactors {
            u: Tensor::matrix(m, m, v2).expect("u shape"),
            s,
            vt: Tensor::matrix(m, n, transpose(&u2, n, m)).expect("vt shape"),
        })
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (gp, gq) = (&mut left[p], &mut right[0]);
    for (x, y) in gp.iter_mut().zip(gq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Returns row-major `U (m×n)`, `S (n)`, `V (n×n)` for `m >= n`.
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // Column-major working copies.
    let mut g: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a[i * n + j]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut col = vec![0.0; n];
            col[j] = 1.0;
            col
        })
        .collect();

    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&g[p], &g[p]);
                let beta = dot(&g[q], &g[q]);
                let gamma = dot(&g[p], &g[q]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                if gamma.abs() <= SVD_TOLERANCE * libm::sqrt(alpha) * libm::sqrt(beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = g.iter().map(|col| libm::sqrt(dot(col, col))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for &j in &order {
        let sigma = norms[j];
        let inv = 1.0 / sigma;
        if sigma == 0.0 || !inv.is_finite() {
            s.push(0.0);
            deficient.push(u_cols.len());
            u_cols.push(vec![0.0; m]);
        } else {
            s.push(sigma);
            u_cols.push(g[j].iter().map(|x| x * inv).collect());
        }
        v_cols.push(v[j].clone());
    }
    complete_basis(&mut u_cols, &deficient, m);

    let mut u = vec![0.0; m * n];
    for (j, col) in u_cols.iter().enumerate() {
        for i in 0..m {
            u[i * n + j] = col[i];
        }
    }
    let mut vr = vec![0.0; n * n];
    for (j, col) in v_cols.iter().enumerate() {
        for i in 0..n {
            vr[i * n + j] = col[i];
        }
    }
    (u, s, vr)
}

/// Fills the `slots` columns with unit vectors orthogonal to all others.
fn complete_basis(cols: &mut [Vec<f64>], slots: &[usize], m: usize) {
    let mut candidate = 0usize;
    for &slot in slots {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if j == slot || (slots.contains(&j) && col.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&e, col);
                    for (x, c) in e.iter_mut().zip(col) {
                        *x -= proj * c;
                    }
                }
            }
            let norm = libm::sqrt(dot(&e, &e));
            if norm > 0.5 {
                cols[slot] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}
