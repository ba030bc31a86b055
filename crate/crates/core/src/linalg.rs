//! Dense linear algebra on raw tensors.
//!
//! These routines are the compute kernels underneath the gradient graph; the
//! graph ops in [`crate::graph`] call into them for both forward values and
//! analytic adjoints. Everything is single-threaded and loop-ordered so the
//! innermost accesses are contiguous.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// C = A·B for row-major matrices.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
    let mut c = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let cd = c.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let crow = &mut cd[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &bd[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C = A·Bᵀ (rows of both operands are contiguous dot products).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul_nt inner dims {k} vs {kb}");
    let mut c = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let cd = c.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let crow = &mut cd[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            *cv = acc;
        }
    }
    c
}

/// C = Aᵀ·B.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (mb, n) = (b.rows(), b.cols());
    assert_eq!(m, mb, "matmul_tn outer dims {m} vs {mb}");
    let mut c = Tensor::zeros(&[k, n]);
    let (ad, bd) = (a.data(), b.data());
    let cd = c.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let brow = &bd[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let crow = &mut cd[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// Jitter escalation ladder for near-PSD factorizations: candidate ε values
/// are `multiplier · mean(diag A)` (or the bare multiplier when the diagonal
/// mean is not positive), tried in order until the factorization succeeds.
#[derive(Clone, Debug)]
pub struct JitterPolicy {
    pub multipliers: Vec<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy { multipliers: vec![0.0, 1e-10, 1e-8, 1e-6, 1e-4] }
    }
}

/// Result of a guarded Cholesky factorization: `factor·factorᵀ = A + jitter·I`.
#[derive(Clone, Debug)]
pub struct Chol {
    pub factor: Tensor,
    pub jitter: f64,
}

/// Max |A − Aᵀ| over all entries.
pub fn max_asymmetry(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a.get2(i, j) - a.get2(j, i)).abs());
        }
    }
    worst
}

fn cholesky_attempt(a: &Tensor, eps: f64) -> Option<Tensor> {
    let n = a.rows();
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.get2(i, j);
            if i == j {
                acc += eps;
            }
            for k in 0..j {
                acc -= l.get2(i, k) * l.get2(j, k);
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return None;
                }
                l.set2(i, i, libm::sqrt(acc));
            } else {
                let v = acc / l.get2(j, j);
                if !v.is_finite() {
                    return None;
                }
                l.set2(i, j, v);
            }
        }
    }
    Some(l)
}

/// Cholesky factorization of a symmetric PSD matrix with a jitter ladder.
///
/// The matrix must be symmetric within 1e-10 relative tolerance. Returns the
/// lower-triangular factor of `A + εI` for the smallest ε in the ladder that
/// succeeds, together with the ε used.
pub fn cholesky_psd(a: &Tensor, policy: &JitterPolicy) -> Result<Chol> {
    assert_eq!(a.rank(), 2, "cholesky expects a matrix");
    assert_eq!(a.rows(), a.cols(), "cholesky expects a square matrix");
    let scale = a.max_abs();
    let asym = max_asymmetry(a);
    if asym > 1e-10 * scale.max(1.0) {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    let n = a.rows();
    let mean_diag = (0..n).map(|i| a.get2(i, i)).sum::<f64>() / n.max(1) as f64;
    let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    for &mult in &policy.multipliers {
        let eps = mult * base;
        if let Some(l) = cholesky_attempt(a, eps) {
            return Ok(Chol { factor: l, jitter: eps });
        }
    }
    Err(Error::FactorizationFailure {
        detail: format!("jitter ladder exhausted (n={n}, mean diag {mean_diag:e})"),
    })
}

/// Solve op(L)·X = B for lower-triangular L with any number of right-hand
/// sides (columns of B); `transpose` selects op(L) = Lᵀ.
pub fn solve_triangular(l: &Tensor, b: &Tensor, transpose: bool) -> Result<Tensor> {
    let m = l.rows();
    assert_eq!(l.cols(), m, "triangular factor must be square");
    let vecrhs = b.rank() == 1;
    let (bm, n) = if vecrhs { (b.len(), 1) } else { (b.rows(), b.cols()) };
    assert_eq!(bm, m, "rhs rows {bm} vs factor size {m}");
    for i in 0..m {
        let d = l.get2(i, i);
        if d.abs() < 1e-300 {
            return Err(Error::SingularDiagonal { index: i, value: d });
        }
    }
    let mut x = b.clone();
    if vecrhs {
        x = x.reshaped(vec![m, 1]);
    }
    let ld = l.data();
    let xd = x.data_mut();
    if !transpose {
        for i in 0..m {
            let lrow = &ld[i * m..i * m + i];
            // X[i,:] = (B[i,:] − Σ_{j<i} L[i,j]·X[j,:]) / L[i,i]
            for (j, &lv) in lrow.iter().enumerate() {
                if lv != 0.0 {
                    let (head, tail) = xd.split_at_mut(i * n);
                    let xrow_j = &head[j * n..(j + 1) * n];
                    let xrow_i = &mut tail[..n];
                    for t in 0..n {
                        xrow_i[t] -= lv * xrow_j[t];
                    }
                }
            }
            let inv = 1.0 / ld[i * m + i];
            for v in &mut xd[i * n..(i + 1) * n] {
                *v *= inv;
            }
        }
    } else {
        for ii in 0..m {
            let i = m - 1 - ii;
            // X[i,:] = (B[i,:] − Σ_{j>i} L[j,i]·X[j,:]) / L[i,i]
            for j in (i + 1)..m {
                let lv = ld[j * m + i];
                if lv != 0.0 {
                    let (head, tail) = xd.split_at_mut(j * n);
                    let xrow_i = &mut head[i * n..(i + 1) * n];
                    let xrow_j = &tail[..n];
                    for t in 0..n {
                        xrow_i[t] -= lv * xrow_j[t];
                    }
                }
            }
            let inv = 1.0 / ld[i * m + i];
            for v in &mut xd[i * n..(i + 1) * n] {
                *v *= inv;
            }
        }
    }
    if vecrhs {
        x = x.reshaped(vec![m]);
    }
    Ok(x)
}

/// Solve A·X = B for symmetric PSD A via the guarded Cholesky.
pub fn solve_psd(a: &Tensor, b: &Tensor, policy: &JitterPolicy) -> Result<Tensor> {
    let chol = cholesky_psd(a, policy)?;
    let y = solve_triangular(&chol.factor, b, false)?;
    solve_triangular(&chol.factor, &y, true)
}

/// Kronecker product A ⊗ B.
pub fn kron(a: &Tensor, b: &Tensor) -> Tensor {
    let (ra, ca) = (a.rows(), a.cols());
    let (rb, cb) = (b.rows(), b.cols());
    let mut out = Tensor::zeros(&[ra * rb, ca * cb]);
    for i in 0..ra {
        for j in 0..ca {
            let av = a.get2(i, j);
            if av == 0.0 {
                continue;
            }
            for p in 0..rb {
                for q in 0..cb {
                    out.set2(i * rb + p, j * cb + q, av * b.get2(p, q));
                }
            }
        }
    }
    out
}

/// Strictly-lower + halved-diagonal masking used by the Cholesky adjoint.
pub(crate) fn phi_lower_half_diag(x: &Tensor) -> Tensor {
    let n = x.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..i {
            out.set2(i, j, x.get2(i, j));
        }
        out.set2(i, i, 0.5 * x.get2(i, i));
    }
    out
}
