//! Sparse variational GP building blocks: inducing-point conditionals,
//! variational marginals, Gaussian KL divergences, and expected likelihoods
//! for regression (closed form) and binary classification (Gauss–Hermite).
//!
//! The variational covariance is parameterized by its Cholesky factor with a
//! log diagonal, so it stays PSD under unconstrained optimization. The
//! unwhitened parameterization (q directly over u) is used throughout.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::kernels::{KernelParams, KernelVars};
use crate::linalg::{self, JitterPolicy};
use crate::math;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Variance floor applied before any square root.
pub const VAR_FLOOR: f64 = 1e-12;

/// Lower-triangular matrix packed row-major with the diagonal in log space.
#[derive(Clone, Debug)]
pub struct PackedTril {
    m: usize,
    pub data: Tensor,
}

impl PackedTril {
    pub fn packed_len(m: usize) -> usize {
        m * (m + 1) / 2
    }

    /// Pack an explicit lower-triangular factor (positive diagonal required).
    pub fn from_lower(l: &Tensor) -> Self {
        let m = l.rows();
        let mut data = Vec::with_capacity(Self::packed_len(m));
        for i in 0..m {
            for j in 0..=i {
                let v = l.get2(i, j);
                if i == j {
                    assert!(v > 0.0, "diagonal must be positive, got {v}");
                    data.push(math::ln(v));
                } else {
                    data.push(v);
                }
            }
        }
        PackedTril { m, data: Tensor::vector(data) }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Unpack to the explicit M×M lower-triangular factor.
    pub fn to_lower(&self) -> Tensor {
        crate::graph::tril_logdiag_raw(&self.data, self.m)
    }

    /// Insert into a graph, yielding the built factor.
    pub fn insert(&self, g: &Graph, trainable: bool) -> (Var, Var) {
        let packed =
            if trainable { g.param(self.data.clone()) } else { g.constant(self.data.clone()) };
        (packed, g.tril_logdiag(packed, self.m))
    }
}

/// Variational Gaussian over inducing outputs: a mean with one covariance
/// factor per output dimension (S_d = L_d·L_dᵀ).
#[derive(Clone, Debug)]
pub struct VariationalGaussian {
    /// M×D_out matrix; column d is the mean of u_d.
    pub mean: Tensor,
    /// One packed factor per output dimension.
    pub factors: Vec<PackedTril>,
}

impl VariationalGaussian {
    /// q matching the prior N(0, K) given chol(K), replicated over dims.
    pub fn at_prior(l_prior: &Tensor, dout: usize) -> Self {
        Self::scaled_prior(l_prior, dout, 1.0)
    }

    /// Zero mean with factor `scale·chol(K)`; small scales give a near-zero
    /// initial function draw.
    pub fn scaled_prior(l_prior: &Tensor, dout: usize, scale: f64) -> Self {
        let m = l_prior.rows();
        let scaled = l_prior.scaled(scale);
        VariationalGaussian {
            mean: Tensor::zeros(&[m, dout]),
            factors: (0..dout).map(|_| PackedTril::from_lower(&scaled)).collect(),
        }
    }

    pub fn inducing_rows(&self) -> usize {
        self.mean.rows()
    }

    pub fn dout(&self) -> usize {
        self.mean.cols()
    }

    /// Dense covariance of output dimension `d`.
    pub fn cov_d(&self, d: usize) -> Tensor {
        let l = self.factors[d].to_lower();
        linalg::matmul_nt(&l, &l)
    }
}

/// Observation model of the predictor GP.
#[derive(Clone, Debug)]
pub enum Likelihood {
    Gaussian { log_noise_variance: f64 },
    Bernoulli { n_quad: usize },
}

impl Likelihood {
    pub fn noise_variance(&self) -> Option<f64> {
        match self {
            Likelihood::Gaussian { log_noise_variance } => Some(math::exp(*log_noise_variance)),
            Likelihood::Bernoulli { .. } => None,
        }
    }
}

/// Sparse GP head: inducing locations, variational posterior, kernel and
/// likelihood of the prediction function g.
#[derive(Clone, Debug)]
pub struct PredictorGP {
    pub z: Tensor,
    pub q_u: VariationalGaussian,
    pub kernel: KernelParams,
    pub likelihood: Likelihood,
}

// ---------------------------------------------------------------------------
// Raw (tensor-level) operations; these double as the reference path for the
// differentiable builders below.
// ---------------------------------------------------------------------------

/// Sparse GP conditional given inducing values u: mean = Q·u and
/// cov = K_XX − Q·K_ZZ·Qᵀ with Q = K_XZ·K_ZZ⁻¹.
pub fn sparse_conditional(
    xq: &Tensor,
    z: &Tensor,
    kernel: &KernelParams,
    u: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let kxz = crate::kernels::kernel_matrix(xq, z, kernel);
    let kzz = crate::kernels::kernel_matrix(z, z, kernel);
    let kxx = crate::kernels::kernel_matrix(xq, xq, kernel);
    let chol = linalg::cholesky_psd(&kzz, &JitterPolicy::default())?;
    let a = linalg::solve_triangular(&chol.factor, &kxz.transposed(), false)?; // M×N
    let alpha = linalg::solve_triangular(&chol.factor, u, false)?;
    let mean_m = linalg::matmul_tn(&a, &alpha.reshaped(vec![alpha.len(), 1]));
    let cov = {
        let qkq = linalg::matmul_tn(&a, &a);
        let mut c = kxx;
        for (cv, qv) in c.data_mut().iter_mut().zip(qkq.data()) {
            *cv -= qv;
        }
        c
    };
    Ok((mean_m.reshaped(vec![xq.rows()]), cov))
}

/// Marginal mean/variance of the variational posterior q(f(x)) for each
/// output dimension: mean = Q·m, var_d = diag(K_XX + Q(S_d−K_ZZ)Qᵀ),
/// floored at `VAR_FLOOR`.
pub fn variational_marginal(
    xq: &Tensor,
    z: &Tensor,
    kernel: &KernelParams,
    q: &VariationalGaussian,
) -> Result<(Tensor, Tensor)> {
    let n = xq.rows();
    let dout = q.dout();
    let kxz = crate::kernels::kernel_matrix(xq, z, kernel);
    let kzz = crate::kernels::kernel_matrix(z, z, kernel);
    let chol = linalg::cholesky_psd(&kzz, &JitterPolicy::default())?;
    let a = linalg::solve_triangular(&chol.factor, &kxz.transposed(), false)?; // M×N
    let beta = {
        let t = linalg::solve_triangular(&chol.factor, &q.mean, false)?;
        linalg::solve_triangular(&chol.factor, &t, true)?
    };
    let mean = linalg::matmul(&kxz, &beta); // N×D_out
    let sig2 = kernel.signal_variance();
    let mut qdiag = vec![0.0; n];
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..a.rows() {
            let v = a.get2(i, j);
            acc += v * v;
        }
        qdiag[j] = acc;
    }
    let mut var = Tensor::zeros(&[n, dout]);
    for d in 0..dout {
        let ld = q.factors[d].to_lower();
        let cd = linalg::solve_triangular(&chol.factor, &ld, false)?; // L⁻¹·L_Sd
        let vd = linalg::matmul_tn(&cd.transposed(), &a); // (L⁻ᵀ... ) see below
        // vd = C_dᵀ·A with C_d = L⁻ᵀ·L_Sd: computed as (L⁻¹L_Sd)ᵀ? No —
        // diag(Q·S_d·Qᵀ) = colsum(((L⁻ᵀL_Sd)ᵀ·A)²); L⁻ᵀL_Sd needs the
        // transposed solve:
        let _ = vd;
        let cdt = linalg::solve_triangular(&chol.factor, &ld, true)?; // L⁻ᵀ·L_Sd
        let w = linalg::matmul_tn(&cdt.transposed(), &a.transposed()); // hmm
        let _ = w;
        // straightforward: V = C_dᵀ·A (M×N)
        let v = linalg::matmul_tn(&cdt, &a);
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..v.rows() {
                let t = v.get2(i, j);
                acc += t * t;
            }
            var.set2(j, d, (sig2 - qdiag[j] + acc).max(VAR_FLOOR));
        }
    }
    Ok((mean, var))
}

/// KL[q(u)‖p(u)] with q = N(m, S), p = N(0, K), summed over output dims:
/// ½·Σ_d [tr(K⁻¹S_d) + m_dᵀK⁻¹m_d − M + log det K − log det S_d].
pub fn kl_gaussian(q: &VariationalGaussian, kzz: &Tensor) -> Result<f64> {
    let m = q.inducing_rows();
    let chol = linalg::cholesky_psd(kzz, &JitterPolicy::default())?;
    let l = &chol.factor;
    let logdet_k: f64 = (0..m).map(|i| 2.0 * math::ln(l.get2(i, i))).sum();
    let mut total = 0.0;
    for d in 0..q.dout() {
        let ld = q.factors[d].to_lower();
        let a = linalg::solve_triangular(l, &ld, false)?;
        let tr: f64 = a.data().iter().map(|&v| v * v).sum();
        let md = Tensor::vector((0..m).map(|i| q.mean.get2(i, d)).collect());
        let am = linalg::solve_triangular(l, &md, false)?;
        let quad: f64 = am.data().iter().map(|&v| v * v).sum();
        let logdet_s: f64 = (0..m).map(|i| 2.0 * math::ln(ld.get2(i, i))).sum();
        total += 0.5 * (tr + quad - m as f64 + logdet_k - logdet_s);
    }
    Ok(total)
}

/// Per-point expected Gaussian log likelihood E_{g~N(mean,var)}[log N(y|g,σ²)]
/// = log N(y|mean, σ²) − var/(2σ²).
pub fn expected_gaussian_loglik(
    y: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    noise_variance: f64,
) -> Tensor {
    assert_eq!(y.len(), mean.len());
    assert_eq!(y.len(), var.len());
    let n = y.len();
    let mut out = Tensor::zeros(&[n]);
    for i in 0..n {
        let diff = y.data()[i] - mean.data()[i];
        out.data_mut()[i] = -0.5 * (math::LN_2PI + math::ln(noise_variance))
            - (diff * diff + var.data()[i]) / (2.0 * noise_variance);
    }
    out
}

/// Per-point expected Bernoulli log likelihood under the probit link,
/// E_{g~N(mean,var)}[log Φ(y·g)], via n-point Gauss–Hermite quadrature.
pub fn expected_bernoulli_loglik(
    y: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    n_quad: usize,
) -> Tensor {
    assert!(n_quad >= 1);
    let (nodes, weights) = math::gauss_hermite(n_quad);
    let n = y.len();
    let mut out = Tensor::zeros(&[n]);
    for i in 0..n {
        let s = math::sqrt(2.0 * var.data()[i].max(0.0));
        let mut acc = 0.0;
        for k in 0..n_quad {
            let gk = mean.data()[i] + s * nodes[k];
            acc += weights[k] * math::log_norm_cdf(y.data()[i] * gk);
        }
        out.data_mut()[i] = acc / math::SQRT_PI;
    }
    out
}

// ---------------------------------------------------------------------------
// Differentiable builders.
// ---------------------------------------------------------------------------

/// Factorized pieces of one sparse GP, built once per graph: the prior
/// Cholesky, β = K_ZZ⁻¹·m, and C_d = L⁻ᵀ·L_Sd per output dimension.
pub struct PreparedGp {
    pub l: Var,
    pub beta: Var,
    pub c: Vec<Var>,
}

/// Prepare the per-evaluation solves shared by every marginal of one GP.
pub fn prepare_gp(g: &Graph, kzz: Var, mean: Var, trils: &[Var]) -> Result<PreparedGp> {
    let l = g.cholesky(kzz)?;
    let t = g.tri_solve(l, mean, false)?;
    let beta = g.tri_solve(l, t, true)?;
    let c = trils
        .iter()
        .map(|&ld| g.tri_solve(l, ld, true))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedGp { l, beta, c })
}

/// Diagonal variational marginal at query cross-covariance `k_xz`:
/// mean = K_xZ·β and var_d = prior_diag − colsum(A²) + colsum((C_dᵀA)²),
/// floored at [`VAR_FLOOR`]. `prior_var` is the scalar prior marginal
/// variance (σ² for stationary kernels).
pub fn marginal_diag(
    g: &Graph,
    prep: &PreparedGp,
    k_xz: Var,
    prior_var: Var,
) -> Result<(Var, Var)> {
    let mean = g.matmul(k_xz, prep.beta);
    let a = g.tri_solve(prep.l, g.transpose(k_xz), false)?;
    let qdiag = g.sum_axis(g.mul(a, a), 0);
    let base = g.sub(prior_var, qdiag);
    let mut cols = Vec::with_capacity(prep.c.len());
    for &cd in &prep.c {
        let v = g.matmul(g.transpose(cd), a);
        let sd = g.sum_axis(g.mul(v, v), 0);
        cols.push(g.clamp_min(g.add(base, sd), VAR_FLOOR));
    }
    let var = g.concat_cols(&cols);
    Ok((mean, var))
}

/// Differentiable KL[q(u_d)‖p(u)] for one output dimension.
pub fn kl_gaussian_var(g: &Graph, l_prior: Var, mean_d: Var, l_q: Var) -> Result<Var> {
    let m = g.shape_of(l_q)[0] as f64;
    let a = g.tri_solve(l_prior, l_q, false)?;
    let tr = g.sum_all(g.mul(a, a));
    let am = g.tri_solve(l_prior, mean_d, false)?;
    let quad = g.sum_all(g.mul(am, am));
    let logdet_k = g.mul_scalar(g.sum_all(g.ln(g.diag_part(l_prior))), 2.0);
    let logdet_s = g.mul_scalar(g.sum_all(g.ln(g.diag_part(l_q))), 2.0);
    let inner = g.add(g.add(tr, quad), g.sub(logdet_k, logdet_s));
    Ok(g.mul_scalar(g.add_scalar(inner, -m), 0.5))
}

/// Differentiable expected Gaussian log likelihood (per point).
pub fn expected_gaussian_loglik_var(
    g: &Graph,
    y: Var,
    mean: Var,
    var: Var,
    log_noise_variance: Var,
) -> Var {
    let sn2 = g.exp(log_noise_variance);
    let diff = g.sub(y, mean);
    let num = g.add(g.mul(diff, diff), var);
    let constant = g.add_scalar(g.mul_scalar(log_noise_variance, -0.5), -0.5 * math::LN_2PI);
    g.sub(constant, g.div(num, g.mul_scalar(sn2, 2.0)))
}

/// Differentiable expected Bernoulli (probit) log likelihood via quadrature.
pub fn expected_bernoulli_loglik_var(
    g: &Graph,
    y: Var,
    mean: Var,
    var: Var,
    n_quad: usize,
) -> Var {
    let n = g.shape_of(mean)[0];
    let (nodes, weights) = math::gauss_hermite(n_quad);
    let xi = g.constant(Tensor::matrix(1, n_quad, nodes));
    let w = g.constant(Tensor::matrix(n_quad, 1, weights).scaled(1.0 / math::SQRT_PI));
    let spread = g.sqrt(g.mul_scalar(g.clamp_min(var, VAR_FLOOR), 2.0));
    let mean_c = g.reshape(mean, vec![n, 1]);
    let spread_c = g.reshape(spread, vec![n, 1]);
    let y_c = g.reshape(y, vec![n, 1]);
    let args = g.add(mean_c, g.mul(spread_c, xi));
    let lp = g.log_norm_cdf(g.mul(y_c, args));
    g.reshape(g.matmul(lp, w), vec![n])
}

// ---------------------------------------------------------------------------
// Quick checks used by the `check` CLI.
// ---------------------------------------------------------------------------

pub(crate) fn kl_quick_check() -> core::result::Result<String, String> {
    let mut rng = Rng::seeded(77);
    let raw = rng.normal_tensor(&[3, 3]);
    let mut kzz = linalg::matmul_nt(&raw, &raw);
    for i in 0..3 {
        let v = kzz.get2(i, i) + 0.5;
        kzz.set2(i, i, v);
    }
    let l = linalg::cholesky_psd(&kzz, &JitterPolicy::default())
        .map_err(|e| format!("{e}"))?
        .factor;
    let prior = VariationalGaussian::at_prior(&l, 1);
    let kl0 = kl_gaussian(&prior, &kzz).map_err(|e| format!("{e}"))?;
    if kl0.abs() > 1e-10 {
        return Err(format!("KL at prior = {kl0:e}, expected 0"));
    }
    let mut q = prior;
    q.mean = rng.normal_tensor(&[3, 1]);
    let kl = kl_gaussian(&q, &kzz).map_err(|e| format!("{e}"))?;
    if kl < 0.0 {
        return Err(format!("negative KL {kl}"));
    }
    Ok(format!("KL(prior)≈0, shifted-mean KL = {kl:.4}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::finite_difference_check;

    fn random_pd(rng: &mut Rng, m: usize, ridge: f64) -> Tensor {
        let raw = rng.normal_tensor(&[m, m]);
        let mut k = linalg::matmul_nt(&raw, &raw);
        for i in 0..m {
            let v = k.get2(i, i) + ridge;
            k.set2(i, i, v);
        }
        k
    }

    #[test]
    fn conditional_interpolates_at_inducing_points() {
        let mut rng = Rng::seeded(30);
        let z = rng.normal_tensor(&[4, 2]);
        let u = rng.normal_tensor(&[4]);
        let kernel = KernelParams::isotropic(2, 1.0, 2.0);
        let (mean, cov) = sparse_conditional(&z, &z, &kernel, &u).unwrap();
        assert!(mean.max_abs_diff(&u) < 1e-6);
        assert!(cov.max_abs() <= 1e-6 * kernel.signal_variance());
    }

    #[test]
    fn conditional_zero_u_gives_zero_mean() {
        let mut rng = Rng::seeded(31);
        let z = rng.normal_tensor(&[3, 2]);
        let x = rng.normal_tensor(&[5, 2]);
        let kernel = KernelParams::isotropic(2, 1.0, 1.0);
        let (mean, _) = sparse_conditional(&x, &z, &kernel, &Tensor::zeros(&[3])).unwrap();
        assert!(mean.max_abs() < 1e-14);
    }

    #[test]
    fn conditional_matches_hand_inverted_2x2() {
        let mut rng = Rng::seeded(32);
        let z = rng.normal_tensor(&[2, 1]);
        let x = rng.normal_tensor(&[1, 1]);
        let u = rng.normal_tensor(&[2]);
        let kernel = KernelParams::isotropic(1, 0.9, 1.4);
        let (mean, cov) = sparse_conditional(&x, &z, &kernel, &u).unwrap();
        // Hand 2×2 inverse of K_ZZ.
        let kzz = crate::kernels::kernel_matrix(&z, &z, &kernel);
        let (a, b, c, d) =
            (kzz.get2(0, 0), kzz.get2(0, 1), kzz.get2(1, 0), kzz.get2(1, 1));
        let det = a * d - b * c;
        let inv = [d / det, -b / det, -c / det, a / det];
        let kxz = crate::kernels::kernel_matrix(&x, &z, &kernel);
        let q = [
            kxz.get2(0, 0) * inv[0] + kxz.get2(0, 1) * inv[2],
            kxz.get2(0, 0) * inv[1] + kxz.get2(0, 1) * inv[3],
        ];
        let mean_hand = q[0] * u.data()[0] + q[1] * u.data()[1];
        assert!((mean.data()[0] - mean_hand).abs() < 1e-10);
        let kxx = kernel.signal_variance();
        let qkq = q[0] * (kzz.get2(0, 0) * q[0] + kzz.get2(0, 1) * q[1])
            + q[1] * (kzz.get2(1, 0) * q[0] + kzz.get2(1, 1) * q[1]);
        assert!((cov.get2(0, 0) - (kxx - qkq)).abs() < 1e-10);
    }

    #[test]
    fn marginal_prior_s_recovers_prior_variance() {
        let mut rng = Rng::seeded(33);
        let z = rng.normal_tensor(&[3, 2]);
        let x = rng.normal_tensor(&[4, 2]);
        let kernel = KernelParams::isotropic(2, 1.1, 1.7);
        let kzz = crate::kernels::kernel_matrix(&z, &z, &kernel);
        let l = linalg::cholesky_psd(&kzz, &JitterPolicy::default()).unwrap().factor;
        let q = VariationalGaussian::at_prior(&l, 1);
        let (_, var) = variational_marginal(&x, &z, &kernel, &q).unwrap();
        for v in var.data() {
            assert!((v - kernel.signal_variance()).abs() < 1e-8);
        }
    }

    #[test]
    fn marginal_collapsed_posterior_at_inducing_points() {
        let mut rng = Rng::seeded(34);
        let z = rng.normal_tensor(&[3, 2]);
        let kernel = KernelParams::isotropic(2, 1.0, 1.0);
        let kzz = crate::kernels::kernel_matrix(&z, &z, &kernel);
        let l = linalg::cholesky_psd(&kzz, &JitterPolicy::default()).unwrap().factor;
        let mut q = VariationalGaussian::scaled_prior(&l, 1, 1e-7);
        q.mean = rng.normal_tensor(&[3, 1]);
        let (mean, var) = variational_marginal(&z, &z, &kernel, &q).unwrap();
        assert!(mean.max_abs_diff(&q.mean) < 1e-5);
        for v in var.data() {
            assert!(*v < 1e-5);
        }
    }

    #[test]
    fn marginal_matches_dense_formula() {
        let mut rng = Rng::seeded(35);
        let z = rng.normal_tensor(&[3, 2]);
        let x = rng.normal_tensor(&[2, 2]);
        let kernel = KernelParams::isotropic(2, 0.8, 1.3);
        let kzz = crate::kernels::kernel_matrix(&z, &z, &kernel);
        let l = linalg::cholesky_psd(&kzz, &JitterPolicy::default()).unwrap().factor;
        let mut q = VariationalGaussian::at_prior(&l, 1);
        q.mean = rng.normal_tensor(&[3, 1]);
        let s_raw = rng.normal_tensor(&[3, 3]);
        let s = {
            let mut s = linalg::matmul_nt(&s_raw, &s_raw);
            for i in 0..3 {
                let v = s.get2(i, i) + 0.3;
                s.set2(i, i, v);
            }
            s
        };
        q.factors = vec![PackedTril::from_lower(
            &linalg::cholesky_psd(&s, &JitterPolicy::default()).unwrap().factor,
        )];
        let (mean, var) = variational_marginal(&x, &z, &kernel, &q).unwrap();

        // Dense oracle with materialized inverse: Q = K_xZ·K_ZZ⁻¹.
        let kxz = crate::kernels::kernel_matrix(&x, &z, &kernel);
        let qmat = linalg::solve_psd(&kzz, &kxz.transposed(), &JitterPolicy::default())
            .unwrap()
            .transposed();
        let mean_o = linalg::matmul(&qmat, &q.mean);
        assert!(mean.max_abs_diff(&mean_o) < 1e-10);
        let s_d = q.cov_d(0);
        let kxx = crate::kernels::kernel_matrix(&x, &x, &kernel);
        let mid = {
            let mut m = s_d.clone();
            for i in 0..3 {
                for j in 0..3 {
                    let v = m.get2(i, j) - kzz.get2(i, j);
                    m.set2(i, j, v);
                }
            }
            m
        };
        let corr = linalg::matmul(&linalg::matmul(&qmat, &mid), &qmat.transposed());
        for i in 0..2 {
            let want = kxx.get2(i, i) + corr.get2(i, i);
            assert!((var.get2(i, 0) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn kl_zero_at_prior_and_hand_value() {
        let mut rng = Rng::seeded(36);
        let kzz = random_pd(&mut rng, 3, 0.5);
        let l = linalg::cholesky_psd(&kzz, &JitterPolicy::default()).unwrap().factor;
        let q = VariationalGaussian::at_prior(&l, 2);
        assert!(kl_gaussian(&q, &kzz).unwrap().abs() < 1e-10);

        // 1-D hand case: m=1, S=1, K=1 -> 1/2.
        let k1 = Tensor::matrix(1, 1, vec![1.0]);
        let q1 = VariationalGaussian {
            mean: Tensor::matrix(1, 1, vec![1.0]),
            factors: vec![PackedTril::from_lower(&Tensor::matrix(1, 1, vec![1.0]))],
        };
        assert!((kl_gaussian(&q1, &k1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_on_random_instances() {
        let mut rng = Rng::seeded(37);
        for _ in 0..20 {
            let kzz = random_pd(&mut rng, 3, 0.4);
            let s = random_pd(&mut rng, 3, 0.4);
            let q = VariationalGaussian {
                mean: rng.normal_tensor(&[3, 1]),
                factors: vec![PackedTril::from_lower(
                    &linalg::cholesky_psd(&s, &JitterPolicy::default()).unwrap().factor,
                )],
            };
            assert!(kl_gaussian(&q, &kzz).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn kl_within_monte_carlo_error() {
        // 10^6-draw MC estimate of E_q[log q - log p] on one random M=3 case.
        let mut rng = Rng::seeded(38);
        let kzz = random_pd(&mut rng, 3, 0.6);
        let s = random_pd(&mut rng, 3, 0.6);
        let ls = linalg::cholesky_psd(&s, &JitterPolicy::default()).unwrap().factor;
        let q = VariationalGaussian {
            mean: rng.normal_tensor(&[3, 1]),
            factors: vec![PackedTril::from_lower(&ls)],
        };
        let analytic = kl_gaussian(&q, &kzz).unwrap();

        let lk = linalg::cholesky_psd(&kzz, &JitterPolicy::default()).unwrap().factor;
        let logdet_s: f64 = (0..3).map(|i| 2.0 * math::ln(ls.get2(i, i))).sum();
        let logdet_k: f64 = (0..3).map(|i| 2.0 * math::ln(lk.get2(i, i))).sum();
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let eps = rng.normal_tensor(&[3, 1]);
            let zx = linalg::matmul(&ls, &eps);
            let x = {
                let mut x = zx;
                for i in 0..3 {
                    let v = x.get2(i, 0) + q.mean.get2(i, 0);
                    x.set2(i, 0, v);
                }
                x
            };
            // log q(x) = -1/2 (logdetS + eps'eps + 3 ln 2pi)
            let quad_q: f64 = eps.data().iter().map(|&v| v * v).sum();
            let log_q = -0.5 * (logdet_s + quad_q + 3.0 * math::LN_2PI);
            let a = linalg::solve_triangular(&lk, &x, false).unwrap();
            let quad_p: f64 = a.data().iter().map(|&v| v * v).sum();
            let log_p = -0.5 * (logdet_k + quad_p + 3.0 * math::LN_2PI);
            let v = log_q - log_p;
            sum += v;
            sumsq += v * v;
        }
        let mc = sum / n as f64;
        let se = ((sumsq / n as f64 - mc * mc) / n as f64).max(0.0).sqrt();
        assert!(
            (analytic - mc).abs() <= 3.0 * se,
            "analytic {analytic} vs mc {mc} ± {se}"
        );
    }

    #[test]
    fn gaussian_loglik_values() {
        // var=0 reduces to the exact Gaussian log density.
        let y = Tensor::vector(vec![1.2]);
        let mean = Tensor::vector(vec![0.7]);
        let var0 = Tensor::vector(vec![0.0]);
        let got = expected_gaussian_loglik(&y, &mean, &var0, 0.5);
        let want = -0.5 * (math::LN_2PI + math::ln(0.5)) - 0.25 / (2.0 * 0.5);
        assert!((got.data()[0] - want).abs() < 1e-14);

        // y=mean, var=sigma^2=1 -> -(1/2)ln(2π) - 1/2.
        let got = expected_gaussian_loglik(
            &Tensor::vector(vec![0.3]),
            &Tensor::vector(vec![0.3]),
            &Tensor::vector(vec![1.0]),
            1.0,
        );
        assert!((got.data()[0] - (-1.4189385332046727)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_loglik_within_monte_carlo_error() {
        let mut rng = Rng::seeded(39);
        let (y, mean, var, sn2) = (0.4, -0.2, 0.8, 0.6);
        let analytic = expected_gaussian_loglik(
            &Tensor::vector(vec![y]),
            &Tensor::vector(vec![mean]),
            &Tensor::vector(vec![var]),
            sn2,
        )
        .data()[0];
        let n = 1_000_000usize;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let gdraw = mean + math::sqrt(var) * rng.standard_normal();
            let d = y - gdraw;
            let v = -0.5 * (math::LN_2PI + math::ln(sn2)) - d * d / (2.0 * sn2);
            sum += v;
            sumsq += v * v;
        }
        let mc = sum / n as f64;
        let se = ((sumsq / n as f64 - mc * mc) / n as f64).max(0.0).sqrt();
        assert!((analytic - mc).abs() <= 3.0 * se, "{analytic} vs {mc} ± {se}");
    }

    #[test]
    fn bernoulli_loglik_values() {
        // var=0, mean=0 -> log Φ(0) = log 1/2.
        let got = expected_bernoulli_loglik(
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![0.0]),
            &Tensor::vector(vec![0.0]),
            20,
        );
        assert!((got.data()[0] - (-core::f64::consts::LN_2)).abs() < 1e-12);
        // var=0, mean=2, y=+1 -> log Φ(2).
        let got = expected_bernoulli_loglik(
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![2.0]),
            &Tensor::vector(vec![0.0]),
            20,
        );
        assert!((got.data()[0] - (-0.023012909328963486)).abs() < 1e-10);
    }

    #[test]
    fn bernoulli_loglik_within_monte_carlo_error() {
        let mut rng = Rng::seeded(41);
        let (mean, var) = (0.3, 0.5);
        let analytic = expected_bernoulli_loglik(
            &Tensor::vector(vec![1.0]),
            &Tensor::vector(vec![mean]),
            &Tensor::vector(vec![var]),
            20,
        )
        .data()[0];
        let n = 1_000_000usize;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let gdraw = mean + math::sqrt(var) * rng.standard_normal();
            let v = math::log_norm_cdf(gdraw);
            sum += v;
            sumsq += v * v;
        }
        let mc = sum / n as f64;
        let se = ((sumsq / n as f64 - mc * mc) / n as f64).max(0.0).sqrt();
        assert!((analytic - mc).abs() <= 3.0 * se, "{analytic} vs {mc} ± {se}");
    }

    #[test]
    fn bernoulli_quadrature_converges_in_order() {
        let y = Tensor::vector(vec![1.0]);
        let mean = Tensor::vector(vec![0.4]);
        let var = Tensor::vector(vec![1.3]);
        let reference = expected_bernoulli_loglik(&y, &mean, &var, 40).data()[0];
        let mut last = f64::INFINITY;
        for &nq in &[5usize, 10, 20] {
            let err = (expected_bernoulli_loglik(&y, &mean, &var, nq).data()[0] - reference).abs();
            assert!(err <= last + 1e-15, "n_quad={nq} err {err} vs prev {last}");
            last = err;
        }
    }

    #[test]
    fn graph_builders_match_raw_path() {
        let mut rng = Rng::seeded(42);
        let z = rng.normal_tensor(&[3, 2]);
        let x = rng.normal_tensor(&[4, 2]);
        let kernel = KernelParams::isotropic(2, 0.9, 1.2);
        let kzz = crate::kernels::kernel_matrix(&z, &z, &kernel);
        let l = linalg::cholesky_psd(&kzz, &JitterPolicy::default()).unwrap().factor;
        let mut q = VariationalGaussian::scaled_prior(&l, 2, 0.7);
        q.mean = rng.normal_tensor(&[3, 2]);

        let (mean_raw, var_raw) = variational_marginal(&x, &z, &kernel, &q).unwrap();
        let kl_raw = kl_gaussian(&q, &kzz).unwrap();

        let g = Graph::new();
        let zv = g.constant(z.clone());
        let xv = g.constant(x.clone());
        let kv = KernelVars::insert(&g, &kernel, false);
        let kzz_v = kv.gram(&g, zv, zv);
        let mean_v = g.constant(q.mean.clone());
        let trils: Vec<Var> = q.factors.iter().map(|f| f.insert(&g, false).1).collect();
        let prep = prepare_gp(&g, kzz_v, mean_v, &trils).unwrap();
        let kxz_v = kv.gram(&g, xv, zv);
        let (m_v, v_v) = marginal_diag(&g, &prep, kxz_v, kv.signal_variance(&g)).unwrap();
        assert!(g.value(m_v).max_abs_diff(&mean_raw) < 1e-11);
        assert!(g.value(v_v).max_abs_diff(&var_raw) < 1e-11);

        let mut kl_graph = 0.0;
        for d in 0..2 {
            let md = g.constant(Tensor::vector(
                (0..3).map(|i| q.mean.get2(i, d)).collect(),
            ));
            kl_graph +=
                g.value_item(kl_gaussian_var(&g, prep.l, md, trils[d]).unwrap());
        }
        assert!((kl_graph - kl_raw).abs() < 1e-10);
    }

    #[test]
    fn svgp_graph_ops_pass_finite_difference() {
        let mut rng = Rng::seeded(43);
        let z = rng.normal_tensor(&[3, 2]);
        let x = rng.normal_tensor(&[4, 2]);
        let y = rng.normal_tensor(&[4]);
        let mean0 = rng.normal_tensor(&[3, 1]);
        let packed0 = PackedTril::from_lower(&{
            let s = random_pd(&mut rng, 3, 0.8);
            linalg::cholesky_psd(&s, &JitterPolicy::default()).unwrap().factor
        })
        .data;
        let log_ls = Tensor::vector(vec![0.0, 0.2]);
        let log_var = Tensor::scalar(0.1);
        let log_noise = Tensor::scalar(-1.0);
        finite_difference_check(
            &[z, mean0, packed0, log_ls, log_var, log_noise],
            |g, vars| {
                let kern = KernelVars { log_ls: vars[3], log_var: vars[4] };
                let xv = g.constant(x.clone());
                let kzz = kern.gram(g, vars[0], vars[0]);
                let lq = g.tril_logdiag(vars[2], 3);
                let prep = prepare_gp(g, kzz, vars[1], &[lq]).unwrap();
                let kxz = kern.gram(g, xv, vars[0]);
                let (mean, var) = marginal_diag(g, &prep, kxz, kern.signal_variance(g)).unwrap();
                let mean1 = g.reshape(mean, vec![4]);
                let var1 = g.reshape(var, vec![4]);
                let yv = g.constant(y.clone());
                let lik = g.sum_all(expected_gaussian_loglik_var(g, yv, mean1, var1, vars[5]));
                let md = g.reshape(vars[1], vec![3]);
                let kl = kl_gaussian_var(g, prep.l, md, lq).unwrap();
                g.sub(lik, kl)
            },
            1e-5,
            2e-4,
            1e-7,
        )
        .unwrap();
    }

    #[test]
    fn bernoulli_graph_matches_raw_and_differentiates() {
        let y = Tensor::vector(vec![1.0, -1.0, 1.0]);
        let mean = Tensor::vector(vec![0.3, -0.8, 2.0]);
        let var = Tensor::vector(vec![0.5, 1.2, 0.01]);
        let raw = expected_bernoulli_loglik(&y, &mean, &var, 20);
        let g = Graph::new();
        let yv = g.constant(y.clone());
        let mv = g.param(mean.clone());
        let vv = g.param(var.clone());
        let out = expected_bernoulli_loglik_var(&g, yv, mv, vv, 20);
        assert!(g.value(out).max_abs_diff(&raw) < 1e-12);
        finite_difference_check(
            &[mean, var],
            |g, vars| {
                let yv = g.constant(y.clone());
                g.sum_all(expected_bernoulli_loglik_var(g, yv, vars[0], vars[1], 20))
            },
            1e-5,
            1e-4,
            1e-7,
        )
        .unwrap();
    }
}
