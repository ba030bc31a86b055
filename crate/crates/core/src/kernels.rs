//! RBF-ARD kernels and the separable spatio-temporal product kernel.
//!
//! Hyperparameters live in log space so exponentiated values stay positive
//! under unconstrained optimization. The matrix-valued field kernel uses
//! independent output dimensions sharing one scalar kernel, so the full
//! MD×MD inducing gram is `I_D ⊗ K_ZZ` and never materialized.

use alloc::vec::Vec;

use crate::graph::{rbf_gram_raw, Graph, Var};
use crate::math;
use crate::tensor::Tensor;

/// ARD lengthscales and signal variance for one GP, stored in log space.
#[derive(Clone, Debug)]
pub struct KernelParams {
    pub log_lengthscales: Tensor,
    pub log_signal_variance: f64,
}

impl KernelParams {
    /// Same lengthscale in every input dimension.
    pub fn isotropic(dim: usize, lengthscale: f64, signal_variance: f64) -> Self {
        assert!(lengthscale > 0.0 && signal_variance > 0.0);
        KernelParams {
            log_lengthscales: Tensor::full(&[dim], math::ln(lengthscale)),
            log_signal_variance: math::ln(signal_variance),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.data().iter().map(|&v| math::exp(v)).collect()
    }

    pub fn signal_variance(&self) -> f64 {
        math::exp(self.log_signal_variance)
    }
}

/// Separable product kernel K((x,t),(x',t')) = K(x,x')·k(t,t'); a missing
/// temporal part means the field is time-independent.
#[derive(Clone, Debug)]
pub struct SpatioTemporalKernel {
    pub spatial: KernelParams,
    pub temporal: Option<KernelParams>,
}

impl SpatioTemporalKernel {
    pub fn spatial_only(spatial: KernelParams) -> Self {
        SpatioTemporalKernel { spatial, temporal: None }
    }
}

/// Scalar RBF-ARD covariance σ²·exp(−½ Σ_d ((x_d−x'_d)/ℓ_d)²).
pub fn rbf_ard(x: &[f64], y: &[f64], p: &KernelParams) -> f64 {
    assert_eq!(x.len(), p.dim());
    assert_eq!(y.len(), p.dim());
    let mut s = 0.0;
    for d in 0..x.len() {
        let w = math::exp(-2.0 * p.log_lengthscales.data()[d]);
        let diff = x[d] - y[d];
        s += w * diff * diff;
    }
    p.signal_variance() * math::exp(-0.5 * s)
}

/// Cross-covariance matrix between the rows of `x` (N×D) and `z` (M×D).
pub fn kernel_matrix(x: &Tensor, z: &Tensor, p: &KernelParams) -> Tensor {
    rbf_gram_raw(x, z, &p.log_lengthscales, p.log_signal_variance)
}

/// Diagonal of K(X,X): the constant σ² for a stationary kernel.
pub fn kernel_diag(n: usize, p: &KernelParams) -> Tensor {
    Tensor::full(&[n], p.signal_variance())
}

/// Scalar kernel blocks of the matrix-valued field kernel: returns
/// (K_XZ, K_ZZ); the full MD×MD gram is implicitly `I_D ⊗ K_ZZ`.
pub fn field_kernel_blocks(x: &Tensor, z: &Tensor, p: &KernelParams) -> (Tensor, Tensor) {
    (kernel_matrix(x, z, p), kernel_matrix(z, z, p))
}

/// Spatio-temporal cross-covariance C_xZ = K_xZs ⊗ k_tZt at a single time.
///
/// Row i is the Kronecker product of the spatial cross-row K(x_i, Zs) with
/// the temporal cross-row k(t, Zt), giving an N×(Ms·Mt) matrix.
pub fn st_kernel_cross(
    x: &Tensor,
    t: f64,
    zs: &Tensor,
    zt: &Tensor,
    k: &SpatioTemporalKernel,
) -> Tensor {
    let temporal = k.temporal.as_ref().expect("temporal kernel part required");
    let kx = kernel_matrix(x, zs, &k.spatial);
    let tmat = Tensor::matrix(1, 1, alloc::vec![t]);
    let kt = kernel_matrix(&tmat, zt, temporal); // 1×Mt
    let (n, ms) = (kx.rows(), kx.cols());
    let mt = kt.cols();
    let mut out = Tensor::zeros(&[n, ms * mt]);
    for i in 0..n {
        for a in 0..ms {
            let s = kx.get2(i, a);
            for b in 0..mt {
                out.set2(i, a * mt + b, s * kt.get2(0, b));
            }
        }
    }
    out
}

/// Spatio-temporal inducing gram C_ZZ = K_ZsZs ⊗ K_ZtZt.
pub fn st_kernel_zz(zs: &Tensor, zt: &Tensor, k: &SpatioTemporalKernel) -> Tensor {
    let temporal = k.temporal.as_ref().expect("temporal kernel part required");
    let kss = kernel_matrix(zs, zs, &k.spatial);
    let ktt = kernel_matrix(zt, zt, temporal);
    crate::linalg::kron(&kss, &ktt)
}

/// Kernel hyperparameters inserted into a gradient graph.
#[derive(Clone, Copy, Debug)]
pub struct KernelVars {
    pub log_ls: Var,
    pub log_var: Var,
}

impl KernelVars {
    pub fn insert(g: &Graph, p: &KernelParams, trainable: bool) -> Self {
        let log_ls = if trainable {
            g.param(p.log_lengthscales.clone())
        } else {
            g.constant(p.log_lengthscales.clone())
        };
        let lv = Tensor::scalar(p.log_signal_variance);
        let log_var = if trainable { g.param(lv) } else { g.constant(lv) };
        KernelVars { log_ls, log_var }
    }

    /// Differentiable cross-covariance matrix.
    pub fn gram(&self, g: &Graph, x: Var, z: Var) -> Var {
        g.rbf_gram(x, z, self.log_ls, self.log_var)
    }

    /// Differentiable σ² scalar.
    pub fn signal_variance(&self, g: &Graph) -> Var {
        g.exp(self.log_var)
    }
}
