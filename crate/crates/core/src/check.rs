//! Finite-difference gradient checking and the runnable invariant suite
//! behind the CLI `check` subcommand.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Central finite-difference check of reverse-mode gradients.
///
/// `build` must deterministically construct a scalar loss from the given
/// parameter leaves. Each parameter entry is perturbed by ±`step` and the
/// directional derivative compared against the accumulated gradient; a
/// mismatch fails with `|g − fd| > max(atol, rtol·max(|g|,|fd|))`.
pub fn finite_difference_check<F>(
    inputs: &[Tensor],
    build: F,
    step: f64,
    rtol: f64,
    atol: f64,
) -> Result<(), String>
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&g, &vars);
        g.value_item(loss)
    };

    // Analytic gradients.
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&g, &vars);
    g.backward(loss).map_err(|e| format!("backward failed: {e}"))?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let up = eval(&work);
            work[pi].data_mut()[ei] = orig - step;
            let down = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * step);
            let an = grads[pi].data()[ei];
            let diff = (an - fd).abs();
            let tol = atol.max(rtol * an.abs().max(fd.abs()));
            if !(diff <= tol) {
                return Err(format!(
                    "param {pi} entry {ei}: analytic {an:.10e} vs fd {fd:.10e} (diff {diff:.3e} > tol {tol:.3e})"
                ));
            }
        }
    }
    Ok(())
}

/// Outcome of one invariant check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from(name: &'static str, r: Result<String, String>) -> Self {
        match r {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(detail) => CheckResult { name, passed: false, detail },
        }
    }
}

/// Fast invariant suite: numerics, kernels, variational terms, SDE flow.
/// Each check runs in at most a few seconds.
pub fn run_quick_checks() -> Vec<CheckResult> {
    vec![
        CheckResult::from("cholesky_hand_2x2", check_cholesky_hand()),
        CheckResult::from("triangular_solve_roundtrip", check_solve_roundtrip()),
        CheckResult::from("kron_mixed_product", check_kron_mixed_product()),
        CheckResult::from("gradient_chain_finite_difference", check_gradient_chain()),
        CheckResult::from("gauss_hermite_moments", check_gauss_hermite()),
        CheckResult::from("kernel_psd_factorizable", check_kernel_psd()),
        CheckResult::from("kl_nonnegative_and_zero_at_prior", check_kl()),
        CheckResult::from("em_increment_moments", check_em_moments()),
        CheckResult::from("flow_determinism", check_flow_determinism()),
        CheckResult::from("zero_flow_identity", check_zero_flow()),
    ]
}

fn check_cholesky_hand() -> Result<String, String> {
    let a = Tensor::matrix(2, 2, vec![4.0, 2.0, 2.0, 3.0]);
    let chol = crate::linalg::cholesky_psd(&a, &crate::linalg::JitterPolicy::default())
        .map_err(|e| format!("{e}"))?;
    let l = &chol.factor;
    let expect = [2.0, 0.0, 1.0, core::f64::consts::SQRT_2];
    for (got, want) in l.data().iter().zip(expect) {
        if (got - want).abs() > 1e-12 {
            return Err(format!("factor {:?} != expected", l.data()));
        }
    }
    Ok("L matches hand factorization".into())
}

fn check_solve_roundtrip() -> Result<String, String> {
    let mut rng = crate::rng::Rng::seeded(40);
    let raw = rng.normal_tensor(&[6, 6]);
    let a = crate::linalg::matmul_nt(&raw, &raw);
    let l = crate::linalg::cholesky_psd(&a, &Default::default())
        .map_err(|e| format!("{e}"))?
        .factor;
    let x0 = rng.normal_tensor(&[6, 2]);
    let b = crate::linalg::matmul(&l, &x0);
    let x = crate::linalg::solve_triangular(&l, &b, false).map_err(|e| format!("{e}"))?;
    let err = x.max_abs_diff(&x0);
    if err < 1e-11 * x0.max_abs().max(1.0) {
        Ok(format!("roundtrip error {err:.2e}"))
    } else {
        Err(format!("roundtrip error {err:.2e}"))
    }
}

fn check_kron_mixed_product() -> Result<String, String> {
    let mut rng = crate::rng::Rng::seeded(41);
    let a = rng.normal_tensor(&[2, 2]);
    let b = rng.normal_tensor(&[2, 2]);
    let x = rng.normal_tensor(&[2, 1]);
    let y = rng.normal_tensor(&[2, 1]);
    let lhs = crate::linalg::matmul(&crate::linalg::kron(&a, &b), &crate::linalg::kron(&x, &y));
    let rhs = crate::linalg::kron(&crate::linalg::matmul(&a, &x), &crate::linalg::matmul(&b, &y));
    let err = lhs.max_abs_diff(&rhs);
    if err < 1e-12 {
        Ok(format!("identity holds to {err:.2e}"))
    } else {
        Err(format!("identity violated: {err:.2e}"))
    }
}

fn check_gradient_chain() -> Result<String, String> {
    let mut rng = crate::rng::Rng::seeded(42);
    let raw = rng.normal_tensor(&[3, 3]);
    let mut k = crate::linalg::matmul_nt(&raw, &raw);
    for i in 0..3 {
        let v = k.get2(i, i) + 1.0;
        k.set2(i, i, v);
    }
    let y = rng.normal_tensor(&[3]);
    finite_difference_check(
        &[k, y],
        |g, vars| {
            let l = g.cholesky(vars[0]).unwrap();
            let alpha = g.tri_solve(l, vars[1], false).unwrap();
            let quad = g.sum_all(g.mul(alpha, alpha));
            let diag = g.sum_axis(g.mul(l, g.constant(Tensor::eye(3))), 1);
            let logdet = g.mul_scalar(g.sum_all(g.ln(diag)), 2.0);
            g.add(quad, logdet)
        },
        1e-5,
        1e-4,
        1e-7,
    )?;
    Ok("chol/solve/ln chain matches finite differences".into())
}

fn check_gauss_hermite() -> Result<String, String> {
    let (x, w) = crate::math::gauss_hermite(20);
    let s0: f64 = w.iter().sum();
    let s2: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * xi * xi).sum();
    let e0 = (s0 - crate::math::SQRT_PI).abs();
    let e2 = (s2 - crate::math::SQRT_PI / 2.0).abs();
    if e0 < 1e-12 && e2 < 1e-11 {
        Ok(format!("moment errors {e0:.1e}, {e2:.1e}"))
    } else {
        Err(format!("moment errors {e0:.1e}, {e2:.1e}"))
    }
}

fn check_kernel_psd() -> Result<String, String> {
    let mut rng = crate::rng::Rng::seeded(43);
    let x = rng.normal_tensor(&[12, 3]);
    let p = crate::kernels::KernelParams::isotropic(3, 1.0, 1.0);
    let k = crate::kernels::kernel_matrix(&x, &x, &p);
    let chol =
        crate::linalg::cholesky_psd(&k, &Default::default()).map_err(|e| format!("{e}"))?;
    if chol.jitter <= 1e-8 {
        Ok(format!("factorized with jitter {:.1e}", chol.jitter))
    } else {
        Err(format!("needed jitter {:.1e}", chol.jitter))
    }
}

fn check_kl() -> Result<String, String> {
    crate::svgp::kl_quick_check().map_err(|e| format!("{e}"))
}

fn check_em_moments() -> Result<String, String> {
    crate::sdeflow::em_moment_quick_check().map_err(|e| format!("{e}"))
}

fn check_flow_determinism() -> Result<String, String> {
    crate::sdeflow::determinism_quick_check().map_err(|e| format!("{e}"))
}

fn check_zero_flow() -> Result<String, String> {
    crate::sdeflow::zero_flow_quick_check().map_err(|e| format!("{e}"))
}
