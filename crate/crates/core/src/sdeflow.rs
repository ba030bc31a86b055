//! The variational SDE flow: drift/diffusion fields read off the flow GP's
//! variational posterior, Euler–Maruyama integration of input batches, and
//! trajectory recording.
//!
//! Drift is the posterior mean μ_q(x) and the (diagonal) diffusion is the
//! posterior marginal variance Σ_q(x) per output dimension, so one noise
//! draw per step samples the field exactly as the affine-increment
//! correspondence requires: Δx ~ N(μΔt, ΣΔt).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{KernelVars, SpatioTemporalKernel};
use crate::rng::{derive_seed, Rng};
use crate::svgp::{marginal_diag, prepare_gp, PreparedGp, VariationalGaussian};
use crate::tensor::Tensor;

/// States beyond this magnitude (on the standardized scale) abort integration.
pub const STATE_GUARD: f64 = 1e6;

/// RNG purpose tag for path noise streams.
const NOISE_TAG: u64 = 0x5dE_f10;

/// Flow time, step count, Monte Carlo path count and seed policy.
#[derive(Clone, Debug)]
pub struct FlowConfig {
    pub t_final: f64,
    pub n_steps: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl FlowConfig {
    pub fn new(t_final: f64, n_steps: usize, n_samples: usize, seed: u64) -> Self {
        assert!(t_final >= 0.0, "flow time must be nonnegative");
        assert!(n_steps >= 1, "at least one integration step");
        assert!(n_samples >= 1, "at least one sample path");
        FlowConfig { t_final, n_steps, n_samples, seed }
    }

    /// Number of EM steps actually taken; zero flow time short-circuits.
    pub fn effective_steps(&self) -> usize {
        if self.t_final == 0.0 {
            0
        } else {
            self.n_steps
        }
    }

    pub fn dt(&self) -> f64 {
        if self.effective_steps() == 0 {
            0.0
        } else {
            self.t_final / self.n_steps as f64
        }
    }

    /// Equidistant grid 0…T inclusive; `[0]` for zero flow time.
    pub fn time_grid(&self) -> Vec<f64> {
        let k = self.effective_steps();
        (0..=k).map(|i| self.t_final * (i as f64) / (self.n_steps as f64)).collect()
    }
}

/// Inducing representation of the flow GP: spatial (and optional temporal)
/// inducing locations plus the variational Gaussian over inducing vectors.
#[derive(Clone, Debug)]
pub struct InducingField {
    pub z: Tensor,
    pub zt: Option<Tensor>,
    pub q_u: VariationalGaussian,
    pub kernel: SpatioTemporalKernel,
}

impl InducingField {
    pub fn n_spatial(&self) -> usize {
        self.z.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.z.cols()
    }

    /// Rows of the variational Gaussian: M (static) or M·Mt (temporal).
    pub fn variational_rows(&self) -> usize {
        match &self.zt {
            Some(zt) => self.z.rows() * zt.rows(),
            None => self.z.rows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_u.inducing_rows() != self.variational_rows() {
            return Err(Error::InvalidArgument {
                detail: format!(
                    "variational rows {} != inducing rows {}",
                    self.q_u.inducing_rows(),
                    self.variational_rows()
                ),
            });
        }
        if self.q_u.dout() != self.state_dim() {
            return Err(Error::InvalidArgument {
                detail: format!(
                    "variational output dims {} != state dim {}",
                    self.q_u.dout(),
                    self.state_dim()
                ),
            });
        }
        if self.zt.is_some() != self.kernel.temporal.is_some() {
            return Err(Error::InvalidArgument {
                detail: "temporal inducing times require a temporal kernel".into(),
            });
        }
        Ok(())
    }
}

/// Drift/diffusion field evaluated inside a gradient graph. Implemented by
/// [`FieldVars`] for the real model and by test stubs for oracles.
pub trait FlowField {
    /// Returns (drift N×D, diffusion variance N×D) at batch `x`, time `t`.
    fn eval(&self, g: &Graph, x: Var, t: f64) -> Result<(Var, Var)>;
}

/// A constant field: drift μ and diagonal diffusion Σ shared by every state.
/// Used by the increment-law checks.
pub struct ConstantField {
    pub drift: Vec<f64>,
    pub diffusion_var: Vec<f64>,
}

impl FlowField for ConstantField {
    fn eval(&self, g: &Graph, x: Var, _t: f64) -> Result<(Var, Var)> {
        let n = g.shape_of(x)[0];
        let d = self.drift.len();
        let mut mu = Tensor::zeros(&[n, d]);
        let mut var = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for j in 0..d {
                mu.set2(i, j, self.drift[j]);
                var.set2(i, j, self.diffusion_var[j]);
            }
        }
        Ok((g.constant(mu), g.constant(var)))
    }
}

/// The inducing field inserted into one gradient graph, with the shared
/// solves (Cholesky, β, per-dimension C_d) prepared once.
pub struct FieldVars {
    pub z: Var,
    pub zt: Option<Var>,
    pub spatial_kern: KernelVars,
    pub temporal_kern: Option<KernelVars>,
    pub mean: Var,
    pub packed: Vec<Var>,
    pub trils: Vec<Var>,
    prep: PreparedGp,
    prior_var: Var,
}

impl FieldVars {
    pub fn insert(g: &Graph, field: &InducingField, trainable: bool) -> Result<FieldVars> {
        field.validate()?;
        let z = if trainable { g.param(field.z.clone()) } else { g.constant(field.z.clone()) };
        let spatial_kern = KernelVars::insert(g, &field.kernel.spatial, trainable);
        let mean = if trainable {
            g.param(field.q_u.mean.clone())
        } else {
            g.constant(field.q_u.mean.clone())
        };
        let mut packed = Vec::new();
        let mut trils = Vec::new();
        for f in &field.q_u.factors {
            let (p, l) = f.insert(g, trainable);
            packed.push(p);
            trils.push(l);
        }
        let (zt, temporal_kern, kzz, prior_var) = match (&field.zt, &field.kernel.temporal) {
            (Some(zt_t), Some(tk)) => {
                let zt =
                    if trainable { g.param(zt_t.clone()) } else { g.constant(zt_t.clone()) };
                let tkv = KernelVars::insert(g, tk, trainable);
                let kss = spatial_kern.gram(g, z, z);
                let ktt = tkv.gram(g, zt, zt);
                let kzz = g.kron(kss, ktt);
                let prior =
                    g.mul(spatial_kern.signal_variance(g), tkv.signal_variance(g));
                (Some(zt), Some(tkv), kzz, prior)
            }
            (None, None) => {
                let kzz = spatial_kern.gram(g, z, z);
                (None, None, kzz, spatial_kern.signal_variance(g))
            }
            _ => {
                return Err(Error::InvalidArgument {
                    detail: "temporal inducing times require a temporal kernel".into(),
                })
            }
        };
        let prep = prepare_gp(g, kzz, mean, &trils)?;
        Ok(FieldVars { z, zt, spatial_kern, temporal_kern, mean, packed, trils, prep, prior_var })
    }

    /// Cross-covariance between batch states and the inducing set at time t.
    fn cross(&self, g: &Graph, x: Var, t: f64) -> Var {
        let kx = self.spatial_kern.gram(g, x, self.z);
        match (&self.zt, &self.temporal_kern) {
            (Some(zt), Some(tk)) => {
                let tval = g.constant(Tensor::matrix(1, 1, vec![t]));
                let kt = tk.gram(g, tval, *zt);
                g.row_kron(kx, kt)
            }
            _ => kx,
        }
    }

    /// KL[q(U_f)‖p(U_f)] summed over output dimensions.
    pub fn kl(&self, g: &Graph) -> Result<Var> {
        let d = self.trils.len();
        let rows = g.shape_of(self.mean)[0];
        let mut total = None;
        for dd in 0..d {
            let basis = {
                let mut t = Tensor::zeros(&[d, 1]);
                t.set2(dd, 0, 1.0);
                g.constant(t)
            };
            let md = g.reshape(g.matmul(self.mean, basis), vec![rows]);
            let kl_d = crate::svgp::kl_gaussian_var(g, self.prep.l, md, self.trils[dd])?;
            total = Some(match total {
                None => kl_d,
                Some(acc) => g.add(acc, kl_d),
            });
        }
        Ok(total.expect("at least one output dimension"))
    }
}

impl FlowField for FieldVars {
    fn eval(&self, g: &Graph, x: Var, t: f64) -> Result<(Var, Var)> {
        let k_xz = self.cross(g, x, t);
        marginal_diag(g, &self.prep, k_xz, self.prior_var)
    }
}

/// Posterior drift and diffusion of an inducing field at a batch of states
/// (value-level convenience; training uses [`FieldVars`] directly).
pub fn field_posterior(
    x: &Tensor,
    t: f64,
    field: &InducingField,
) -> Result<(Tensor, Tensor)> {
    let g = Graph::new();
    let fv = FieldVars::insert(&g, field, false)?;
    let xv = g.constant(x.clone());
    let (mu, var) = fv.eval(&g, xv, t)?;
    Ok((g.value(mu), g.value(var)))
}

/// One Euler–Maruyama step: x + μ·Δt + √Σ ⊙ √Δt ⊙ ε, with the state
/// explosion guard applied to the result.
pub fn em_step<F: FlowField>(
    g: &Graph,
    x: Var,
    t: f64,
    field: &F,
    dt: f64,
    noise: &Tensor,
) -> Result<Var> {
    assert!(dt > 0.0, "em_step needs a positive time step");
    let (drift, diff_var) = field.eval(g, x, t)?;
    let spread = g.sqrt(g.clamp_min(diff_var, 0.0));
    let noise_v = g.constant(noise.clone());
    let increment = g.add(
        g.mul_scalar(drift, dt),
        g.mul_scalar(g.mul(spread, noise_v), libm::sqrt(dt)),
    );
    let next = g.add(x, increment);
    guard_state(g, next, 0)?;
    Ok(next)
}

fn guard_state(g: &Graph, x: Var, step: usize) -> Result<()> {
    let v = g.value(x);
    if !v.all_finite() {
        return Err(Error::NonFiniteState { step, detail: "non-finite state".into() });
    }
    if v.max_abs() > STATE_GUARD {
        return Err(Error::NonFiniteState {
            step,
            detail: format!("state magnitude {:.3e} exceeds guard", v.max_abs()),
        });
    }
    Ok(())
}

/// Integrate one sample path inside a graph. `noise` must hold
/// `cfg.effective_steps()` N×D standard-normal tensors; recorded states
/// (including the initial one) are appended to `record` when given.
pub fn integrate_path<F: FlowField>(
    g: &Graph,
    x0: Var,
    field: &F,
    cfg: &FlowConfig,
    noise: &[Tensor],
    mut record: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let steps = cfg.effective_steps();
    assert_eq!(noise.len(), steps, "need one noise tensor per EM step");
    if let Some(rec) = record.as_deref_mut() {
        rec.push(x0);
    }
    let grid = cfg.time_grid();
    let dt = cfg.dt();
    let mut x = x0;
    for k in 0..steps {
        x = em_step(g, x, grid[k], field, dt, &noise[k]).map_err(|e| match e {
            Error::NonFiniteState { detail, .. } => Error::NonFiniteState { step: k, detail },
            other => other,
        })?;
        if let Some(rec) = record.as_deref_mut() {
            rec.push(x);
        }
    }
    Ok(x)
}

/// Standard-normal noise tensors for one sample path, drawn from the RNG
/// stream derived from (seed, sample).
pub fn draw_noise(cfg: &FlowConfig, n: usize, d: usize, sample: u64) -> Vec<Tensor> {
    let mut rng = Rng::stream(derive_seed(cfg.seed, NOISE_TAG), sample);
    (0..cfg.effective_steps()).map(|_| rng.normal_tensor(&[n, d])).collect()
}

/// Monte Carlo EM paths of an input batch: S × (steps+1) × N × D states.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    pub times: Vec<f64>,
    /// `states[s][k]` is the N×D state of sample s at grid time k.
    pub states: Vec<Vec<Tensor>>,
}

impl TrajectoryBatch {
    pub fn n_samples(&self) -> usize {
        self.states.len()
    }

    /// Terminal states X_T of sample `s`.
    pub fn terminal(&self, s: usize) -> &Tensor {
        self.states[s].last().expect("at least the initial state")
    }
}

/// Integrate `cfg.n_samples` independent EM paths of the batch `x0` through
/// an inducing field, recording every grid state. Sample s draws from the
/// stream (seed, s), so the set of paths is identical however they are
/// scheduled.
pub fn integrate(x0: &Tensor, field: &InducingField, cfg: &FlowConfig) -> Result<TrajectoryBatch> {
    let (n, d) = (x0.rows(), x0.cols());
    let mut states = Vec::with_capacity(cfg.n_samples);
    for s in 0..cfg.n_samples {
        let g = Graph::new();
        let fv = FieldVars::insert(&g, field, false)?;
        let x0v = g.constant(x0.clone());
        let noise = draw_noise(cfg, n, d, s as u64);
        let mut rec = Vec::with_capacity(cfg.effective_steps() + 1);
        integrate_path(&g, x0v, &fv, cfg, &noise, Some(&mut rec))?;
        states.push(rec.into_iter().map(|v| g.value(v)).collect());
    }
    Ok(TrajectoryBatch { times: cfg.time_grid(), states })
}

// ---------------------------------------------------------------------------
// Quick checks used by the `check` CLI.
// ---------------------------------------------------------------------------

pub(crate) fn em_moment_quick_check() -> core::result::Result<String, String> {
    let n = 20_000usize;
    let (mu, var, dt) = (0.7, 0.09, 0.05);
    let field = ConstantField { drift: vec![mu], diffusion_var: vec![var] };
    let g = Graph::new();
    let x0 = g.constant(Tensor::zeros(&[n, 1]));
    let mut rng = Rng::stream(9001, 0);
    let noise = rng.normal_tensor(&[n, 1]);
    let x1 = em_step(&g, x0, 0.0, &field, dt, &noise).map_err(|e| format!("{e}"))?;
    let inc = g.value(x1);
    let mean: f64 = inc.data().iter().sum::<f64>() / n as f64;
    let em_var: f64 =
        inc.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let se_mean = libm::sqrt(var * dt / n as f64);
    let se_var = var * dt * libm::sqrt(2.0 / (n as f64 - 1.0));
    let mean_err = (mean - mu * dt).abs();
    let var_err = (em_var - var * dt).abs();
    if mean_err <= 3.0 * se_mean && var_err <= 3.0 * se_var {
        Ok(format!("mean err {mean_err:.2e} (3SE {:.2e}), var err {var_err:.2e} (3SE {:.2e})", 3.0 * se_mean, 3.0 * se_var))
    } else {
        Err(format!("moment mismatch: mean err {mean_err:.2e} vs {:.2e}, var err {var_err:.2e} vs {:.2e}", 3.0 * se_mean, 3.0 * se_var))
    }
}

fn tiny_field(rng: &mut Rng) -> InducingField {
    let z = rng.normal_tensor(&[4, 2]);
    let kernel = SpatioTemporalKernel::spatial_only(
        crate::kernels::KernelParams::isotropic(2, 1.0, 0.05),
    );
    let kzz = crate::kernels::kernel_matrix(&z, &z, &kernel.spatial);
    let l = crate::linalg::cholesky_psd(&kzz, &Default::default()).unwrap().factor;
    let mut q_u = VariationalGaussian::scaled_prior(&l, 2, 0.3);
    q_u.mean = rng.normal_tensor(&[4, 2]).scaled(0.1);
    InducingField { z, zt: None, q_u, kernel }
}

pub(crate) fn determinism_quick_check() -> core::result::Result<String, String> {
    let mut rng = Rng::seeded(5150);
    let field = tiny_field(&mut rng);
    let x0 = rng.normal_tensor(&[6, 2]);
    let cfg = FlowConfig::new(0.5, 8, 3, 42);
    let a = integrate(&x0, &field, &cfg).map_err(|e| format!("{e}"))?;
    let b = integrate(&x0, &field, &cfg).map_err(|e| format!("{e}"))?;
    for s in 0..cfg.n_samples {
        for k in 0..a.states[s].len() {
            for (x, y) in a.states[s][k].data().iter().zip(b.states[s][k].data()) {
                if x.to_bits() != y.to_bits() {
                    return Err(format!("paths differ at sample {s} step {k}"));
                }
            }
        }
    }
    Ok("two runs bitwise identical".into())
}

pub(crate) fn zero_flow_quick_check() -> core::result::Result<String, String> {
    let mut rng = Rng::seeded(5151);
    let field = tiny_field(&mut rng);
    let x0 = rng.normal_tensor(&[5, 2]);
    let cfg = FlowConfig::new(0.0, 20, 2, 7);
    let traj = integrate(&x0, &field, &cfg).map_err(|e| format!("{e}"))?;
    if traj.times != vec![0.0] {
        return Err(format!("expected single grid point, got {:?}", traj.times));
    }
    for s in 0..2 {
        if traj.terminal(s).max_abs_diff(&x0) != 0.0 {
            return Err("terminal state differs from input at T=0".into());
        }
    }
    Ok("T=0 returns inputs exactly".into())
}
