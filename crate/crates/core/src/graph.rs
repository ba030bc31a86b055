//! Define-by-run reverse-mode gradient tape over tensors.
//!
//! A [`Graph`] is rebuilt for every loss evaluation: ops execute eagerly,
//! recording their inputs, and [`Graph::backward`] walks the tape in reverse
//! creation order accumulating adjoints. Cholesky and triangular solves carry
//! analytic adjoints, so the whole ELBO differentiates without scalar-loop
//! unrolling. Single-threaded and bitwise deterministic for fixed inputs.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::linalg::{self, JitterPolicy};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Erf(Var),
    LogNormCdf(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Cholesky { a: Var, jitter: f64 },
    TriSolve { l: Var, b: Var, transpose: bool },
    RbfGram { x: Var, z: Var, log_ls: Var, log_var: Var },
    Kron(Var, Var),
    RowKron(Var, Var),
    GatherRows(Var, Vec<usize>),
    TrilLogDiag { packed: Var, m: usize },
    DiagPart(Var),
    ConcatCols(Vec<Var>),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    is_param: bool,
}

/// Reverse-mode tape. Interior-mutable so ops compose through `&Graph`.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    jitter_policy: JitterPolicy,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), jitter_policy: JitterPolicy::default() }
    }

    pub fn with_jitter_policy(policy: JitterPolicy) -> Self {
        Graph { nodes: RefCell::new(Vec::new()), jitter_policy: policy }
    }

    fn push(&self, op: Op, value: Tensor, needs_grad: bool, is_param: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, grad: None, needs_grad, is_param });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Insert a constant (no gradient tracked).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Insert a trainable parameter leaf; `grad` is available after backward.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true, true)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Gradient accumulated on a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    fn unary<F: Fn(&Tensor) -> Tensor>(&self, a: Var, f: F, op: Op) -> Var {
        let value = f(&self.nodes.borrow()[a.0].value);
        let needs = self.needs(a);
        self.push(op, value, needs, false)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn binary<F: Fn(f64, f64) -> f64>(&self, a: Var, b: Var, f: F, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            broadcast_binary(&nodes[a.0].value, &nodes[b.0].value, f)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(op, value, needs, false)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |t| t.scaled(-1.0), Op::Neg(a))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |t| t.map(|v| v + c), Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |t| t.scaled(c), Op::MulScalar(a, c))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(math::exp), Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(math::ln), Op::Ln(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(math::sqrt), Op::Sqrt(a))
    }

    pub fn erf(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(math::erf), Op::Erf(a))
    }

    /// log Φ(x), elementwise and tail-stable.
    pub fn log_norm_cdf(&self, a: Var) -> Var {
        self.unary(a, |t| t.map(math::log_norm_cdf), Op::LogNormCdf(a))
    }

    pub fn clamp_min(&self, a: Var, floor: f64) -> Var {
        self.unary(a, |t| t.map(|v| v.max(floor)), Op::ClampMin(a, floor))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            linalg::matmul(&nodes[a.0].value, &nodes[b.0].value)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), value, needs, false)
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, |t| t.transposed(), Op::Transpose(a))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        self.unary(a, |t| t.reshaped(shape.clone()), Op::Reshape(a))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        self.unary(a, |t| Tensor::scalar(t.data().iter().sum()), Op::SumAll(a))
    }

    /// Sum over one axis of a rank ≤ 3 tensor.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            sum_axis_raw(&nodes[a.0].value, axis)
        };
        let needs = self.needs(a);
        self.push(Op::SumAxis(a, axis), value, needs, false)
    }

    /// Lower-triangular Cholesky factor of a PSD matrix, with the jitter
    /// ladder applied. The chosen jitter is treated as a constant in the
    /// backward pass.
    pub fn cholesky(&self, a: Var) -> Result<Var> {
        let chol = {
            let nodes = self.nodes.borrow();
            linalg::cholesky_psd(&nodes[a.0].value, &self.jitter_policy)?
        };
        let needs = self.needs(a);
        Ok(self.push(Op::Cholesky { a, jitter: chol.jitter }, chol.factor, needs, false))
    }

    /// X = op(L)⁻¹·B for lower-triangular L; `transpose` selects op(L) = Lᵀ.
    pub fn tri_solve(&self, l: Var, b: Var, transpose: bool) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            linalg::solve_triangular(&nodes[l.0].value, &nodes[b.0].value, transpose)?
        };
        let needs = self.needs(l) || self.needs(b);
        Ok(self.push(Op::TriSolve { l, b, transpose }, value, needs, false))
    }

    /// RBF-ARD cross-covariance matrix K[i,j] = σ²·exp(−½ Σ_d (x_id−z_jd)²/ℓ_d²)
    /// with gradients to `x`, `z`, the log lengthscales and the log variance.
    pub fn rbf_gram(&self, x: Var, z: Var, log_ls: Var, log_var: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            rbf_gram_raw(
                &nodes[x.0].value,
                &nodes[z.0].value,
                &nodes[log_ls.0].value,
                nodes[log_var.0].value.item(),
            )
        };
        let needs =
            self.needs(x) || self.needs(z) || self.needs(log_ls) || self.needs(log_var);
        self.push(Op::RbfGram { x, z, log_ls, log_var }, value, needs, false)
    }

    pub fn kron(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            linalg::kron(&nodes[a.0].value, &nodes[b.0].value)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Kron(a, b), value, needs, false)
    }

    /// Row-wise Kronecker product: out[i, p·Q+q] = a[i,p]·b[i,q]; `b` may have
    /// a single row which is then shared across all rows of `a`.
    pub fn row_kron(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            row_kron_raw(&nodes[a.0].value, &nodes[b.0].value)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::RowKron(a, b), value, needs, false)
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let c = t.cols();
            let mut out = Tensor::zeros(&[idx.len(), c]);
            for (r, &i) in idx.iter().enumerate() {
                out.data_mut()[r * c..(r + 1) * c].copy_from_slice(t.row(i));
            }
            out
        };
        let needs = self.needs(a);
        self.push(Op::GatherRows(a, idx.to_vec()), value, needs, false)
    }

    /// Build an M×M lower-triangular matrix from a packed parameter vector
    /// (row-major lower triangle) whose diagonal entries are stored in log
    /// space, so the diagonal of the result is strictly positive.
    pub fn tril_logdiag(&self, packed: Var, m: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            tril_logdiag_raw(&nodes[packed.0].value, m)
        };
        let needs = self.needs(packed);
        self.push(Op::TrilLogDiag { packed, m }, value, needs, false)
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diag_part(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let n = t.rows();
            assert_eq!(t.cols(), n, "diag_part expects a square matrix");
            Tensor::vector((0..n).map(|i| t.get2(i, i)).collect())
        };
        let needs = self.needs(a);
        self.push(Op::DiagPart(a), value, needs, false)
    }

    /// Stack length-N vectors (or N×1 matrices) as the columns of an N×D matrix.
    pub fn concat_cols(&self, cols: &[Var]) -> Var {
        assert!(!cols.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let n = nodes[cols[0].0].value.len();
            let d = cols.len();
            let mut out = Tensor::zeros(&[n, d]);
            for (j, &c) in cols.iter().enumerate() {
                let cv = &nodes[c.0].value;
                assert_eq!(cv.len(), n, "concat_cols length mismatch");
                for i in 0..n {
                    out.data_mut()[i * d + j] = cv.data()[i];
                }
            }
            out
        };
        let needs = cols.iter().any(|&c| self.needs(c));
        self.push(Op::ConcatCols(cols.to_vec()), value, needs, false)
    }

    /// Reverse pass from a scalar loss; leaf gradients are readable via
    /// [`Graph::grad`] afterwards. Interior adjoints are freed as soon as
    /// they have been distributed.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let nodes = &mut *nodes;
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::UnsupportedPrimitive {
                detail: "backward requires a scalar loss".to_string(),
            });
        }
        if !nodes[loss.0].value.item().is_finite() {
            return Err(Error::NonFiniteValue { context: "loss".to_string() });
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !nodes[idx].needs_grad || nodes[idx].grad.is_none() {
                continue;
            }
            if nodes[idx].is_param {
                continue; // leaf: keep accumulated gradient
            }
            let g = nodes[idx].grad.take().unwrap();
            let op = nodes[idx].op.clone();
            backprop_op(nodes, idx, &op, g)?;
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.is_param {
                if let Some(gr) = &n.grad {
                    if !gr.all_finite() {
                        return Err(Error::NonFiniteGradient { param: format!("node {i}") });
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [Node], v: Var, contrib: Tensor) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut nodes[v.0].grad {
        Some(g) => {
            debug_assert_eq!(g.shape(), contrib.shape());
            g.add_scaled_in_place(&contrib, 1.0);
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop_op(nodes: &mut [Node], out_idx: usize, op: &Op, g: Tensor) -> Result<()> {
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let ga = reduce_to_shape(&g, nodes[a.0].value.shape());
            let gb = reduce_to_shape(&g, nodes[b.0].value.shape());
            accumulate(nodes, a, ga);
            accumulate(nodes, b, gb);
        }
        Op::Sub(a, b) => {
            let ga = reduce_to_shape(&g, nodes[a.0].value.shape());
            let gb = reduce_to_shape(&g, nodes[b.0].value.shape()).scaled(-1.0);
            accumulate(nodes, a, ga);
            accumulate(nodes, b, gb);
        }
        Op::Mul(a, b) => {
            if nodes[a.0].needs_grad {
                let prod = broadcast_binary(&g, &nodes[b.0].value, |x, y| x * y);
                accumulate(nodes, a, reduce_to_shape(&prod, nodes[a.0].value.shape()));
            }
            if nodes[b.0].needs_grad {
                let prod = broadcast_binary(&g, &nodes[a.0].value, |x, y| x * y);
                accumulate(nodes, b, reduce_to_shape(&prod, nodes[b.0].value.shape()));
            }
        }
        Op::Div(a, b) => {
            if nodes[a.0].needs_grad {
                let ga = broadcast_binary(&g, &nodes[b.0].value, |x, y| x / y);
                accumulate(nodes, a, reduce_to_shape(&ga, nodes[a.0].value.shape()));
            }
            if nodes[b.0].needs_grad {
                let gout = broadcast_binary(&g, &nodes[out_idx].value, |x, y| x * y);
                let gb = broadcast_binary(&gout, &nodes[b.0].value, |x, y| -x / y);
                accumulate(nodes, b, reduce_to_shape(&gb, nodes[b.0].value.shape()));
            }
        }
        Op::Neg(a) => accumulate(nodes, a, g.scaled(-1.0)),
        Op::AddScalar(a, _) => accumulate(nodes, a, g),
        Op::MulScalar(a, c) => accumulate(nodes, a, g.scaled(c)),
        Op::Exp(a) => {
            let ga = elementwise_product(&g, &nodes[out_idx].value);
            accumulate(nodes, a, ga);
        }
        Op::Ln(a) => {
            let ga = broadcast_binary(&g, &nodes[a.0].value, |x, y| x / y);
            accumulate(nodes, a, ga);
        }
        Op::Sqrt(a) => {
            let ga = broadcast_binary(&g, &nodes[out_idx].value, |x, y| 0.5 * x / y);
            accumulate(nodes, a, ga);
        }
        Op::Erf(a) => {
            let two_over_sqrt_pi = 2.0 / math::SQRT_PI;
            let ga = broadcast_binary(&g, &nodes[a.0].value, |x, v| {
                x * two_over_sqrt_pi * math::exp(-v * v)
            });
            accumulate(nodes, a, ga);
        }
        Op::LogNormCdf(a) => {
            let ga =
                broadcast_binary(&g, &nodes[a.0].value, |x, v| x * math::norm_pdf_over_cdf(v));
            accumulate(nodes, a, ga);
        }
        Op::ClampMin(a, floor) => {
            let ga = broadcast_binary(&g, &nodes[a.0].value, |x, v| if v > floor { x } else { 0.0 });
            accumulate(nodes, a, ga);
        }
        Op::MatMul(a, b) => {
            if nodes[a.0].needs_grad {
                let ga = linalg::matmul_nt(&g, &nodes[b.0].value);
                accumulate(nodes, a, ga);
            }
            if nodes[b.0].needs_grad {
                let gb = linalg::matmul_tn(&nodes[a.0].value, &g);
                accumulate(nodes, b, gb);
            }
        }
        Op::Transpose(a) => accumulate(nodes, a, g.transposed()),
        Op::Reshape(a) => {
            let shape = nodes[a.0].value.shape().to_vec();
            accumulate(nodes, a, g.reshaped(shape));
        }
        Op::SumAll(a) => {
            let gs = g.item();
            let shape = nodes[a.0].value.shape().to_vec();
            accumulate(nodes, a, Tensor::full(&shape, gs));
        }
        Op::SumAxis(a, axis) => {
            let ga = broadcast_along_axis(&g, nodes[a.0].value.shape(), axis);
            accumulate(nodes, a, ga);
        }
        Op::Cholesky { a, .. } => {
            let ga = cholesky_backward(&nodes[out_idx].value, &g)?;
            accumulate(nodes, a, ga);
        }
        Op::TriSolve { l, b, transpose } => {
            let gb = linalg::solve_triangular(&nodes[l.0].value, &g, !transpose)?;
            if nodes[l.0].needs_grad {
                let x = &nodes[out_idx].value;
                let (xm, gm);
                let x2: &Tensor;
                let gb2: &Tensor;
                if x.rank() == 1 {
                    xm = x.reshaped(vec![x.len(), 1]);
                    gm = gb.reshaped(vec![gb.len(), 1]);
                    x2 = &xm;
                    gb2 = &gm;
                } else {
                    x2 = x;
                    gb2 = &gb;
                }
                let full = if !transpose {
                    linalg::matmul_nt(gb2, x2).scaled(-1.0)
                } else {
                    linalg::matmul_nt(x2, gb2).scaled(-1.0)
                };
                accumulate(nodes, l, tril_mask(&full));
            }
            accumulate(nodes, b, gb);
        }
        Op::RbfGram { x, z, log_ls, log_var } => {
            rbf_gram_backward(nodes, out_idx, x, z, log_ls, log_var, &g);
        }
        Op::Kron(a, b) => {
            let (ra, ca) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let (rb, cb) = (nodes[b.0].value.rows(), nodes[b.0].value.cols());
            if nodes[a.0].needs_grad {
                let mut ga = Tensor::zeros(&[ra, ca]);
                for i in 0..ra {
                    for j in 0..ca {
                        let mut acc = 0.0;
                        for p in 0..rb {
                            for q in 0..cb {
                                acc += g.get2(i * rb + p, j * cb + q) * nodes[b.0].value.get2(p, q);
                            }
                        }
                        ga.set2(i, j, acc);
                    }
                }
                accumulate(nodes, a, ga);
            }
            if nodes[b.0].needs_grad {
                let mut gb = Tensor::zeros(&[rb, cb]);
                for p in 0..rb {
                    for q in 0..cb {
                        let mut acc = 0.0;
                        for i in 0..ra {
                            for j in 0..ca {
                                acc += g.get2(i * rb + p, j * cb + q) * nodes[a.0].value.get2(i, j);
                            }
                        }
                        gb.set2(p, q, acc);
                    }
                }
                accumulate(nodes, b, gb);
            }
        }
        Op::RowKron(a, b) => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (n, p) = (av.rows(), av.cols());
            let q = bv.cols();
            let b_shared = bv.rows() == 1;
            if nodes[a.0].needs_grad {
                let mut ga = Tensor::zeros(&[n, p]);
                for i in 0..n {
                    let bi = if b_shared { 0 } else { i };
                    for pp in 0..p {
                        let mut acc = 0.0;
                        for qq in 0..q {
                            acc += g.get2(i, pp * q + qq) * bv.get2(bi, qq);
                        }
                        ga.set2(i, pp, acc);
                    }
                }
                accumulate(nodes, a, ga);
            }
            if nodes[b.0].needs_grad {
                let mut gb = Tensor::zeros(&[bv.rows(), q]);
                for i in 0..n {
                    let bi = if b_shared { 0 } else { i };
                    for pp in 0..p {
                        let aval = av.get2(i, pp);
                        for qq in 0..q {
                            let cur = gb.get2(bi, qq);
                            gb.set2(bi, qq, cur + g.get2(i, pp * q + qq) * aval);
                        }
                    }
                }
                accumulate(nodes, b, gb);
            }
        }
        Op::GatherRows(a, ref idx) => {
            let c = nodes[a.0].value.cols();
            let r = nodes[a.0].value.rows();
            let mut ga = Tensor::zeros(&[r, c]);
            for (row, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    let cur = ga.get2(i, j);
                    ga.set2(i, j, cur + g.get2(row, j));
                }
            }
            accumulate(nodes, a, ga);
        }
        Op::DiagPart(a) => {
            let n = nodes[a.0].value.rows();
            let mut ga = Tensor::zeros(&[n, n]);
            for i in 0..n {
                ga.set2(i, i, g.data()[i]);
            }
            accumulate(nodes, a, ga);
        }
        Op::ConcatCols(ref cols) => {
            let d = cols.len();
            for (j, &c) in cols.iter().enumerate() {
                if !nodes[c.0].needs_grad {
                    continue;
                }
                let shape = nodes[c.0].value.shape().to_vec();
                let n = nodes[c.0].value.len();
                let mut gc = Tensor::zeros(&shape);
                for i in 0..n {
                    gc.data_mut()[i] = g.data()[i * d + j];
                }
                accumulate(nodes, c, gc);
            }
        }
        Op::TrilLogDiag { packed, m } => {
            let l = &nodes[out_idx].value;
            let mut gp = Tensor::zeros(&[m * (m + 1) / 2]);
            let gd = gp.data_mut();
            let mut k = 0;
            for i in 0..m {
                for j in 0..=i {
                    gd[k] = if i == j {
                        g.get2(i, i) * l.get2(i, i) // chain through exp on the diagonal
                    } else {
                        g.get2(i, j)
                    };
                    k += 1;
                }
            }
            accumulate(nodes, packed, gp);
        }
    }
    Ok(())
}

/// Adjoint of the Cholesky factorization (Murray 2016): with P the lower
/// triangle of Lᵀ·dL with halved diagonal, dA = sym(L⁻ᵀ·P·L⁻¹).
fn cholesky_backward(l: &Tensor, dl: &Tensor) -> Result<Tensor> {
    let p = linalg::phi_lower_half_diag(&linalg::matmul_tn(l, dl));
    let t = linalg::solve_triangular(l, &p, true)?; // L⁻ᵀ·P
    // t·L⁻¹ = (L⁻ᵀ·tᵀ)ᵀ
    let da = linalg::solve_triangular(l, &t.transposed(), true)?.transposed();
    let n = da.rows();
    let mut sym = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            sym.set2(i, j, 0.5 * (da.get2(i, j) + da.get2(j, i)));
        }
    }
    Ok(sym)
}

fn tril_mask(t: &Tensor) -> Tensor {
    let n = t.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            out.set2(i, j, t.get2(i, j));
        }
    }
    out
}

/// Forward kernel for the RBF-ARD gram op; shared with `kernels`.
pub(crate) fn rbf_gram_raw(x: &Tensor, z: &Tensor, log_ls: &Tensor, log_var: f64) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let m = z.rows();
    assert_eq!(z.cols(), d, "rbf_gram dimension mismatch");
    assert_eq!(log_ls.len(), d, "one log lengthscale per input dimension");
    let sig2 = math::exp(log_var);
    let w: Vec<f64> = log_ls.data().iter().map(|&v| math::exp(-2.0 * v)).collect();
    let mut out = Tensor::zeros(&[n, m]);
    let od = out.data_mut();
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..m {
            let zj = z.row(j);
            let mut s = 0.0;
            for k in 0..d {
                let diff = xi[k] - zj[k];
                s += w[k] * diff * diff;
            }
            od[i * m + j] = sig2 * math::exp(-0.5 * s);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn rbf_gram_backward(
    nodes: &mut [Node],
    out_idx: usize,
    x: Var,
    z: Var,
    log_ls: Var,
    log_var: Var,
    g: &Tensor,
) {
    let (n, m) = (nodes[out_idx].value.rows(), nodes[out_idx].value.cols());
    let d = nodes[x.0].value.cols();
    let w: Vec<f64> =
        nodes[log_ls.0].value.data().iter().map(|&v| math::exp(-2.0 * v)).collect();
    let need_x = nodes[x.0].needs_grad;
    let need_z = nodes[z.0].needs_grad;
    let need_ls = nodes[log_ls.0].needs_grad;
    let need_var = nodes[log_var.0].needs_grad;
    let mut gx = if need_x { Some(Tensor::zeros(&[n, d])) } else { None };
    let mut gz = if need_z { Some(Tensor::zeros(&[m, d])) } else { None };
    let mut gls = vec![0.0; d];
    let mut gvar = 0.0;
    {
        let kv = &nodes[out_idx].value;
        let xv = &nodes[x.0].value;
        let zv = &nodes[z.0].value;
        for i in 0..n {
            let xi = xv.row(i);
            for j in 0..m {
                let gk = g.get2(i, j);
                if gk == 0.0 {
                    continue;
                }
                let common = gk * kv.get2(i, j);
                gvar += common;
                let zj = zv.row(j);
                for k in 0..d {
                    let diff = xi[k] - zj[k];
                    let wd = w[k] * diff;
                    if need_ls {
                        gls[k] += common * wd * diff;
                    }
                    if let Some(gx) = gx.as_mut() {
                        gx.data_mut()[i * d + k] -= common * wd;
                    }
                    if let Some(gz) = gz.as_mut() {
                        gz.data_mut()[j * d + k] += common * wd;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        accumulate(nodes, x, gx);
    }
    if let Some(gz) = gz {
        accumulate(nodes, z, gz);
    }
    if need_ls {
        accumulate(nodes, log_ls, Tensor::vector(gls));
    }
    if need_var {
        accumulate(nodes, log_var, Tensor::scalar(gvar));
    }
}

pub(crate) fn tril_logdiag_raw(packed: &Tensor, m: usize) -> Tensor {
    assert_eq!(packed.len(), m * (m + 1) / 2, "packed length vs m");
    let mut l = Tensor::zeros(&[m, m]);
    let pd = packed.data();
    let mut k = 0;
    for i in 0..m {
        for j in 0..=i {
            let v = if i == j { math::exp(pd[k]) } else { pd[k] };
            l.set2(i, j, v);
            k += 1;
        }
    }
    l
}

fn row_kron_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, p) = (a.rows(), a.cols());
    let q = b.cols();
    assert!(b.rows() == n || b.rows() == 1, "row_kron rows {} vs {}", b.rows(), n);
    let shared = b.rows() == 1;
    let mut out = Tensor::zeros(&[n, p * q]);
    for i in 0..n {
        let bi = if shared { 0 } else { i };
        for pp in 0..p {
            let av = a.get2(i, pp);
            for qq in 0..q {
                out.set2(i, pp * q + qq, av * b.get2(bi, qq));
            }
        }
    }
    out
}

fn sum_axis_raw(t: &Tensor, axis: usize) -> Tensor {
    let shape = t.shape();
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    assert!(shape.len() <= 3, "sum_axis supports rank <= 3");
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape: Vec<usize> = shape.to_vec();
    out_shape.remove(axis);
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let td = t.data();
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            let obase = o * inner;
            for i in 0..inner {
                od[obase + i] += td[base + i];
            }
        }
    }
    out
}

fn broadcast_along_axis(g: &Tensor, target_shape: &[usize], axis: usize) -> Tensor {
    let outer: usize = target_shape[..axis].iter().product();
    let mid = target_shape[axis];
    let inner: usize = target_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(target_shape);
    let od = out.data_mut();
    let gd = g.data();
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            let gbase = o * inner;
            od[base..base + inner].copy_from_slice(&gd[gbase..gbase + inner]);
        }
    }
    out
}

fn elementwise_product(a: &Tensor, b: &Tensor) -> Tensor {
    broadcast_binary(a, b, |x, y| x * y)
}

/// Numpy-style broadcasting for a binary elementwise op, with fast paths for
/// the shapes that dominate the training loop.
pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.is_scalar() {
        let y = b.item();
        return a.map(|x| f(x, y));
    }
    if a.is_scalar() {
        let x = a.item();
        return b.map(|y| f(x, y));
    }
    // matrix vs per-row / per-column vectors
    if a.rank() == 2 && b.rank() == 2 {
        let (r, c) = (a.rows(), a.cols());
        if b.rows() == r && b.cols() == 1 {
            let mut out = Tensor::zeros(&[r, c]);
            for i in 0..r {
                let y = b.data()[i];
                for j in 0..c {
                    out.data_mut()[i * c + j] = f(a.get2(i, j), y);
                }
            }
            return out;
        }
        if b.rows() == 1 && b.cols() == c {
            let mut out = Tensor::zeros(&[r, c]);
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[i * c + j] = f(a.get2(i, j), b.data()[j]);
                }
            }
            return out;
        }
        if a.rows() == b.rows() && a.cols() == 1 {
            let (r, c) = (b.rows(), b.cols());
            let mut out = Tensor::zeros(&[r, c]);
            for i in 0..r {
                let x = a.data()[i];
                for j in 0..c {
                    out.data_mut()[i * c + j] = f(x, b.get2(i, j));
                }
            }
            return out;
        }
        if a.rows() == 1 && a.cols() == b.cols() {
            let (r, c) = (b.rows(), b.cols());
            let mut out = Tensor::zeros(&[r, c]);
            for i in 0..r {
                for j in 0..c {
                    out.data_mut()[i * c + j] = f(a.data()[j], b.get2(i, j));
                }
            }
            return out;
        }
    }
    // general strided broadcast
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let rank = out_shape.len();
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1usize; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (sa, sb) = (pad(a.shape()), pad(b.shape()));
    let strides = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (sta, stb) = (strides(&sa), strides(&sb));
    let total: usize = out_shape.iter().product();
    let mut out = Tensor::zeros(&out_shape);
    let od = out.data_mut();
    let mut coords = vec![0usize; rank];
    for (flat, o) in od.iter_mut().enumerate().take(total) {
        let mut rem = flat;
        for i in (0..rank).rev() {
            coords[i] = rem % out_shape[i];
            rem /= out_shape[i];
        }
        let ia: usize = coords.iter().zip(&sta).map(|(&c, &s)| c * s).sum();
        let ib: usize = coords.iter().zip(&stb).map(|(&c, &s)| c * s).sum();
        *o = f(a.data()[ia], b.data()[ib]);
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![1usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(da == db || da == 1 || db == 1, "incompatible broadcast {a:?} vs {b:?}");
        out[i] = da.max(db);
    }
    out
}

/// Sum a gradient tensor down to a (possibly broadcast-smaller) target shape.
pub(crate) fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let rank = g.rank();
    let pad_target: Vec<usize> = {
        let mut v = vec![1usize; rank - target.len()];
        v.extend_from_slice(target);
        v
    };
    let gshape = g.shape().to_vec();
    let mut out = Tensor::zeros(&pad_target);
    let od = out.data_mut();
    let mut coords = vec![0usize; rank];
    let out_strides = {
        let mut st = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            st[i] = if pad_target[i] == 1 { 0 } else { acc };
            acc *= pad_target[i];
        }
        st
    };
    for (flat, &gv) in g.data().iter().enumerate() {
        let mut rem = flat;
        for i in (0..rank).rev() {
            coords[i] = rem % gshape[i];
            rem /= gshape[i];
        }
        let oi: usize = coords.iter().zip(&out_strides).map(|(&c, &s)| c * s).sum();
        od[oi] += gv;
    }
    out.reshaped(target.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::finite_difference_check;

    #[test]
    fn square_gradient_is_2x() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_loss_leaves_zero_gradients() {
        let g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant_scalar(5.0);
        let loss = g.mul(c, c);
        g.backward(loss).unwrap();
        // x never feeds the loss: no gradient accumulated at all.
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_twice_resets_gradients() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.mul(x, x);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
    }

    #[test]
    fn logdet_via_cholesky_matches_finite_differences() {
        // loss = log|det K| = 2·Σ log L_ii for a random PD K.
        let mut rng = crate::rng::Rng::seeded(21);
        let raw = rng.normal_tensor(&[3, 3]);
        let k = linalg::matmul_nt(&raw, &raw);
        let k = {
            let mut k = k;
            for i in 0..3 {
                let v = k.get2(i, i) + 1.0;
                k.set2(i, i, v);
            }
            k
        };
        finite_difference_check(
            &[k],
            |g, vars| {
                let l = g.cholesky(vars[0]).unwrap();
                // log|det K| = 2·Σ log L_ii; the diagonal is isolated by an
                // identity mask and a row sum before taking the log.
                let diag = g.sum_axis(g.mul(l, g.constant(Tensor::eye(3))), 1);
                g.mul_scalar(g.sum_all(g.ln(diag)), 2.0)
            },
            1e-5,
            1e-4,
            1e-7,
        )
        .unwrap();
    }

    #[test]
    fn gather_rows_and_scatter_gradient() {
        let g = Graph::new();
        let a = g.param(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = g.gather_rows(a, &[2, 0, 2]);
        let loss = g.sum_all(picked);
        g.backward(loss).unwrap();
        let ga = g.grad(a).unwrap();
        assert_eq!(ga.data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcasting_row_and_column() {
        let g = Graph::new();
        let a = g.param(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let col = g.param(Tensor::matrix(2, 1, vec![10.0, 20.0]));
        let row = g.param(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        let out = g.add(g.mul(a, col), row);
        assert_eq!(g.value(out).data(), &[11.0, 22.0, 33.0, 81.0, 102.0, 123.0]);
        let loss = g.sum_all(out);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(col).unwrap().data(), &[6.0, 15.0]);
        assert_eq!(g.grad(row).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn tril_logdiag_builds_positive_diagonal() {
        let g = Graph::new();
        let packed = g.param(Tensor::vector(vec![0.0, 2.0, -0.5]));
        let l = g.tril_logdiag(packed, 2);
        let lv = g.value(l);
        assert_eq!(lv.get2(0, 0), 1.0);
        assert_eq!(lv.get2(1, 0), 2.0);
        assert!((lv.get2(1, 1) - math::exp(-0.5)).abs() < 1e-15);
        assert_eq!(lv.get2(0, 1), 0.0);
    }
}
