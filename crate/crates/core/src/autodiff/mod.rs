//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations execute eagerly and are recorded on a [`Tape`]. Every backward
//! rule is itself written in terms of tape operations, so when
//! [`Tape::gradient`] is called with `create_graph = true` the returned
//! gradients are ordinary [`Var`]s that can be differentiated again. That is
//! what the gradient penalty in [`crate::feedback::rrr_loss`] relies on.
//!
//! ```
//! use xil_core::autodiff::Tape;
//! use xil_core::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.parameter("x", Tensor::scalar(2.0));
//! let y = x.mul(&x)?.mul(&x)?; // x^3
//! let dy = tape.gradient(&y, &[&x], true)?.remove(0);
//! let d2y = tape.gradient(&dy.var, &[&x], false)?.remove(0);
//! assert_eq!(dy.var.item(), 12.0);
//! assert_eq!(d2y.var.item(), 12.0); // 6x
//! # Ok::<(), xil_core::autodiff::AutodiffError>(())
//! ```
//!
//! The relu derivative at exactly zero is taken to be zero.

mod expr;
mod kernels;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use crate::tensor::Tensor;
use kernels::ConvGeom;

pub use expr::{evaluate, Expr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("gradient target must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("variables belong to different tapes")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Input,
    Parameter,
    Constant,
    Op,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    MaskMul(Rc<Tensor>),
    MatMul,
    Transpose,
    Reshape,
    /// Output keeps the parent's axes at these positions.
    Expand(Vec<usize>),
    /// Parent axes that were summed away.
    SumAxes(Vec<usize>),
    Exp,
    Relu,
    LogSoftmax,
    Conv2d { pad: usize },
    Conv2dBackInput { pad: usize },
    Conv2dBackKernel { pad: usize },
    /// out[i] = in[table[i]]
    Gather(Rc<Vec<usize>>),
    /// out[table[i]] += in[i]
    ScatterAdd(Rc<Vec<usize>>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    parents: Vec<usize>,
    kind: NodeKind,
    name: Option<String>,
}

struct TapeInner {
    nodes: Vec<Node>,
    recording: bool,
}

/// An ordered record of executed operations.
///
/// A `Tape` is a cheap shared handle; clones refer to the same record.
/// Tapes are single-threaded.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A handle to one node on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// One entry of a [`Tape::gradient`] result.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub var: Var,
    /// False when the target does not depend on this variable; `var` is then
    /// a zero tensor.
    pub reachable: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                recording: true,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, parents: Vec<usize>, kind: NodeKind, name: Option<String>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let (op, parents, kind) = if inner.recording || kind != NodeKind::Op {
            (op, parents, kind)
        } else {
            (Op::Leaf, Vec::new(), NodeKind::Constant)
        };
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            parents,
            kind,
            name,
        });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    fn push_op(&self, op_name: &'static str, value: Vec<f64>, shape: Vec<usize>, op: Op, parents: Vec<usize>) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite(op_name));
        }
        Ok(self.push(Tensor::from_parts(shape, value), op, parents, NodeKind::Op, None))
    }

    pub fn input(&self, name: &str, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), NodeKind::Input, Some(name.to_string()))
    }

    pub fn parameter(&self, name: &str, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), NodeKind::Parameter, Some(name.to_string()))
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), NodeKind::Constant, None)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn var(&self, id: usize) -> Var {
        Var { tape: self.clone(), id }
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Forward values of all nodes in recording order. Two tapes built from
    /// identical inputs produce bit-identical traces.
    pub fn trace(&self) -> Vec<Tensor> {
        self.inner.borrow().nodes.iter().map(|n| (*n.value).clone()).collect()
    }

    /// Derivatives of the scalar `target` with respect to each of `wrt`.
    ///
    /// With `create_graph` the backward computation is recorded, so the
    /// returned variables can themselves be differentiated. Without it the
    /// results are constants.
    pub fn gradient(&self, target: &Var, wrt: &[&Var], create_graph: bool) -> Result<Vec<Gradient>> {
        if !self.same(&target.tape) || wrt.iter().any(|w| !self.same(&w.tape)) {
            return Err(AutodiffError::ForeignVar);
        }
        let target_shape = target.shape();
        if !target_shape.is_empty() && target_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NotScalar(target_shape));
        }

        // Nodes whose value depends on at least one of `wrt`.
        let needs: Vec<bool> = {
            let inner = self.inner.borrow();
            let mut needs = vec![false; target.id + 1];
            for w in wrt {
                if w.id <= target.id {
                    needs[w.id] = true;
                }
            }
            for id in 0..=target.id {
                if !needs[id] && inner.nodes[id].parents.iter().any(|&p| needs[p]) {
                    needs[id] = true;
                }
            }
            needs
        };

        let previous = std::mem::replace(&mut self.inner.borrow_mut().recording, create_graph);
        let result = self.backward(target, &needs);
        self.inner.borrow_mut().recording = previous;
        let adjoints = result?;

        Ok(wrt
            .iter()
            .map(|w| match adjoints.get(&w.id) {
                Some(g) => Gradient {
                    var: g.clone(),
                    reachable: true,
                },
                None => Gradient {
                    var: self.constant(Tensor::zeros(w.shape())),
                    reachable: false,
                },
            })
            .collect())
    }

    fn backward(&self, target: &Var, needs: &[bool]) -> Result<HashMap<usize, Var>> {
        let mut adjoints: HashMap<usize, Var> = HashMap::new();
        if !needs[target.id] {
            return Ok(adjoints);
        }
        let seed = Tensor::full(target.shape(), 1.0);
        adjoints.insert(target.id, self.constant(seed));

        for id in (0..=target.id).rev() {
            if !needs[id] {
                continue;
            }
            let Some(g) = adjoints.get(&id).cloned() else {
                continue;
            };
            let (op, parents) = {
                let inner = self.inner.borrow();
                let node = &inner.nodes[id];
                (node.op.clone(), node.parents.clone())
            };
            if parents.is_empty() {
                continue;
            }
            let wants: Vec<bool> = parents.iter().map(|&p| needs[p]).collect();
            let contributions = self.backward_rule(id, &op, &parents, &wants, &g)?;
            for (parent, contribution) in parents.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                let merged = match adjoints.remove(parent) {
                    Some(existing) => existing.add(&c)?,
                    None => c,
                };
                adjoints.insert(*parent, merged);
            }
        }
        Ok(adjoints)
    }

    fn backward_rule(&self, id: usize, op: &Op, parents: &[usize], wants: &[bool], g: &Var) -> Result<Vec<Option<Var>>> {
        let p = |i: usize| self.var(parents[i]);
        let when = |i: usize, f: &dyn Fn() -> Result<Var>| -> Result<Option<Var>> {
            if wants[i] {
                f().map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(match op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![when(0, &|| Ok(g.clone()))?, when(1, &|| Ok(g.clone()))?],
            Op::Sub => vec![when(0, &|| Ok(g.clone()))?, when(1, &|| g.neg())?],
            Op::Mul => vec![when(0, &|| g.mul(&p(1)))?, when(1, &|| g.mul(&p(0)))?],
            Op::Neg => vec![when(0, &|| g.neg())?],
            Op::Scale(c) => vec![when(0, &|| g.scale(*c))?],
            Op::MaskMul(m) => vec![when(0, &|| g.mask_mul_shared(Rc::clone(m)))?],
            Op::MatMul => vec![
                when(0, &|| g.matmul(&p(1).transpose()?))?,
                when(1, &|| p(0).transpose()?.matmul(g))?,
            ],
            Op::Transpose => vec![when(0, &|| g.transpose())?],
            Op::Reshape => vec![when(0, &|| g.reshape(&p(0).shape()))?],
            Op::Expand(keep) => {
                let rank = g.shape().len();
                let summed: Vec<usize> = (0..rank).filter(|a| !keep.contains(a)).collect();
                vec![when(0, &|| g.sum_axes(&summed))?]
            }
            Op::SumAxes(axes) => {
                let parent_shape = p(0).shape();
                let keep: Vec<usize> = (0..parent_shape.len()).filter(|a| !axes.contains(a)).collect();
                vec![when(0, &|| g.expand(&parent_shape, &keep))?]
            }
            Op::Exp => vec![when(0, &|| g.mul(&self.var(id)))?],
            Op::Relu => {
                let x = self.value_of(parents[0]);
                let step = Tensor::from_parts(
                    x.shape().to_vec(),
                    x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
                );
                vec![when(0, &|| g.mask_mul(&step))?]
            }
            Op::LogSoftmax => {
                let out = self.var(id);
                vec![when(0, &|| {
                    let shape = out.shape();
                    let last = shape.len() - 1;
                    let keep: Vec<usize> = (0..last).collect();
                    let row_sum = g.sum_axes(&[last])?.expand(&shape, &keep)?;
                    g.sub(&out.exp()?.mul(&row_sum)?)
                })?]
            }
            Op::Conv2d { pad } => {
                let (x, k) = (p(0), p(1));
                vec![
                    when(0, &|| g.conv2d_back_input(&k, *pad, &x.shape()))?,
                    when(1, &|| x.conv2d_back_kernel(g, *pad, &k.shape()))?,
                ]
            }
            Op::Conv2dBackInput { pad } => {
                // node = B_in(dy, k); upstream g has the input's shape
                let (dy, k) = (p(0), p(1));
                vec![
                    when(0, &|| g.conv2d(&k, *pad))?,
                    when(1, &|| g.conv2d_back_kernel(&dy, *pad, &k.shape()))?,
                ]
            }
            Op::Conv2dBackKernel { pad } => {
                // node = B_k(x, dy); upstream g has the kernel's shape
                let (x, dy) = (p(0), p(1));
                vec![
                    when(0, &|| dy.conv2d_back_input(g, *pad, &x.shape()))?,
                    when(1, &|| x.conv2d(g, *pad))?,
                ]
            }
            Op::Gather(table) => {
                let shape = p(0).shape();
                vec![when(0, &|| g.scatter_add(Rc::clone(table), &shape))?]
            }
            Op::ScatterAdd(table) => {
                let shape = p(0).shape();
                vec![when(0, &|| g.gather(Rc::clone(table), &shape))?]
            }
        })
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn kind(&self) -> NodeKind {
        self.tape.inner.borrow().nodes[self.id].kind
    }

    pub fn name(&self) -> Option<String> {
        self.tape.inner.borrow().nodes[self.id].name.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn check_tape(&self, other: &Var) -> Result<()> {
        if self.tape.same(&other.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    fn elementwise(&self, other: &Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.push_op(name, data, a.shape().to_vec(), op, vec![self.id, other.id])
    }

    fn unary(&self, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        self.tape.push_op(name, data, a.shape().to_vec(), op, vec![self.id])
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.elementwise(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    pub fn neg(&self) -> Result<Var> {
        self.unary("neg", Op::Neg, |a| -a)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.unary("scale", Op::Scale(c), |a| a * c)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary("exp", Op::Exp, f64::exp)
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary("relu", Op::Relu, |a| if a > 0.0 { a } else { 0.0 })
    }

    /// Elementwise product with a constant tensor (no gradient flows into
    /// `mask`).
    pub fn mask_mul(&self, mask: &Tensor) -> Result<Var> {
        self.mask_mul_shared(Rc::new(mask.clone()))
    }

    fn mask_mul_shared(&self, mask: Rc<Tensor>) -> Result<Var> {
        let a = self.value();
        if a.shape() != mask.shape() {
            return Err(mismatch("mask_mul", format!("{:?} vs {:?}", a.shape(), mask.shape())));
        }
        let data = a.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        self.tape.push_op("mask_mul", data, a.shape().to_vec(), Op::MaskMul(mask), vec![self.id])
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let data = kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]);
        self.tape.push_op("matmul", data, vec![sa[0], sb[1]], Op::MatMul, vec![self.id, other.id])
    }

    pub fn transpose(&self) -> Result<Var> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 {
            return Err(mismatch("transpose", format!("rank {} input", s.len())));
        }
        let data = kernels::transpose(a.data(), s[0], s[1]);
        self.tape.push_op("transpose", data, vec![s[1], s[0]], Op::Transpose, vec![self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.len() {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", a.shape())));
        }
        self.tape.push_op("reshape", a.data().to_vec(), shape.to_vec(), Op::Reshape, vec![self.id])
    }

    /// Broadcasts into `shape`; `keep[i]` is the output axis that carries
    /// input axis `i`. All other output axes are repeated copies.
    pub fn expand(&self, shape: &[usize], keep: &[usize]) -> Result<Var> {
        let a = self.value();
        let ok = keep.len() == a.rank()
            && keep.windows(2).all(|w| w[0] < w[1])
            && keep.iter().zip(a.shape()).all(|(&ax, &d)| ax < shape.len() && shape[ax] == d);
        if !ok {
            return Err(mismatch("expand", format!("{:?} -> {shape:?} keeping {keep:?}", a.shape())));
        }
        let map = kernels::broadcast_index(shape, keep);
        let data = map.iter().map(|&i| a.data()[i]).collect();
        self.tape.push_op("expand", data, shape.to_vec(), Op::Expand(keep.to_vec()), vec![self.id])
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var> {
        let a = self.value();
        let shape = a.shape();
        if axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(mismatch("sum_axes", format!("axes {axes:?} on {shape:?}")));
        }
        let keep: Vec<usize> = (0..shape.len()).filter(|ax| !axes.contains(ax)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|&ax| shape[ax]).collect();
        let mut data = vec![0.0; out_shape.iter().product()];
        for (i, small) in kernels::broadcast_index(shape, &keep).into_iter().enumerate() {
            data[small] += a.data()[i];
        }
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        self.tape.push_op("sum_axes", data, out_shape, Op::SumAxes(axes), vec![self.id])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes)
    }

    /// Adds `bias` broadcast along every axis except `axis`.
    pub fn add_bias(&self, bias: &Var, axis: usize) -> Result<Var> {
        let shape = self.shape();
        self.add(&bias.expand(&shape, &[axis])?)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var> {
        let a = self.value();
        let shape = a.shape();
        let Some(&width) = shape.last() else {
            return Err(mismatch("log_softmax", "rank-0 input".into()));
        };
        let mut data = Vec::with_capacity(a.len());
        for row in a.data().chunks(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        self.tape.push_op("log_softmax", data, shape.to_vec(), Op::LogSoftmax, vec![self.id])
    }

    fn conv_geom(x: &[usize], k: &[usize], pad: usize, op: &'static str) -> Result<ConvGeom> {
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
            return Err(mismatch(op, format!("input {x:?}, kernel {k:?}")));
        }
        if x[2] + 2 * pad < k[2] || x[3] + 2 * pad < k[3] {
            return Err(mismatch(op, format!("kernel {k:?} larger than padded input {x:?}")));
        }
        Ok(ConvGeom { n: x[0], c: x[1], h: x[2], w: x[3], o: k[0], kh: k[2], kw: k[3], pad })
    }

    /// Stride-1 cross-correlation of `[N, C, H, W]` with `[O, C, kh, kw]`,
    /// zero-padded by `pad` on every side. `pad = 0` is "valid";
    /// `pad = (k - 1) / 2` with odd `k` is "same".
    pub fn conv2d(&self, kernel: &Var, pad: usize) -> Result<Var> {
        self.check_tape(kernel)?;
        let (x, k) = (self.value(), kernel.value());
        let g = Self::conv_geom(x.shape(), k.shape(), pad, "conv2d")?;
        let data = kernels::conv2d(x.data(), k.data(), g);
        let shape = vec![g.n, g.o, g.out_h(), g.out_w()];
        self.tape.push_op("conv2d", data, shape, Op::Conv2d { pad }, vec![self.id, kernel.id])
    }

    /// Input-gradient of [`Var::conv2d`]; `self` is the output gradient.
    fn conv2d_back_input(&self, kernel: &Var, pad: usize, input_shape: &[usize]) -> Result<Var> {
        let (dy, k) = (self.value(), kernel.value());
        let g = Self::conv_geom(input_shape, k.shape(), pad, "conv2d_back_input")?;
        if dy.shape() != [g.n, g.o, g.out_h(), g.out_w()] {
            return Err(mismatch("conv2d_back_input", format!("gradient {:?}", dy.shape())));
        }
        let data = kernels::conv2d_back_input(dy.data(), k.data(), g);
        let op = Op::Conv2dBackInput { pad };
        self.tape.push_op("conv2d_back_input", data, input_shape.to_vec(), op, vec![self.id, kernel.id])
    }

    /// Kernel-gradient of [`Var::conv2d`]; `self` is the layer input.
    fn conv2d_back_kernel(&self, dy: &Var, pad: usize, kernel_shape: &[usize]) -> Result<Var> {
        let (x, dyv) = (self.value(), dy.value());
        let g = Self::conv_geom(x.shape(), kernel_shape, pad, "conv2d_back_kernel")?;
        if dyv.shape() != [g.n, g.o, g.out_h(), g.out_w()] {
            return Err(mismatch("conv2d_back_kernel", format!("gradient {:?}", dyv.shape())));
        }
        let data = kernels::conv2d_back_kernel(x.data(), dyv.data(), g);
        let op = Op::Conv2dBackKernel { pad };
        self.tape.push_op("conv2d_back_kernel", data, kernel_shape.to_vec(), op, vec![self.id, dy.id])
    }

    /// Non-overlapping max pooling with window and stride `size`.
    pub fn max_pool2d(&self, size: usize) -> Result<Var> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(mismatch("max_pool2d", format!("{s:?} with window {size}")));
        }
        let (table, shape) = kernels::max_pool_table(x.data(), s, size);
        self.gather(Rc::new(table), &shape)
    }

    /// Mean over the two spatial axes of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_avg_pool(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(mismatch("global_avg_pool", format!("{s:?}")));
        }
        self.sum_axes(&[2, 3])?.scale(1.0 / (s[2] * s[3]) as f64)
    }

    fn gather(&self, table: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let x = self.value();
        let data = table.iter().map(|&i| x.data()[i]).collect();
        self.tape.push_op("gather", data, out_shape.to_vec(), Op::Gather(table), vec![self.id])
    }

    fn scatter_add(&self, table: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let x = self.value();
        let mut data = vec![0.0; out_shape.iter().product()];
        for (&dst, &v) in table.iter().zip(x.data()) {
            data[dst] += v;
        }
        self.tape.push_op("scatter_add", data, out_shape.to_vec(), Op::ScatterAdd(table), vec![self.id])
    }
}
