//! A symbolic expression layer that lowers onto a [`Tape`].

use std::collections::HashMap;
use std::rc::Rc;

use super::{AutodiffError, Result, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug)]
enum ExprKind {
    Input(String),
    Parameter(String),
    Constant(Tensor),
    Add(Expr, Expr),
    Mul(Expr, Expr),
    MatMul(Expr, Expr),
    Conv2d { x: Expr, kernel: Expr, pad: usize },
    Relu(Expr),
    MaxPool2d(Expr, usize),
    GlobalAvgPool(Expr),
    LogSoftmax(Expr),
    Square(Expr),
    Sum(Expr),
    MaskMul(Expr, Tensor),
}

/// A node of a differentiable expression tree. Cloning is cheap; shared
/// subexpressions are evaluated once.
#[derive(Debug, Clone)]
pub struct Expr(Rc<ExprKind>);

impl Expr {
    fn wrap(kind: ExprKind) -> Self {
        Self(Rc::new(kind))
    }

    pub fn input(name: &str) -> Self {
        Self::wrap(ExprKind::Input(name.into()))
    }

    pub fn parameter(name: &str) -> Self {
        Self::wrap(ExprKind::Parameter(name.into()))
    }

    pub fn constant(value: Tensor) -> Self {
        Self::wrap(ExprKind::Constant(value))
    }

    pub fn add(&self, other: &Expr) -> Self {
        Self::wrap(ExprKind::Add(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Expr) -> Self {
        Self::wrap(ExprKind::Mul(self.clone(), other.clone()))
    }

    pub fn matmul(&self, other: &Expr) -> Self {
        Self::wrap(ExprKind::MatMul(self.clone(), other.clone()))
    }

    pub fn conv2d(&self, kernel: &Expr, pad: usize) -> Self {
        Self::wrap(ExprKind::Conv2d {
            x: self.clone(),
            kernel: kernel.clone(),
            pad,
        })
    }

    pub fn relu(&self) -> Self {
        Self::wrap(ExprKind::Relu(self.clone()))
    }

    pub fn max_pool2d(&self, size: usize) -> Self {
        Self::wrap(ExprKind::MaxPool2d(self.clone(), size))
    }

    pub fn global_avg_pool(&self) -> Self {
        Self::wrap(ExprKind::GlobalAvgPool(self.clone()))
    }

    pub fn log_softmax(&self) -> Self {
        Self::wrap(ExprKind::LogSoftmax(self.clone()))
    }

    pub fn square(&self) -> Self {
        Self::wrap(ExprKind::Square(self.clone()))
    }

    pub fn sum(&self) -> Self {
        Self::wrap(ExprKind::Sum(self.clone()))
    }

    pub fn mask_mul(&self, mask: Tensor) -> Self {
        Self::wrap(ExprKind::MaskMul(self.clone(), mask))
    }

    /// Records this expression on `tape`, resolving inputs and parameters
    /// from `bindings`. Returns the root variable plus the leaf variable
    /// created for each bound name.
    pub fn lower(&self, tape: &Tape, bindings: &HashMap<String, Tensor>) -> Result<(Var, HashMap<String, Var>)> {
        let mut memo: HashMap<*const ExprKind, Var> = HashMap::new();
        let mut leaves: HashMap<String, Var> = HashMap::new();
        let root = self.lower_rec(tape, bindings, &mut memo, &mut leaves)?;
        Ok((root, leaves))
    }

    fn lower_rec(
        &self,
        tape: &Tape,
        bindings: &HashMap<String, Tensor>,
        memo: &mut HashMap<*const ExprKind, Var>,
        leaves: &mut HashMap<String, Var>,
    ) -> Result<Var> {
        let key = Rc::as_ptr(&self.0);
        if let Some(v) = memo.get(&key) {
            return Ok(v.clone());
        }
        let mut sub = |e: &Expr| e.lower_rec(tape, bindings, memo, leaves);
        let var = match &*self.0 {
            ExprKind::Input(name) | ExprKind::Parameter(name) => {
                if let Some(v) = leaves.get(name) {
                    v.clone()
                } else {
                    let value = bindings
                        .get(name)
                        .cloned()
                        .ok_or_else(|| AutodiffError::UnboundInput(name.clone()))?;
                    let v = match &*self.0 {
                        ExprKind::Input(_) => tape.input(name, value),
                        _ => tape.parameter(name, value),
                    };
                    leaves.insert(name.clone(), v.clone());
                    v
                }
            }
            ExprKind::Constant(t) => tape.constant(t.clone()),
            ExprKind::Add(a, b) => {
                let (a, b) = (sub(a)?, sub(b)?);
                a.add(&b)?
            }
            ExprKind::Mul(a, b) => {
                let (a, b) = (sub(a)?, sub(b)?);
                a.mul(&b)?
            }
            ExprKind::MatMul(a, b) => {
                let (a, b) = (sub(a)?, sub(b)?);
                a.matmul(&b)?
            }
            ExprKind::Conv2d { x, kernel, pad } => {
                let (x, k) = (sub(x)?, sub(kernel)?);
                x.conv2d(&k, *pad)?
            }
            ExprKind::Relu(a) => sub(a)?.relu()?,
            ExprKind::MaxPool2d(a, size) => sub(a)?.max_pool2d(*size)?,
            ExprKind::GlobalAvgPool(a) => sub(a)?.global_avg_pool()?,
            ExprKind::LogSoftmax(a) => sub(a)?.log_softmax()?,
            ExprKind::Square(a) => sub(a)?.square()?,
            ExprKind::Sum(a) => sub(a)?.sum()?,
            ExprKind::MaskMul(a, m) => sub(a)?.mask_mul(m)?,
        };
        memo.insert(key, var.clone());
        Ok(var)
    }
}

/// Forward value of `expr` under `bindings`.
pub fn evaluate(expr: &Expr, bindings: &HashMap<String, Tensor>) -> Result<Tensor> {
    let tape = Tape::new();
    let (root, _) = expr.lower(&tape, bindings)?;
    let value = root.value();
    Ok((*value).clone())
}
