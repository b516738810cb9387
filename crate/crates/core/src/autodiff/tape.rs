use std::collections::BTreeMap;

use super::array::Array;
use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive whose forward pass is computed by its constructor and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient contributions for each input, in input order.
    fn backward(&self, inputs: &[&Array<T>], output: &Array<T>, grad: &Array<T>) -> Result<Vec<Option<Array<T>>>>;

    fn differentiable(&self) -> bool {
        true
    }
}

pub(crate) enum Op<T: Scalar> {
    Input,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Embedding { table: Var, ids: Vec<usize> },
    Mean(Var, usize),
    Sum(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Argmax(Var),
    Custom(Box<dyn CustomOp<T>>, Vec<Var>),
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Matmul { .. } => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Argmax(..) => "argmax",
            Op::Custom(op, _) => op.name(),
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::AddScalar(a, b)
            | Op::MulScalar(a, b)
            | Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Sqrt(x)
            | Op::Square(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Permute(x, _)
            | Op::Reshape(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::Mean(x, _)
            | Op::Sum(x)
            | Op::Slice { x, .. }
            | Op::Argmax(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat(xs, _) => xs.clone(),
            Op::Custom(_, xs) => xs.clone(),
        }
    }

    pub(crate) fn differentiable(&self) -> bool {
        match self {
            Op::Argmax(_) => false,
            Op::Custom(op, _) => op.differentiable(),
            _ => true,
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub value: Array<T>,
    pub op: Op<T>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the graph.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Array<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn constant_scalar(&mut self, value: T) -> Var {
        self.input(Array::scalar(value))
    }

    /// Trainable leaf; repeated requests for the same name share one node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?
            .clone();
        let v = self.push(value, Op::Param(name.to_string()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn label(&self, v: Var) -> String {
        match &self.nodes[v.0].op {
            Op::Param(name) => format!("param:{name}#{}", v.0),
            op => format!("{}#{}", op.name(), v.0),
        }
    }

    /// Node labels (`op#index`) of non-differentiable operations that the
    /// loss depends on.
    pub fn nondifferentiable_nodes(&self, loss: Var) -> Vec<String> {
        let reach = self.reachable(loss);
        (0..=loss.0)
            .filter(|&i| reach[i] && !self.nodes[i].op.differentiable())
            .map(|i| self.label(Var(i)))
            .collect()
    }

    fn reachable(&self, loss: Var) -> Vec<bool> {
        let mut reach = vec![false; loss.0 + 1];
        reach[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if reach[i] {
                for v in self.nodes[i].op.inputs() {
                    reach[v.0] = true;
                }
            }
        }
        reach
    }

    /// Reverse sweep from a scalar loss; returns d(loss)/d(node) for every
    /// node that receives a gradient.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Array<T>>>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g)?;
            for (input, contribution) in self.nodes[i].op.inputs().into_iter().zip(contributions) {
                if let Some(c) = contribution {
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// One gradient per parameter in `store`, zero for parameters the loss
    /// does not touch.
    pub fn gradients(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let mut grads = self.backward(loss)?;
        let mut out = Gradients::zeros_like(store);
        for (name, v) in &self.params {
            if v.0 < grads.len() {
                if let Some(g) = grads[v.0].take() {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}
