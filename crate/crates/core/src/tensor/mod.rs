//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation that touches at least one gradient-tracking input records
//! its inputs on the output node. [`Tensor::backward`] walks that graph in
//! reverse topological order and accumulates gradients into every
//! `requires_grad` ancestor. Leaf gradients accumulate across calls until
//! [`Tensor::zero_grad`] is invoked.

mod backward;
mod ops;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::scalar::Scalar;

pub use ops::STD_EPS;

/// Maximum supported tensor rank.
pub const MAX_RANK: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

impl TensorError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Recorded operation that produced a node, holding handles to its inputs and
/// whatever forward-pass state the gradient needs.
pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul(Tensor<T>, Tensor<T>),
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    AddRow(Tensor<T>, Tensor<T>),
    MulRow(Tensor<T>, Tensor<T>),
    MulScalarTensor(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    AddScalar(Tensor<T>),
    Transpose(Tensor<T>),
    ConcatCols(Tensor<T>, Tensor<T>),
    SliceCols(Tensor<T>, usize),
    GatherRows(Tensor<T>, Vec<usize>),
    Pick(Tensor<T>, Vec<usize>),
    Log(Tensor<T>),
    Exp(Tensor<T>),
    Sigmoid(Tensor<T>),
    Tanh(Tensor<T>),
    Gelu(Tensor<T>),
    LeakyRelu(Tensor<T>, T),
    Abs(Tensor<T>),
    Clamp(Tensor<T>, T, T),
    Sum(Tensor<T>),
    Mean(Tensor<T>),
    SumRows(Tensor<T>),
    Softmax(Tensor<T>),
    LogSoftmax(Tensor<T>),
    StdNorm {
        input: Tensor<T>,
        mean: Vec<T>,
        std: Vec<T>,
        divisor: Vec<T>,
    },
    LayerNorm(Tensor<T>, Vec<T>),
    L2Norm(Tensor<T>, Vec<T>),
}

pub(crate) struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Shared handle to a node of the differentiation graph.
///
/// Cloning is cheap and aliases the same node, so a parameter tensor held by
/// a model and the copy referenced from a loss graph see the same gradient.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &*self.0.data.borrow())
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(TensorError::contract(
            "new",
            format!("rank must be 1..={MAX_RANK}, got shape {shape:?}"),
        ));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::contract(
            "new",
            format!("dimensions must be positive, got {shape:?}"),
        ));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(TensorError::contract(
            "new",
            format!("shape {shape:?} needs {numel} elements, got {len}"),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(data, shape.to_vec(), false, Op::Leaf))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::from_parts(data, shape.to_vec(), true, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(vec![T::zero(); n], shape)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![v], vec![1], false, Op::Leaf)
    }

    /// Builds a 2-D constant from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(TensorError::contract("from_rows", "ragged rows"));
        }
        Self::new(rows.concat(), &[m, n])
    }

    pub(crate) fn from_parts(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(TensorError::contract(
                "dims2",
                format!("expected a 2-D tensor, got shape {other:?}"),
            )),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> Vec<T> {
        let n = *self.0.shape.last().unwrap_or(&1);
        self.0.data.borrow()[i * n..(i + 1) * n].to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.0.data.borrow();
        debug_assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the values of a leaf in place (optimizer updates, test
    /// perturbations). Shape is preserved.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Constant copy of the current values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.to_vec(), self.0.shape.clone(), false, Op::Leaf)
    }

    /// Whether two handles alias the same node.
    pub fn same_node(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn node(&self) -> &Node<T> {
        &self.0
    }

    pub(crate) fn node_key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

impl<T: Scalar> Node<T> {
    pub(crate) fn accumulate(&self, contribution: &[T]) {
        if !self.requires_grad {
            return;
        }
        let mut g = self.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, &b) in buf.iter_mut().zip(contribution) {
                    *a = *a + b;
                }
            }
            None => *g = Some(contribution.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests;
