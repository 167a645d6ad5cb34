//! Minimal reverse-mode autodiff over 2-D arrays, generic over f32/f64.
//!
//! Activations for a whole batch live in one matrix: a stage with T tokens of
//! width D per sample is stored as (B*T, D) with sample b occupying rows
//! b*T .. (b+1)*T. Ops are fused at the level a transformer needs (linear,
//! multi-head attention, layernorm, conv) so graphs stay small and matmuls
//! stay large.

mod ops;
mod param;

pub use ops::*;
pub use param::{
    gather_grads, init_ones, init_trunc_normal, init_zeros, AdamW, Param, ParamGroup, ParamStore,
};

use ndarray::Array2;
use std::cell::{Cell, RefCell};
use std::rc::Rc;

/// Element type of the network: f32 for training throughput, f64 for
/// finite-difference oracles.
pub trait Scalar:
    ndarray::LinalgScalar
    + PartialOrd
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn<F> = Box<dyn Fn(&Array2<F>, &[Tensor<F>])>;

pub struct Node<F: Scalar> {
    id: usize,
    value: Array2<F>,
    grad: RefCell<Option<Array2<F>>>,
    parents: Vec<Tensor<F>>,
    backward: Option<BackwardFn<F>>,
    needs_grad: bool,
    /// Set on leaves created from a parameter store; identifies the slot to
    /// gather gradients into after the backward pass.
    param_slot: Option<usize>,
}

/// A node in the computation graph. Cloning is cheap (shared reference).
#[derive(Clone)]
pub struct Tensor<F: Scalar>(pub(crate) Rc<Node<F>>);

impl<F: Scalar> Tensor<F> {
    /// A value that does not require gradients.
    pub fn constant(value: Array2<F>) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            needs_grad: false,
            param_slot: None,
        }))
    }

    /// A trainable leaf tied to a parameter-store slot.
    pub fn leaf(value: Array2<F>, param_slot: usize) -> Self {
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            needs_grad: true,
            param_slot: Some(param_slot),
        }))
    }

    pub(crate) fn from_op(
        value: Array2<F>,
        parents: Vec<Tensor<F>>,
        backward: BackwardFn<F>,
    ) -> Self {
        let needs_grad = parents.iter().any(|p| p.0.needs_grad);
        Tensor(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            parents,
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
            param_slot: None,
        }))
    }

    pub fn value(&self) -> &Array2<F> {
        &self.0.value
    }

    pub fn shape(&self) -> (usize, usize) {
        let s = self.0.value.dim();
        (s.0, s.1)
    }

    pub fn param_slot(&self) -> Option<usize> {
        self.0.param_slot
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Array2<F>> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn accumulate_grad(&self, g: &Array2<F>) {
        if !self.0.needs_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc = &*acc + g,
            None => *slot = Some(g.clone()),
        }
    }
}

/// Reverse-mode pass from a scalar (1x1) loss. Gradients accumulate on every
/// reachable node that requires them; read them back with `Tensor::grad`.
pub fn backward<F: Scalar>(loss: &Tensor<F>) {
    assert_eq!(loss.shape(), (1, 1), "backward requires a scalar loss");
    // Collect the reachable subgraph. Ids increase in construction order, so
    // descending id order is a valid reverse topological order.
    let mut stack = vec![loss.clone()];
    let mut seen = std::collections::HashSet::new();
    let mut nodes: Vec<Tensor<F>> = Vec::new();
    while let Some(t) = stack.pop() {
        if !t.0.needs_grad || !seen.insert(t.0.id) {
            continue;
        }
        for p in &t.0.parents {
            stack.push(p.clone());
        }
        nodes.push(t);
    }
    nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

    *loss.0.grad.borrow_mut() = Some(Array2::from_elem((1, 1), F::ONE));
    for node in &nodes {
        let grad = node.0.grad.borrow().clone();
        if let (Some(g), Some(f)) = (grad, node.0.backward.as_ref()) {
            f(&g, &node.0.parents);
        }
    }
}
