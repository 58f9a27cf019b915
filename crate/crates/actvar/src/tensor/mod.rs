//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable operation records its inputs and a backward rule on
//! the node it produces; `Tensor::backward` replays the recorded graph in
//! reverse creation order (which is a reverse topological order, since inputs
//! are always created before outputs) and accumulates gradients into every
//! `requires_grad` leaf. Single-threaded by design; all state is `Rc`-shared.

mod checkpoint;
pub mod gradcheck;
mod ops;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry};
pub use ops::*;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static STRICT_FINITE: Cell<bool> = const { Cell::new(false) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// When enabled, every tensor created on this thread is checked for NaN/Inf
/// and construction panics with a diagnostic. Off by default.
pub fn set_strict_finite(on: bool) {
    STRICT_FINITE.with(|c| c.set(on));
}

fn strict_finite() -> bool {
    STRICT_FINITE.with(|c| c.get())
}

/// Run `f` without recording any graph edges: every op output becomes a
/// constant leaf. Keeps teacher forwards, evaluation, and generation free of
/// autodiff bookkeeping.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = NO_GRAD.with(|c| c.replace(true));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let _guard = Restore(prev);
    f()
}

fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

/// Backward rule: receives the upstream gradient for this node and the node
/// itself (for its forward value and parent list), and accumulates gradients
/// into the parents.
type BackwardFn = Box<dyn Fn(&[f64], &Inner)>;

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    backward_done: Cell<bool>,
}

/// Cheap handle to a graph node. Cloning shares the underlying storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id,
            self.inner.shape,
            self.inner.requires_grad
        )
    }
}

pub(crate) fn check_finite(data: &[f64], what: &str) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{what}[{i}] = {v}")));
        }
    }
    Ok(())
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if strict_finite() {
            check_finite(&data, "tensor").expect("strict finite mode");
        }
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
                backward_done: Cell::new(false),
            }),
        }
    }

    /// Leaf tensor that does not participate in gradients.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} data values",
            data.len()
        );
        Tensor::build(shape, data, false, Vec::new(), None)
    }

    /// Leaf tensor that accumulates a gradient (a trainable parameter).
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::build(shape, data, true, Vec::new(), None)
    }

    /// Like [`Tensor::constant`] but rejects NaN/Inf input.
    pub fn checked(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} does not match {} data values",
                data.len()
            )));
        }
        check_finite(&data, "tensor")?;
        Ok(Tensor::constant(shape, data))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::constant(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![], vec![v])
    }

    /// Internal constructor for op outputs. Drops the graph edges when no
    /// parent needs gradients, so no-grad forward passes stay graph-free.
    pub(crate) fn op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &Inner) + 'static,
    ) -> Tensor {
        let requires = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires {
            Tensor::build(shape, data, true, parents, Some(Box::new(backward)))
        } else {
            Tensor::build(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    /// Number of rows / columns of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.inner.shape[1]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.backward.is_none()
    }

    /// Copy of the forward value.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Read access to the forward buffer.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place update of a leaf's value (optimizer steps, parameter loads).
    /// Panics on non-leaf nodes: op outputs are immutable once written.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        assert!(
            self.is_leaf(),
            "update_data is only valid on leaf tensors"
        );
        f(&mut self.inner.data.borrow_mut());
    }

    /// Detached copy: same value, no graph history, no gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.shape.clone(), self.to_vec())
    }

    pub fn validate_finite(&self, what: &str) -> Result<()> {
        check_finite(&self.inner.data.borrow(), what)
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// `requires_grad` leaf reachable from `self`. A node's graph is consumed
    /// by the sweep: calling backward a second time on the same loss is an
    /// error (build a fresh forward pass instead).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.inner.shape
            )));
        }
        if self.inner.backward_done.get() {
            return Err(Error::State(
                "backward already ran for this loss; rebuild the graph before calling again"
                    .into(),
            ));
        }
        self.inner.backward_done.set(true);

        // Reverse creation order is a reverse topological order.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.inner.requires_grad || !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| std::cmp::Reverse(t.inner.id));

        self.accumulate_grad(&[1.0]);
        for node in &nodes {
            if let Some(rule) = &node.inner.backward {
                let grad = node.inner.grad.borrow().clone();
                if let Some(g) = grad {
                    rule(&g, &node.inner);
                }
            }
        }
        Ok(())
    }
}

impl Inner {
    pub(crate) fn parents(&self) -> &[Tensor] {
        &self.parents
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.data.borrow())
    }
}
