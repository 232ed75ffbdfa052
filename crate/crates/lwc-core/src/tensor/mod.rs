//! Minimal reverse-mode autodiff engine over dense NCHW tensors.
//!
//! Design notes:
//! - A [`Tensor`] is a cheap `Arc` handle onto an immutable graph node. Data
//!   lives behind an `RwLock` so parameters can be updated in place by the
//!   optimizer and checkpoint loader without rebuilding graphs.
//! - Graph edges are only recorded when an input requires gradients, so
//!   inference over constant parameters never retains a graph.
//! - The engine is generic over [`Real`]; production runs `f32`, gradient
//!   checks run the same graph code in `f64`.

pub mod adam;
pub mod conv;
mod op;
mod real;
mod shape;

pub use adam::Adam;
pub use op::Parity;
pub use real::Real;
pub use shape::Shape;

use op::OpKind;
use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Suspends graph recording on this thread until the guard drops. Ops still
/// compute values, but results are plain constants: no history is retained
/// and [`Tensor::backward`] cannot reach through them. Encode, decode, and
/// evaluation paths use this; training must not.
pub fn no_grad() -> NoGrad {
    GRAD_ENABLED.with(|c| {
        let prev = c.get();
        c.set(false);
        NoGrad { prev }
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Guard returned by [`no_grad`]; restores the previous mode on drop.
pub struct NoGrad {
    prev: bool,
}

impl Drop for NoGrad {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub(crate) struct Inner<R: Real> {
    id: u64,
    shape: Shape,
    requires_grad: bool,
    data: RwLock<Vec<R>>,
    grad: RwLock<Option<Vec<R>>>,
    inputs: Vec<Tensor<R>>,
    op: OpKind<R>,
}

/// Handle to one node of the computation graph.
pub struct Tensor<R: Real> {
    inner: Arc<Inner<R>>,
}

impl<R: Real> Clone for Tensor<R> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<R: Real> Tensor<R> {
    fn make(shape: Shape, data: Vec<R>, inputs: Vec<Tensor<R>>, op: OpKind<R>, requires_grad: bool) -> Self {
        assert_eq!(
            shape.numel(),
            data.len(),
            "tensor data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                requires_grad,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                inputs,
                op,
            }),
        }
    }

    /// Non-trainable node with no history.
    pub fn constant(shape: Shape, data: Vec<R>) -> Self {
        Tensor::make(shape, data, Vec::new(), OpKind::Leaf, false)
    }

    /// Trainable leaf; gradients accumulate into it during [`Tensor::backward`].
    pub fn param(shape: Shape, data: Vec<R>) -> Self {
        Tensor::make(shape, data, Vec::new(), OpKind::Leaf, true)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::constant(shape, vec![R::ZERO; shape.numel()])
    }

    pub fn zeros_param(shape: Shape) -> Self {
        Tensor::param(shape, vec![R::ZERO; shape.numel()])
    }

    pub fn full(shape: Shape, v: R) -> Self {
        Tensor::constant(shape, vec![v; shape.numel()])
    }

    pub fn full_param(shape: Shape, v: R) -> Self {
        Tensor::param(shape, vec![v; shape.numel()])
    }

    pub fn scalar(v: R) -> Self {
        Tensor::constant(Shape::scalar(), vec![v])
    }

    /// Graph-internal constructor: drops the history when no input needs
    /// gradients, or when a [`no_grad`] guard is active, so inference never
    /// retains intermediate buffers.
    pub(crate) fn from_op(shape: Shape, data: Vec<R>, inputs: Vec<Tensor<R>>, op: OpKind<R>) -> Self {
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.inner.requires_grad);
        if requires_grad {
            Tensor::make(shape, data, inputs, op, true)
        } else {
            Tensor::make(shape, data, Vec::new(), OpKind::Leaf, false)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<R>> {
        self.inner.data.read().unwrap()
    }

    pub fn copy_data(&self) -> Vec<R> {
        self.data().clone()
    }

    /// Replaces the stored values. Meant for leaves (optimizer steps,
    /// checkpoint loads); graph nodes derived from old values are not updated.
    pub fn set_data(&self, v: Vec<R>) {
        assert_eq!(v.len(), self.shape().numel(), "set_data length mismatch");
        *self.inner.data.write().unwrap() = v;
    }

    pub fn data_at(&self, i: usize) -> R {
        self.data()[i]
    }

    pub fn set_data_at(&self, i: usize, v: R) {
        self.inner.data.write().unwrap()[i] = v;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> R {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor {}", self.shape());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<R>> {
        self.inner.grad.read().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.write().unwrap() = None;
    }

    /// Copy of the values with no graph history.
    pub fn detach(&self) -> Tensor<R> {
        Tensor::constant(self.shape(), self.copy_data())
    }

    /// Same values in another precision, preserving leaf trainability.
    pub fn cast<S: Real>(&self) -> Tensor<S> {
        let data = self.data().iter().map(|v| S::from_f64(v.to_f64())).collect();
        if self.inner.requires_grad {
            Tensor::param(self.shape(), data)
        } else {
            Tensor::constant(self.shape(), data)
        }
    }

    /// Reverse-mode sweep from a scalar node. Gradients accumulate into every
    /// trainable leaf reachable from it; call [`Tensor::zero_grad`] (or the
    /// optimizer) between steps.
    pub fn backward(&self) {
        assert_eq!(self.shape().numel(), 1, "backward requires a scalar, got {}", self.shape());

        // Iterative post-order DFS; graphs from unrolled fixed-point loops
        // can be thousands of nodes deep.
        let mut topo: Vec<Tensor<R>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<R>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                topo.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            let node = t.clone();
            stack.push((t, true));
            for inp in &node.inner.inputs {
                if inp.inner.requires_grad && !visited.contains(&inp.id()) {
                    stack.push((inp.clone(), false));
                }
            }
        }

        let mut grads: HashMap<u64, Vec<R>> = HashMap::new();
        grads.insert(self.id(), vec![R::ONE]);
        for t in topo.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            if matches!(t.inner.op, OpKind::Leaf) {
                if t.inner.requires_grad {
                    let mut slot = t.inner.grad.write().unwrap();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += *b;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
                continue;
            }
            op::backward(t, &g, &mut grads);
        }
    }
}

// Dropping the last handle to a long op chain must not recurse through every
// node. Steal each node's input list and walk it with an explicit worklist.
impl<R: Real> Drop for Inner<R> {
    fn drop(&mut self) {
        if self.inputs.is_empty() {
            return;
        }
        let mut pending = std::mem::take(&mut self.inputs);
        while let Some(t) = pending.pop() {
            if let Some(mut inner) = Arc::into_inner(t.inner) {
                pending.append(&mut std::mem::take(&mut inner.inputs));
            }
        }
    }
}

impl<R: Real> std::fmt::Debug for Tensor<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
