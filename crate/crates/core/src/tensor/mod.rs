//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major, refcounted handles. Ops that see at least one
//! tracked input record a backward closure; `backward` walks the tape in
//! reverse topological order and accumulates gradients into leaf tensors
//! created with `requires_grad`. A process-wide checked mode scans every op
//! output for NaN/Inf so numeric blowups surface at the op that produced
//! them instead of three modules later.

mod adam;
mod autograd;
mod checkpoint;
mod linalg;
mod nn;
mod ops;
mod rearrange;
mod rng;
#[cfg(test)]
mod tests;

pub use adam::Adam;
pub use autograd::{backward, checked_enabled, no_grad, set_checked, NoGradGuard};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use linalg::matmul_slices;
pub use nn::time_embedding;
pub use rearrange::RearrangeMode;
pub use rng::Rng;

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradients for the parents of a node, aligned with the parent list.
/// `None` marks a parent that does not need a gradient.
pub(crate) type ParentGrads = Vec<Option<Vec<f32>>>;

pub(crate) struct Node {
    pub parents: Vec<Tensor>,
    /// (parents, output data, grad wrt output) -> grads wrt parents
    pub backward: Box<dyn Fn(&[Tensor], &[f32], &[f32]) -> Result<ParentGrads>>,
}

pub(crate) struct TensorInner {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: RefCell<Vec<f32>>,
    pub grad: RefCell<Option<Vec<f32>>>,
    pub requires_grad: bool,
    pub node: Option<Node>,
    pub spent: Cell<bool>,
}

/// Refcounted handle to an n-dimensional f32 array.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let data = self.inner.data.borrow();
        let preview: Vec<f32> = data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..8]={:?})",
            self.inner.shape, self.inner.requires_grad, preview
        )
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node,
                spent: Cell::new(false),
            }),
        }
    }

    /// Constant (untracked) tensor from raw data.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "new",
                format!("shape {:?} expects {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that participates in gradient accumulation.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "param",
                format!("shape {:?} expects {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; numel], false, None)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![1.0; numel], false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; numel], false, None)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::from_parts(vec![1], vec![value], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when a backward pass would reach this tensor.
    pub(crate) fn tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() requires a single-element tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the data buffer in place (used by the optimizer and loaders).
    pub fn set_data(&self, data: &[f32]) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("expected {} elements, got {}", self.numel(), data.len()),
            ));
        }
        self.inner.data.borrow_mut().copy_from_slice(data);
        Ok(())
    }

    /// Untracked copy of this tensor's current values.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// Checks every element is finite; the checked-mode scan.
    pub fn assert_finite(&self, op: &'static str) -> Result<()> {
        let data = self.inner.data.borrow();
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "{op} produced non-finite value {v} at flat index {i} (shape {:?})",
                    self.shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("lhs {:?} vs rhs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }
}

/// Builds an op result: applies the checked-mode scan and records the
/// backward closure when any parent is tracked and grad mode is on.
pub(crate) fn op_result(
    op: &'static str,
    shape: Vec<usize>,
    data: Vec<f32>,
    parents: Vec<Tensor>,
    backward: impl Fn(&[Tensor], &[f32], &[f32]) -> Result<ParentGrads> + 'static,
) -> Result<Tensor> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    if checked_enabled() {
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "{op} produced non-finite value {v} at flat index {i} (shape {:?})",
                    shape
                )));
            }
        }
    }
    let tracked = autograd::grad_enabled() && parents.iter().any(|p| p.tracked());
    let node = if tracked {
        Some(Node { parents, backward: Box::new(backward) })
    } else {
        None
    };
    Ok(Tensor::from_parts(shape, data, false, node))
}
