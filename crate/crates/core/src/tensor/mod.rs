//! A small reverse-mode automatic differentiation engine over f64 tensors.
//!
//! Tensors are reference-counted graph nodes. Every operation records its
//! parents and a backward closure; calling [`Tensor::backward`] on a scalar
//! walks the graph in reverse topological order and accumulates gradients
//! into each participating node. All arithmetic is plain f64 with fixed
//! summation order, so results are bitwise reproducible across runs and
//! across the sequential/parallel kernel builds.
//!
//! Any operation that produces a NaN or infinity surfaces
//! [`TensorError::NonFinite`] naming the offending op instead of poisoning
//! downstream values silently.

pub mod kernels;
mod ops;

use crate::mem::Buf;
use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },
    #[error("shape mismatch in op `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument to op `{op}`: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("index {index} out of bounds for axis of size {size} in op `{op}`")]
    IndexOutOfBounds { op: &'static str, index: usize, size: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarBackward { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Consumes the upstream gradient of a node and yields one optional gradient
/// per parent (None for parents that receive no gradient, e.g. the frozen
/// side of a divergence).
type BackwardFn = Box<dyn Fn(&[f64]) -> Result<Vec<Option<Vec<f64>>>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph recording for the current thread until dropped. Forward
/// passes made under the guard allocate no backward closures, which is what
/// evaluation and frozen-teacher inference use.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|c| c.set(prev));
    }
}

struct Inner {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    data: RefCell<Buf>,
    grad: RefCell<Option<Buf>>,
    /// True for trainable leaves and for any node derived from one while
    /// grad recording was enabled. A cell so leaves can be frozen and
    /// unfrozen between steps.
    requires_grad: Cell<bool>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A shared handle to one node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.0.op)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad.get())
            .finish()
    }
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for &v in data {
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
    }
    Ok(())
}

impl Tensor {
    /// A non-trainable leaf.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::leaf("from_vec", shape, data, false)
    }

    /// A trainable leaf that accumulates gradients.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::leaf("param", shape, data, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::leaf("zeros", shape, vec![0.0; n], false).expect("zeros are finite")
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::leaf("scalar", vec![], vec![v], false)
    }

    fn leaf(op: &'static str, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            });
        }
        ensure_finite(op, &data)?;
        Ok(Tensor(Rc::new(Inner {
            id: next_id(),
            op,
            shape,
            data: RefCell::new(Buf::from_vec(data)),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Builds a derived node. Recording is skipped when no parent tracks
    /// gradients or when a [`no_grad`] guard is active.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Self> {
        ensure_finite(op, &data)?;
        let tracked = grad_enabled() && parents.iter().any(|p| p.0.requires_grad.get());
        let (parents, backward) = if tracked {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor(Rc::new(Inner {
            id: next_id(),
            op,
            shape,
            data: RefCell::new(Buf::from_vec(data)),
            grad: RefCell::new(None),
            requires_grad: Cell::new(tracked),
            parents,
            backward,
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn op(&self) -> &'static str {
        self.0.op
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Flips whether this leaf accumulates gradients. Meant for freezing and
    /// unfreezing parameters between training phases.
    pub fn set_requires_grad(&self, value: bool) {
        self.0.requires_grad.set(value);
    }

    /// Borrows the raw values.
    pub fn data(&self) -> Ref<'_, Buf> {
        self.0.data.borrow()
    }

    /// Mutably borrows the raw values (used by optimizers for in-place
    /// updates between steps; never while a graph referencing this node is
    /// being evaluated).
    pub fn data_mut(&self) -> RefMut<'_, Buf> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().to_vec()
    }

    /// Extracts the single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: self.0.shape.clone(),
            });
        }
        Ok(self.0.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().as_ref().map(|g| g.to_vec())
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A leaf copy of this tensor that is cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor(Rc::new(Inner {
            id: next_id(),
            op: "detach",
            shape: self.0.shape.clone(),
            data: RefCell::new(self.0.data.borrow().clone()),
            grad: RefCell::new(None),
            requires_grad: Cell::new(false),
            parents: Vec::new(),
            backward: None,
        }))
    }

    fn accumulate_grad(&self, g: &[f64]) -> Result<()> {
        ensure_finite(self.0.op, g)?;
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(cur) => {
                for (c, &v) in cur.iter_mut().zip(g) {
                    *c += v;
                }
            }
            None => *slot = Some(Buf::from_vec(g.to_vec())),
        }
        Ok(())
    }

    /// Reverse-mode differentiation from a scalar loss. Gradients accumulate
    /// into every tracked ancestor; call [`Tensor::zero_grad`] on parameters
    /// between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: self.0.shape.clone(),
            });
        }
        let order = topo_order(self);
        self.accumulate_grad(&[1.0])?;
        for node in order.iter().rev() {
            let Some(bw) = node.0.backward.as_ref() else {
                continue;
            };
            let parent_grads = {
                let grad_ref = node.0.grad.borrow();
                let Some(g) = grad_ref.as_ref() else {
                    continue;
                };
                bw(g)?
            };
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.0.requires_grad.get() {
                        parent.accumulate_grad(&pg)?;
                    }
                }
            }
            // Intermediate gradients are only needed once.
            if !node.0.parents.is_empty() && !Rc::ptr_eq(&node.0, &self.0) {
                *node.0.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }
}

/// Post-order over the tracked subgraph: every node appears after all of its
/// parents, so the reversed list visits consumers before producers.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    // (node, parents_pushed)
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.0.id) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in &node.0.parents {
            if !seen.contains(&p.0.id) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}
