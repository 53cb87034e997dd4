//! Dense row-major tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation that consumes a tensor requiring gradients records its
//! parents and a closure computing the vector-Jacobian product. Calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into the leaf parameters.
//!
//! Broadcasting is deliberately narrow: elementwise ops need equal shapes, and
//! the only broadcast is a row vector added to every row of a matrix.

mod gradcheck;
mod kernels;
mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheck, GradCheckReport, DEFAULT_FLOOR, GRAD_TOL};
pub use ops::AttentionLayout;

/// Element type of every tensor.
#[cfg(not(feature = "f64"))]
pub type Float = f32;
#[cfg(feature = "f64")]
pub type Float = f64;

pub(crate) type BackwardFn =
    Box<dyn Fn(&[Float], &[Float]) -> Vec<Option<Vec<Float>>> + Send + Sync>;

struct History {
    op: &'static str,
    parents: Vec<Tensor>,
    /// `(output data, output grad) -> grad per parent`.
    backward: BackwardFn,
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<Float>>,
    grad: RwLock<Option<Vec<Float>>>,
    requires_grad: bool,
    history: Option<History>,
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on the current thread while alive.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.op_name())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn build(
        data: Vec<Float>,
        shape: Vec<usize>,
        requires_grad: bool,
        history: Option<History>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: RwLock::new(None),
            requires_grad,
            history,
        }))
    }

    /// A constant tensor. Fails when `data` does not fill `shape`.
    pub fn new(data: Vec<Float>, shape: &[usize]) -> Result<Self> {
        check_shape(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// A trainable leaf tensor.
    pub fn param(data: Vec<Float>, shape: &[usize]) -> Result<Self> {
        check_shape(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(vec![0.0; n], shape.to_vec(), false, None)
    }

    pub fn scalar(value: Float) -> Self {
        Self::build(vec![value], vec![1], false, None)
    }

    pub(crate) fn from_op(
        data: Vec<Float>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if track {
            Self::build(
                data,
                shape,
                true,
                Some(History {
                    op,
                    parents,
                    backward,
                }),
            )
        } else {
            Self::build(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// `(rows, cols)` of a rank-2 tensor; rank-1 tensors read as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.0.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap_or(&1);
                (self.numel() / c.max(1), c)
            }
        }
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<Float>> {
        self.0.data.read()
    }

    pub fn to_vec(&self) -> Vec<Float> {
        self.0.data.read().clone()
    }

    /// First element; meant for scalar losses.
    pub fn item(&self) -> Float {
        self.0.data.read()[0]
    }

    pub fn grad(&self) -> Option<Vec<Float>> {
        self.0.grad.read().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.history.is_none()
    }

    pub fn op_name(&self) -> &'static str {
        self.0.history.as_ref().map_or("leaf", |h| h.op)
    }

    pub fn zero_grad(&self) {
        *self.0.grad.write() = None;
    }

    /// Overwrites the data in place. Only meaningful for leaves: any graph
    /// already recorded through this tensor keeps the values it saw.
    pub fn set_data(&self, data: Vec<Float>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Shape {
                op: "set_data",
                lhs: self.0.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        *self.0.data.write() = data;
        Ok(())
    }

    /// Mutates data and gradient together, e.g. for an optimizer step.
    pub fn update<F>(&self, f: F)
    where
        F: FnOnce(&mut [Float], Option<&[Float]>),
    {
        let grad = self.0.grad.read();
        let mut data = self.0.data.write();
        f(&mut data, grad.as_deref());
    }

    /// Scales the stored gradient in place (used by norm clipping).
    pub fn scale_grad(&self, factor: Float) {
        if let Some(g) = self.0.grad.write().as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn same(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// A copy of the current values without history or grad.
    pub fn detach(&self) -> Tensor {
        Self::build(self.to_vec(), self.0.shape.clone(), false, None)
    }

    /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across
    /// calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.0.requires_grad {
            return Err(Error::contract("backward on a tensor with no gradient path"));
        }

        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<Float>> = HashMap::new();
        pending.insert(self.0.id, vec![1.0]);

        for node in order.iter().rev() {
            let Some(gout) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.history {
                None => accumulate_leaf(node, &gout),
                Some(h) => {
                    let grads = {
                        let out = node.0.data.read();
                        (h.backward)(&out, &gout)
                    };
                    debug_assert_eq!(grads.len(), h.parents.len(), "{}", h.op);
                    for (parent, g) in h.parents.iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if !parent.0.requires_grad {
                            continue;
                        }
                        debug_assert_eq!(g.len(), parent.numel(), "{}", h.op);
                        match pending.get_mut(&parent.0.id) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.0.id, g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the gradient-carrying subgraph; each node once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(h) = &node.0.history {
                for p in &h.parents {
                    if p.0.requires_grad && !visited.contains(&p.0.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn accumulate_leaf(node: &Tensor, g: &[Float]) {
    let mut slot = node.0.grad.write();
    match slot.as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn check_shape(data: &[Float], shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::contract(format!(
            "shape {shape:?} must be non-empty with positive dimensions"
        )));
    }
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape {
            op: "tensor",
            lhs: shape.to_vec(),
            rhs: vec![data.len()],
        });
    }
    Ok(())
}
