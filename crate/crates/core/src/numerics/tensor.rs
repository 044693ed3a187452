use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter {name:?} has no gradient")]
    MissingGrad { name: String },
    #[error("{op}: index {index} out of range ({bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("function is not deterministic: repeated evaluations differ ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },
}

/// Backward closure: given the gradient flowing into this node, push
/// contributions into the parents (captured inside the closure).
pub(crate) type BackFn = Box<dyn Fn(&[f64])>;

pub(crate) struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    back: Option<BackFn>,
}

/// Dense n-dimensional array, row-major, with an optional gradient.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<(), TensorError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor, TensorError> {
        Self::build(shape, values, false)
    }

    /// Leaf tensor that participates in autodiff.
    pub fn leaf(shape: &[usize], values: Vec<f64>) -> Result<Tensor, TensorError> {
        Self::build(shape, values, true)
    }

    fn build(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape: shape.to_vec(),
                reason: "zero-sized axis".into(),
            });
        }
        if numel(shape) != values.len() {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape: shape.to_vec(),
                reason: format!("shape product {} != value count {}", numel(shape), values.len()),
            });
        }
        check_finite("new", &values)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape: shape.to_vec(),
                data: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                back: None,
            }),
        })
    }

    pub fn scalar(v: f64) -> Result<Tensor, TensorError> {
        Tensor::new(&[1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor, TensorError> {
        Tensor::new(shape, vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Tensor, TensorError> {
        Tensor::new(shape, vec![v; numel(shape)])
    }

    /// Internal constructor for op outputs. Validates finiteness so NaN/Inf
    /// are rejected at op boundaries rather than surfacing later as garbage.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        back: BackFn,
    ) -> Result<Tensor, TensorError> {
        check_finite(op, &values)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                parents: if requires_grad { parents } else { Vec::new() },
                back: if requires_grad { Some(back) } else { None },
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        false // zero-sized axes are rejected at construction
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the stored values in place. Only meaningful for leaves
    /// (optimizer updates, finite-difference probes); graphs built from the
    /// old values are stale afterwards.
    pub fn set_values(&self, values: &[f64]) -> Result<(), TensorError> {
        if values.len() != self.len() {
            return Err(TensorError::InvalidShape {
                op: "set_values",
                shape: self.inner.shape.clone(),
                reason: format!("value count {} != {}", values.len(), self.len()),
            });
        }
        check_finite("set_values", values)?;
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn nudge(&self, index: usize, delta: f64) {
        self.inner.data.borrow_mut()[index] += delta;
    }

    /// Drop the autodiff history: same values, constant from here on.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape: self.inner.shape.clone(),
                data: RefCell::new(self.to_vec()),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                back: None,
            }),
        }
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Every `requires_grad` tensor
    /// reachable from `self` ends up holding dLoss/dTensor, with gradients
    /// accumulated (+=) where a tensor is used more than once.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.inner.shape.clone(),
            });
        }
        // Post-order DFS gives a topological order of the graph.
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(Rc::as_ptr(&self.inner));
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                let next = node.inner.parents[child].clone();
                stack.push((node, child + 1));
                if next.requires_grad() && seen.insert(Rc::as_ptr(&next.inner)) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(back) = &node.inner.back {
                let grad = node
                    .inner
                    .grad
                    .borrow()
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.len()]);
                back(&grad);
            }
        }
        Ok(())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
