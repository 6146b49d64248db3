//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a node in an implicit tape: ops allocate a fresh node
//! holding the result, references to its parents and a backward closure.
//! `backward()` on a scalar walks reachable nodes in reverse creation order,
//! so each node's closure runs exactly once and gradient accumulation has a
//! fixed, reproducible order. Tensors recorded on the tape are never mutated
//! in place; only leaf data (parameters, running statistics) may be rewritten
//! between passes.

mod gradcheck;
mod linalg;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::*;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

fn next_id() -> u64 {
    use std::cell::Cell;
    thread_local! {
        static COUNTER: Cell<u64> = const { Cell::new(0) };
    }
    COUNTER.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to one tape node. Cloning is cheap and aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, grad={})",
            self.inner.id,
            self.inner.shape,
            self.inner.requires_grad
        )
    }
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Constant leaf (not differentiated).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} expects {} values, got {}",
            shape,
            shape.iter().product::<usize>(),
            data.len()
        );
        Tensor::new_node(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::new_node(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(shape, vec![value; shape.iter().product()])
    }

    /// Interior node produced by an op. `backward` receives the upstream
    /// gradient (same shape as this tensor) and must accumulate into the
    /// parents it captured. Exposed so composite ops (losses, pooling) can
    /// be built outside this module.
    pub fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Tensor::new_node(shape, data, true, parents, Some(backward))
        } else {
            Tensor::new_node(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// True when both handles point at the same tape node.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Copy of the values with no tape history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.inner.shape, self.to_vec())
    }

    /// Rewrite leaf data in place. Panics on interior nodes: tensors recorded
    /// on a tape must stay immutable so backward sees the forward values.
    pub fn set_data(&self, f: impl FnOnce(&mut [f64])) {
        assert!(
            self.inner.backward.is_none(),
            "set_data on a non-leaf tensor"
        );
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar. Seeds d(self)/d(self) = 1 and runs
    /// every reachable node's backward closure once, newest node first.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar loss");
        if !self.inner.requires_grad {
            return;
        }

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
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        *self.inner.grad.borrow_mut() = Some(vec![1.0]);
        for node in &nodes {
            if let Some(backward) = &node.inner.backward {
                let grad_ref = node.inner.grad.borrow();
                if let Some(g) = grad_ref.as_ref() {
                    backward(g);
                }
            }
        }
    }
}

/// Learnable tensor plus its weight-decay eligibility.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub weight_decay: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, weight_decay: bool) -> Parameter {
        assert!(value.requires_grad(), "parameters must require grad");
        Parameter {
            name: name.into(),
            value,
            weight_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_holds_shape_and_data() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    #[should_panic]
    fn shape_data_mismatch_panics() {
        let _ = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_accumulates_on_shared_input() {
        // y = x + x, dy/dx = 2
        let x = Tensor::leaf(&[2], vec![1.0, 2.0]);
        let y = add(&x, &x).unwrap();
        let s = sum_all(&y);
        s.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn diamond_graph_backward_runs_each_node_once() {
        // z = (x + x) + (x + x); dz/dx = 4
        let x = Tensor::leaf(&[1], vec![3.0]);
        let a = add(&x, &x).unwrap();
        let b = add(&x, &x).unwrap();
        let z = add(&a, &b).unwrap();
        sum_all(&z).backward();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn constant_inputs_record_no_history() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]);
        let c = add(&a, &b).unwrap();
        assert!(!c.requires_grad());
        assert!(c.inner.parents.is_empty());
    }

    #[test]
    fn set_data_rejected_on_interior_node() {
        let x = Tensor::leaf(&[1], vec![1.0]);
        let y = add(&x, &x).unwrap();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            y.set_data(|d| d[0] = 0.0)
        }));
        assert!(r.is_err());
    }
}
