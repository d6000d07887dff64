//! Reverse-mode tape. A [`Graph`] owns node values and per-op backward
//! closures; [`Var`] is a cheap handle into it.
//!
//! Backward walks nodes in reverse insertion order and accumulates parent
//! gradients in that fixed order, so gradients are bit-reproducible run to
//! run. Backward closures capture clones of whatever forward values they
//! need and never touch the graph, which keeps the borrow discipline flat.

use std::cell::RefCell;
use std::rc::Rc;

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Gradient contributions returned by an op's backward pass, aligned with
/// the op's parents. `None` means no gradient flows to that parent.
pub type ParentGrads<T> = Vec<Option<Tensor<T>>>;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> ParentGrads<T>>;

struct OpRecord<T: Scalar> {
    parents: Vec<usize>,
    backward: BackwardFn<T>,
}

struct GraphInner<T: Scalar> {
    values: Vec<Tensor<T>>,
    requires: Vec<bool>,
    records: Vec<Option<OpRecord<T>>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

/// A tape of tensor ops supporting one reverse pass.
///
/// Intended lifecycle: build leaves, run the forward computation, call
/// [`Graph::backward`] once on a scalar node, read leaf gradients, drop the
/// graph. Training constructs a fresh graph every step.
pub struct Graph<T: Scalar> {
    inner: Rc<RefCell<GraphInner<T>>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Self { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
pub struct Var<T: Scalar> {
    graph: Graph<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self { graph: self.graph.clone(), id: self.id }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(GraphInner {
                values: Vec::new(),
                requires: Vec::new(),
                records: Vec::new(),
                grads: Vec::new(),
                backward_done: false,
            })),
        }
    }

    fn push(&self, value: Tensor<T>, requires: bool, record: Option<OpRecord<T>>) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        inner.values.push(value);
        inner.requires.push(requires);
        inner.records.push(record);
        inner.grads.push(None);
        Var { graph: self.clone(), id }
    }

    /// New input node. Gradients accumulate here iff `requires_grad`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.push(value, requires_grad, None)
    }

    /// Input node that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    /// Rank-0 constant.
    pub fn lit(&self, v: T) -> Var<T> {
        self.constant(Tensor::scalar(v))
    }

    /// Record an externally computed op.
    ///
    /// `backward` receives the gradient w.r.t. `value` and must return one
    /// entry per parent, each either `None` or a tensor with the parent's
    /// shape. This is the extension point for ops whose forward pass lives
    /// outside the graph (the rasterizer records itself this way).
    pub fn custom_op(
        &self,
        parents: &[&Var<T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> ParentGrads<T> + 'static,
    ) -> Var<T> {
        self.push_op(value, parents, Box::new(backward))
    }

    pub(crate) fn push_op(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: BackwardFn<T>,
    ) -> Var<T> {
        let mut requires = false;
        let mut ids = Vec::with_capacity(parents.len());
        {
            let inner = self.inner.borrow();
            for p in parents {
                assert!(
                    Rc::ptr_eq(&self.inner, &p.graph.inner),
                    "op mixes vars from different graphs"
                );
                requires |= inner.requires[p.id];
                ids.push(p.id);
            }
        }
        // Nothing upstream wants gradients: keep the value, drop the closure.
        let record = requires.then_some(OpRecord { parents: ids, backward });
        self.push(value, requires, record)
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar root. Consumes the tape: callable once.
    ///
    /// After this returns, `grad()` on any leaf with `requires_grad` that
    /// participated in the computation yields its accumulated gradient.
    pub fn backward(&self, root: &Var<T>) {
        assert!(
            Rc::ptr_eq(&self.inner, &root.graph.inner),
            "backward root from a different graph"
        );
        {
            let mut inner = self.inner.borrow_mut();
            assert!(!inner.backward_done, "backward called twice on one graph");
            inner.backward_done = true;
            assert_eq!(
                inner.values[root.id].numel(),
                1,
                "backward root must be scalar, got shape {:?}",
                inner.values[root.id].shape()
            );
            assert!(
                inner.requires[root.id],
                "backward root does not require gradients; nothing to do"
            );
            let seed_shape = inner.values[root.id].shape().to_vec();
            inner.grads[root.id] = Some(Tensor::full(&seed_shape, T::one()));
        }

        for id in (0..=root.id).rev() {
            // Detach the record so the closure runs with no borrow held.
            let (grad, record) = {
                let mut inner = self.inner.borrow_mut();
                if inner.grads[id].is_none() {
                    continue;
                }
                match inner.records[id].take() {
                    Some(rec) => (inner.grads[id].take().expect("grad present"), rec),
                    None => continue, // leaf: gradient stays available
                }
            };
            let contribs = (record.backward)(&grad);
            assert_eq!(
                contribs.len(),
                record.parents.len(),
                "op backward returned {} gradients for {} parents",
                contribs.len(),
                record.parents.len()
            );
            let mut inner = self.inner.borrow_mut();
            for (&pid, contrib) in record.parents.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !inner.requires[pid] {
                    continue;
                }
                assert_eq!(
                    c.shape(),
                    inner.values[pid].shape(),
                    "gradient shape mismatch for node {pid}"
                );
                match &mut inner.grads[pid] {
                    Some(acc) => acc.accumulate(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
    }
}

impl<T: Scalar> Var<T> {
    pub fn graph(&self) -> Graph<T> {
        self.graph.clone()
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.inner.borrow().values[self.id].clone()
    }

    /// Read the node value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.graph.inner.borrow().values[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().values[self.id].shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.inner.borrow().values[self.id].numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().requires[self.id]
    }

    /// Accumulated gradient after [`Graph::backward`]; `None` if no gradient
    /// reached this node or it does not require one.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.graph.inner.borrow().grads[self.id].clone()
    }

    /// Detach: same value, no gradient flow. Forward output is bit-identical
    /// to the input (the tensor is cloned, not recomputed).
    pub fn stop_grad(&self) -> Var<T> {
        self.graph.push(self.value(), false, None)
    }
}
