//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Operations on
//! tensors that require gradients record a node holding their parents and a
//! backward closure; calling [`Tensor::backward`] on a scalar walks that graph
//! in reverse topological order and deposits `∂loss/∂leaf` into every leaf
//! that requires gradients. Each graph can be consumed exactly once.
//!
//! Storage is flat and row-major with explicit extents. There are no strided
//! views: slicing copies.

pub(crate) mod ops;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use ops::{concat, conv1d, gelu_scalar};

/// Maps the output gradient (and output values) to one optional gradient per
/// parent. `needs[i]` is false when parent `i` does not require a gradient;
/// the closure may return `None` for it.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct GraphNode {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    /// True when this tensor was produced by a recorded operation.
    recorded: bool,
    grad: RefCell<Option<Vec<f64>>>,
    node: RefCell<Option<GraphNode>>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &self.0.data)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    if numel_of(shape) != len {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("expected {} elements, got {len}", numel_of(shape)),
        });
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(Inner {
            shape,
            data,
            requires_grad,
            recorded: false,
            grad: RefCell::new(None),
            node: RefCell::new(None),
        }))
    }

    /// A constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::build(shape.to_vec(), data, false))
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::build(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, vec![0.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Tensor::new(shape, vec![value; numel_of(shape)])
    }

    /// Rank-0 constant.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(Vec::new(), vec![value], false)
    }

    /// 1-D constant.
    pub fn vector(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::build(vec![n], data, false)
    }

    /// 2-D constant from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(&[rows, cols], data)
    }

    /// Records the result of an operation. A graph node is attached only when
    /// at least one parent requires gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        if !parents.iter().any(Tensor::requires_grad) {
            return Tensor::build(shape, data, false);
        }
        Tensor(Rc::new(Inner {
            shape,
            data,
            requires_grad: true,
            recorded: true,
            grad: RefCell::new(None),
            node: RefCell::new(Some(GraphNode { parents, backward })),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True for tensors not produced by a recorded operation.
    pub fn is_leaf(&self) -> bool {
        !self.0.recorded
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from any graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Same values as a fresh trainable leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.data.clone(), true)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    fn key(&self) -> *const Inner {
        Rc::as_ptr(&self.0)
    }

    fn graph_consumed(&self) -> bool {
        self.0.recorded && self.0.node.borrow().is_none()
    }

    /// Back-propagates from this scalar into every leaf requiring gradients.
    /// Leaf gradients accumulate across separate graphs; use
    /// [`Tensor::zero_grad`] to reset them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.0.recorded {
            return Err(Error::NoGraph);
        }

        // Post-order DFS over the recorded graph; rejects any consumed node
        // before mutating anything.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            if t.graph_consumed() {
                return Err(Error::GraphConsumed);
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.0.node.borrow().as_ref() {
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<*const Inner, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            if !t.0.recorded {
                let mut slot = t.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            let node = t
                .0
                .node
                .borrow_mut()
                .take()
                .expect("node presence checked during traversal");
            let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
            let parent_grads = (node.backward)(&g, t.data(), &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (true, Some(pg)) = (need, pg) else {
                    continue;
                };
                debug_assert_eq!(pg.len(), p.numel());
                match grads.get_mut(&p.key()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(p.key(), pg);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[], vec![1.0]).is_ok());
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::param(&[], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // x*x + x at x = 2
        let x = Tensor::param(&[], vec![2.0]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
    }

    #[test]
    fn fan_out_scales_gradient() {
        for k in 1..6 {
            let x = Tensor::param(&[3], vec![0.5, -1.0, 2.0]).unwrap();
            let mut acc = x.clone();
            for _ in 1..k {
                acc = acc.add(&x).unwrap();
            }
            acc.sum().unwrap().backward().unwrap();
            assert_eq!(x.grad().unwrap(), vec![k as f64; 3]);
        }
    }

    #[test]
    fn second_backward_is_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert!(matches!(y.backward(), Err(Error::GraphConsumed)));
        // A subgraph shared with a fresh loss is also consumed.
        let z = x.mul(&x).unwrap();
        let l1 = z.sum().unwrap();
        let l2 = z.scale(2.0).sum().unwrap();
        l1.backward().unwrap();
        assert!(matches!(l2.backward(), Err(Error::GraphConsumed)));
    }

    #[test]
    fn backward_needs_scalar_with_graph() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            x.scale(2.0).backward(),
            Err(Error::NotScalar(_))
        ));
        assert!(matches!(Tensor::scalar(1.0).backward(), Err(Error::NoGraph)));
    }

    #[test]
    fn constants_build_no_graph() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = a.mul(&a).unwrap();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }

    #[test]
    fn leaf_gradients_accumulate_across_graphs() {
        let x = Tensor::param(&[], vec![1.5]).unwrap();
        x.scale(2.0).backward().unwrap();
        x.scale(3.0).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }
}
