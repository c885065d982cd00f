//! Dense NCHW tensors with a reverse-mode gradient tape.
//!
//! Every operation in [`ops`] returns a new [`Tensor`]. When any operand
//! requires a gradient the result records its parents and a backward
//! closure; [`Tensor::backward`] walks that record in reverse topological
//! order and accumulates gradients into the leaf tensors (the model
//! parameters). Tensors are reference counted and confined to one thread.

mod element;
pub mod gradcheck;
pub mod ops;
pub mod reference;
#[cfg(test)]
mod ops_tests;

use std::cell::{Cell, Ref, RefCell};
use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use element::{DType, Element};

use crate::error::{Error, Result};

type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Element> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    grad_fn: Option<GradFn<T>>,
}

/// Reference-counted dense tensor. Cloning is cheap and shares storage.
pub struct Tensor<T: Element> {
    node: Rc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static BRANCH_TRACE: RefCell<Option<DefaultHasher>> = const { RefCell::new(None) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                grad_fn: None,
            }),
        }
    }

    /// Creates a constant tensor. Fails when `data.len()` differs from the
    /// product of `shape` or when `shape` holds a zero extent.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape("Tensor::new", &data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Creates a trainable leaf tensor.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape("Tensor::parameter", &data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(vec![value; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], vec![1], false)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::from_f64(v).unwrap()).collect(), shape)
    }

    /// Builds the result of an operation and, when any parent is tracked,
    /// records the backward closure on the tape.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        name: &'static str,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape), "{name}");
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            parents,
            backward: Box::new(backward),
        });
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                grad_fn,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.borrow().iter().map(|v| v.to_f64().unwrap()).collect()
    }

    /// First element; intended for scalar results such as losses.
    pub fn item(&self) -> T {
        self.node.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Name of the operation that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.name)
    }

    /// Accumulated gradient, or `None` if backward never reached this leaf
    /// since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    /// Gradient with unreached leaves reported as zeros.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.grad().unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Untracked copy sharing no tape history.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.node.shape.clone(), false)
    }

    /// In-place update of a leaf's values (optimizer steps, checkpoint loads).
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.node.data.borrow_mut());
    }

    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    /// Propagates d(self)/d(leaf) into every tracked leaf reachable from
    /// `self`. `self` must hold exactly one element.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS over tracked nodes.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.node.id) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.node.id, vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.node.id) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
                    let grads = (gf.backward)(&g, &needs);
                    debug_assert_eq!(grads.len(), gf.parents.len(), "{}", gf.name);
                    for (p, pg) in gf.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "{} parent grad", gf.name);
                        match pending.get_mut(&p.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                            None => {
                                pending.insert(p.node.id, pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let head: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("head", &head)
            .finish()
    }
}

fn check_shape<T>(op: &'static str, data: &[T], shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(op, format!("extents must be positive, got {shape:?}")));
    }
    if data.len() != numel(shape) {
        return Err(Error::shape(
            op,
            format!("{} elements for shape {shape:?}", data.len()),
        ));
    }
    Ok(())
}

/// Runs `f` while recording the branch decisions of piecewise operations
/// (relu sign patterns, max-pool argmax positions) into a hash. Two
/// evaluations with different digests took different smooth pieces.
pub fn with_branch_trace<R>(f: impl FnOnce() -> R) -> (R, u64) {
    use std::hash::Hasher;
    let prev = BRANCH_TRACE.with(|t| t.borrow_mut().replace(DefaultHasher::new()));
    let out = f();
    let digest = BRANCH_TRACE.with(|t| {
        let h = t.borrow_mut().take().expect("branch trace active");
        *t.borrow_mut() = prev;
        h.finish()
    });
    (out, digest)
}

pub(crate) fn trace_branch(f: impl FnOnce(&mut DefaultHasher)) {
    BRANCH_TRACE.with(|t| {
        if let Some(h) = t.borrow_mut().as_mut() {
            f(h);
        }
    });
}
