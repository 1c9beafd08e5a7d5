//! Tape-based reverse accumulation.
//!
//! Every traced operation appends one node holding its output value and a
//! backward closure. Nodes are only ever appended, so a node's inputs always
//! precede it and [`Tape::backward`] can visit entries once in reverse order.
//! A tape is confined to the thread that built it; run independent samples
//! on independent tapes.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<'_, T>)>;

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Rc<Vec<T>>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// The computation record of one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never stores backward closures; `backward` yields no gradients.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), self.grad_enabled, None)
    }

    /// Registers a value that receives no gradient.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_node(t.shape().to_vec(), t.data().to_vec(), false, None)
    }

    pub fn constant_vec(&self, shape: &[usize], data: Vec<T>) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push_node(shape.to_vec(), data, false, None)
    }

    fn push_node(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            requires_grad,
            backward,
        });
        Var { tape: self, id }
    }

    /// Appends an operation output. `make_backward` is only invoked when some
    /// input requires a gradient.
    pub(crate) fn op<F>(
        &self,
        inputs: &[Var<'_, T>],
        shape: Vec<usize>,
        value: Vec<T>,
        make_backward: F,
    ) -> Var<'_, T>
    where
        F: FnOnce() -> BackwardFn<T>,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires = self.grad_enabled && inputs.iter().any(|v| v.requires_grad());
        let backward = if requires { Some(make_backward()) } else { None };
        self.push_node(shape, value, requires, backward)
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    fn value_of(&self, id: usize) -> Rc<Vec<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar root. Returns ∂root/∂node for every node the
    /// root depends on through differentiable paths.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_shape = &nodes[root.id].shape;
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape.clone()));
        }
        let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if requires[root.id] {
            grads[root.id] = Some(vec![T::one()]);
        }
        for id in (0..=root.id).rev() {
            let Some(bw) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            {
                let (lower, _) = grads.split_at_mut(id);
                let mut sink = GradSink {
                    grads: lower,
                    lens: &lens,
                    requires: &requires,
                };
                bw(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Write access to the gradient buffers of earlier nodes during backward.
pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<Vec<T>>],
    lens: &'a [usize],
    requires: &'a [bool],
}

impl<T: Scalar> GradSink<'_, T> {
    #[inline]
    pub fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Zero-initialised on first access.
    pub fn slot(&mut self, id: usize) -> &mut [T] {
        let len = self.lens[id];
        self.grads[id].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn add(&mut self, id: usize, g: &[T]) {
        if !self.wants(id) {
            return;
        }
        let slot = self.slot(id);
        debug_assert_eq!(slot.len(), g.len());
        slot.iter_mut().zip(g).for_each(|(s, &v)| *s += v);
    }
}

pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the root does not depend on `v`.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        let shape = &self.shapes[v.id];
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Rc<Vec<T>> {
        self.tape.value_of(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_of(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&self.shape(), self.value().as_ref().clone()).expect("node shape")
    }

    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar var");
        v[0]
    }

    /// Detached copy of this value.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape
            .push_node(self.shape(), self.value().as_ref().clone(), false, None)
    }
}
