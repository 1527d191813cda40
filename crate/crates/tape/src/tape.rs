use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::Scalar;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &mut Gradients<T>)>;

struct Node<T: Scalar> {
    value: Rc<ArrayD<T>>,
    backward: Option<BackwardFn<T>>,
    tracked: bool,
}

/// Append-only record of a computation.
///
/// Every value stored on the tape is kept in standard (row-major) layout, so
/// op implementations may take `as_slice()` on any input.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
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
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input; gradients are retained for it after `backward`.
    pub fn leaf(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.insert(standard(value), None, true)
    }

    /// Untracked input (data, masks). No gradient flows into it.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.insert(standard(value), None, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Records the result of an op. The backward closure is dropped when no
    /// parent is tracked.
    pub(crate) fn push<F>(&self, value: ArrayD<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&ArrayD<T>, &mut Gradients<T>) + 'static,
    {
        let tracked = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].tracked)
        };
        let backward: Option<BackwardFn<T>> = if tracked {
            Some(Box::new(backward))
        } else {
            None
        };
        self.insert(standard(value), backward, tracked)
    }

    fn insert(&self, value: ArrayD<T>, backward: Option<BackwardFn<T>>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            backward,
            tracked,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<ArrayD<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn is_tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Back-propagates from a single-element `root`, seeding its gradient with 1.
    ///
    /// Gradients of intermediate nodes are released once consumed; only leaf
    /// gradients remain readable in the result.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        assert_eq!(root_value.len(), 1, "backward root must hold exactly one element");
        let mut grads = Gradients {
            grads: (0..nodes.len()).map(|_| None).collect(),
            tracked: nodes.iter().map(|n| n.tracked).collect(),
        };
        if !nodes[root.id].tracked {
            return grads;
        }
        grads.grads[root.id] = Some(ArrayD::from_elem(root_value.raw_dim(), T::one()));
        for id in (0..=root.id).rev() {
            let Some(backward) = nodes[id].backward.as_ref() else {
                continue;
            };
            if let Some(g) = grads.grads[id].take() {
                backward(&g, &mut grads);
            }
        }
        grads
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Gradient accumulator handed to backward closures and returned by
/// [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
    tracked: Vec<bool>,
}

impl<T: Scalar> Gradients<T> {
    /// Whether node `id` needs a gradient at all. Backward closures use this to
    /// skip work for untracked inputs.
    pub fn wants(&self, id: usize) -> bool {
        self.tracked[id]
    }

    pub fn accumulate(&mut self, id: usize, g: ArrayD<T>) {
        if !self.tracked[id] {
            return;
        }
        let g = standard(g);
        match &mut self.grads[id] {
            Some(acc) => {
                assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch at node {id}");
                *acc += &g;
            }
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads[v.id].as_ref()
    }

    /// Gradient of `v`, or zeros of its shape if nothing reached it.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> ArrayD<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(v.value().raw_dim()),
        }
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<ArrayD<T>> {
        self.grads[v.id].take()
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<ArrayD<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.is_tracked(self.id)
    }

    /// The single element of a scalar-shaped value.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar value");
        *v.iter().next().unwrap()
    }
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

pub(crate) fn standard<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}
