use std::cell::{Ref, RefCell};
use std::fmt;

use super::array::Array;
use super::memory;
use super::scalar::Scalar;
use super::NumericsError;

/// Reverse rule of a recorded primitive.
///
/// Returns one optional gradient per input, in input order. Inputs for which
/// [`BackwardCtx::needs_grad`] is false may be skipped by returning `None`.
pub trait BackwardOp<T: Scalar> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad: &Array<T>) -> Vec<Option<Array<T>>>;
}

/// Read access to a node's inputs and output during the reverse pass.
pub struct BackwardCtx<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    inputs: &'a [usize],
    output: &'a Array<T>,
}

impl<'a, T: Scalar> BackwardCtx<'a, T> {
    pub fn input(&self, i: usize) -> &'a Array<T> {
        &self.nodes[self.inputs[i]].value
    }

    pub fn output(&self) -> &'a Array<T> {
        self.output
    }

    pub fn needs_grad(&self, i: usize) -> bool {
        self.nodes[self.inputs[i]].requires_grad
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }
}

struct Node<T: Scalar> {
    name: &'static str,
    value: Array<T>,
    inputs: Vec<usize>,
    op: Option<Box<dyn BackwardOp<T>>>,
    requires_grad: bool,
    leaf: bool,
}

/// Ordered record of primitive applications.
///
/// Node ids grow monotonically and every input id is smaller than the id of
/// the node consuming it, so walking ids downward is a reverse topological
/// order. Leaf gradients accumulate across reverse passes until
/// [`Tape::zero_grad`].
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Array<T>>>>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Array<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the current value.
    pub fn to_array(&self) -> Array<T> {
        self.value().clone()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives gradients.
    pub fn param(&self, value: Array<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Array<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Array<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            name: if requires_grad { "param" } else { "constant" },
            value,
            inputs: Vec::new(),
            op: None,
            requires_grad,
            leaf: true,
        });
        self.grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the output of a primitive.
    ///
    /// The reverse rule is kept only when some input requires a gradient.
    /// Fails when the thread's memory budget is exceeded.
    pub fn record<'t>(
        &'t self,
        name: &'static str,
        value: Array<T>,
        inputs: &[Var<'t, T>],
        op: Box<dyn BackwardOp<T>>,
    ) -> Result<Var<'t, T>, NumericsError> {
        if memory::finite_checks() {
            assert!(
                value.all_finite(),
                "non-finite value produced by `{name}`: {value:?}"
            );
        }
        if let Some((live, budget)) = memory::over_budget() {
            return Err(NumericsError::OutOfMemory { live, budget });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| {
            debug_assert!(std::ptr::eq(v.tape, self), "input from a different tape");
            nodes[v.id].requires_grad
        });
        nodes.push(Node {
            name,
            value,
            inputs: inputs.iter().map(|v| v.id).collect(),
            op: requires_grad.then_some(op),
            requires_grad,
            leaf: false,
        });
        self.grads.borrow_mut().push(None);
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse pass from a one-element output, accumulating into leaf
    /// gradients.
    pub fn backward(&self, output: Var<'_, T>) -> Result<(), NumericsError> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(NumericsError::NotScalar(out.value.shape().to_vec()));
        }
        let mut pending: Vec<Option<Array<T>>> = (0..=output.id).map(|_| None).collect();
        pending[output.id] = Some(Array::full(out.value.shape(), T::one()));
        let mut grads = self.grads.borrow_mut();

        for id in (0..=output.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            if node.leaf {
                if node.requires_grad {
                    match &mut grads[id] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
                continue;
            }
            let Some(op) = &node.op else { continue };
            let ctx = BackwardCtx {
                nodes: &nodes,
                inputs: &node.inputs,
                output: &node.value,
            };
            let input_grads = op.backward(&ctx, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "`{}` backward arity", node.name);
            drop(g);
            for (&input, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    gi.shape(),
                    nodes[input].value.shape(),
                    "`{}` gradient shape",
                    node.name
                );
                match &mut pending[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
            if let Some((live, budget)) = memory::over_budget() {
                return Err(NumericsError::OutOfMemory { live, budget });
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any pass reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Array<T>> {
        self.grads.borrow()[var.id].clone()
    }

    /// Gradient of a leaf, or zeros if no pass reached it.
    pub fn grad_or_zeros(&self, var: Var<'_, T>) -> Array<T> {
        self.grad(var).unwrap_or_else(|| Array::zeros(&var.shape()))
    }

    pub fn zero_grad(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }
}

/// Gradients of every `requires_grad` leaf after one reverse pass.
pub struct Gradients<T: Scalar> {
    by_id: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Array<T>> {
        self.by_id.get(var.id).and_then(Option::as_ref)
    }
}

/// Runs a reverse pass from `output` and collects leaf gradients.
pub fn grad<T: Scalar>(output: Var<'_, T>, tape: &Tape<T>) -> Result<Gradients<T>, NumericsError> {
    tape.backward(output)?;
    let nodes = tape.nodes.borrow();
    let grads = tape.grads.borrow();
    let by_id = nodes
        .iter()
        .zip(grads.iter())
        .map(|(n, g)| {
            if n.leaf && n.requires_grad {
                Some(g.clone().unwrap_or_else(|| Array::zeros(n.value.shape())))
            } else {
                None
            }
        })
        .collect();
    Ok(Gradients { by_id })
}
