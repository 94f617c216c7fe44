//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward operation appends one [`Node`] holding its output value and
//! the rule needed to push gradients back to its inputs. [`Tape::backward`]
//! replays the nodes once in reverse order, hands back a [`Gradients`] table
//! and clears the tape.
//!
//! ```
//! use patcher::autodiff::Tape;
//! use patcher::Tensor;
//!
//! let tape = Tape::<f32>::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0])?.with_requires_grad(true));
//! let loss = x.mul(x)?.sum()?;
//! let grads = tape.backward(loss)?;
//! assert_eq!(grads.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
//! # Ok::<(), patcher::Error>(())
//! ```

mod backward;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

pub use ops::{concat, Conv2dOpts, PadMode};

use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, ResizeAxis};
use crate::tensor::{ParameterStore, Scalar, Tensor};

/// Sentinel in gather index maps: the output element is zero.
pub const GATHER_ZERO: usize = usize::MAX;

pub(crate) enum Op<T: Scalar> {
    Leaf { param: Option<String> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    BiasAdd {
        x: usize,
        bias: usize,
    },
    Expand(usize),
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        x: usize,
        index: Rc<Vec<usize>>,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: T,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Resize {
        x: usize,
        ys: Rc<ResizeAxis>,
        xs: Rc<ResizeAxis>,
    },
    BceWithLogits {
        logits: usize,
        target: Rc<Vec<T>>,
    },
}

/// Names of the differentiable op kinds, one per backward rule.
pub const OP_NAMES: [&str; 24] = [
    "add", "sub", "mul", "div", "scale", "add_scalar", "relu", "gelu", "sigmoid", "sum", "mean", "matmul",
    "bias_add", "expand", "reshape", "permute", "concat", "slice", "gather", "conv2d", "layer_norm", "softmax",
    "resize_bilinear", "bce_with_logits",
];

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MatMul { .. } => "matmul",
            Op::BiasAdd { .. } => "bias_add",
            Op::Expand(_) => "expand",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Resize { .. } => "resize_bilinear",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

thread_local! {
    static FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Corrupts the backward rule of the named op on this thread (its upstream
/// gradient is scaled by 1.5) until cleared with `None`. For exercising
/// gradient checks.
#[doc(hidden)]
pub fn inject_fault(op: Option<&'static str>) {
    FAULT.with(|f| f.set(op));
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// The recording of one forward pass.
///
/// A tape is single-threaded; independent forward passes each use their own.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    generation: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
    generation: u64,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            generation: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops every recorded node. Outstanding [`Var`]s become stale.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.generation.set(self.generation.get() + 1);
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let shape = tensor.shape().to_vec();
        self.push_node(Node {
            shape,
            value: tensor.into_data(),
            op: Op::Leaf { param: None },
            requires_grad: false,
        })
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let requires_grad = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.push_node(Node {
            shape,
            value: tensor.into_data(),
            op: Op::Leaf { param: None },
            requires_grad,
        })
    }

    /// Records a copy of a named parameter. Its gradient is reported under
    /// `name` in [`Gradients`].
    pub fn param(&self, name: &str, tensor: &Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf {
                param: Some(name.to_string()),
            },
            requires_grad: true,
        })
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
            generation: self.generation.get(),
        }
    }

    /// Appends an op result, rejecting non-finite values.
    pub(crate) fn push(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var<'_, T>> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        debug_assert_eq!(crate::tensor::numel(&shape), value.len());
        Ok(self.push_node(Node {
            shape,
            value,
            op,
            requires_grad,
        }))
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    /// Back-propagates from a scalar `loss` through every recorded op, then
    /// clears the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        loss.check()?;
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let generation = self.generation.get();
        self.generation.set(generation + 1);
        if nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(vec![T::one()]);

        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: HashMap::new(),
            generation,
        };
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf { param: Some(name) } => match out.params.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        out.params.insert(name.clone(), g);
                    }
                },
                Op::Leaf { param: None } => {
                    out.leaves.insert(id, g);
                }
                op if FAULT.with(Cell::get) == Some(op.name()) => {
                    let bad: Vec<T> = g.iter().map(|&v| v * T::of(1.5)).collect();
                    backward::propagate(&nodes, id, &bad, &mut grads)
                }
                _ => backward::propagate(&nodes, id, &g, &mut grads),
            }
        }
        Ok(out)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn check(&self) -> Result<()> {
        if self.generation != self.tape.generation.get() {
            return Err(Error::Contract(
                "variable belongs to a tape that has since been cleared".into(),
            ));
        }
        Ok(())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    /// Copies the current value out of the tape.
    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes();
        let node = &nodes[self.id];
        Tensor::new(&node.shape, node.value.clone()).expect("node shapes are validated on push")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.tape.nodes()[self.id].value.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        let nodes = self.tape.nodes();
        let node = &nodes[self.id];
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                node.shape
            )));
        }
        Ok(node.value[0])
    }
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    params: BTreeMap<String, Vec<T>>,
    leaves: HashMap<usize, Vec<T>>,
    generation: u64,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of an unnamed leaf recorded with [`Tape::leaf`].
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&[T]> {
        if var.generation != self.generation {
            return None;
        }
        self.leaves.get(&var.id).map(Vec::as_slice)
    }

    /// Gradient of a named parameter, summed over every use on the tape.
    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.params.get(name).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Adds (`+=`) every parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParameterStore<T>) -> Result<()> {
        for (name, g) in &self.params {
            store.get_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }
}
