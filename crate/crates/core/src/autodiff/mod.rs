//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. [`Tape::backward`] replays the tape in reverse and returns the
//! gradient of a scalar with respect to every node that requires one.
//!
//! A tape is single-threaded (`RefCell` inside); independent tapes can run on
//! separate threads.

mod conv;
mod ops;
mod tensor;

use std::cell::RefCell;

use thiserror::Error;

pub use conv::{bilinear_sample, bilinear_weights, conv2d, sampled_conv3x3, tap_transform};
pub use ops::{concat, sigmoid};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub(crate) struct BackwardArgs<'a> {
    pub gout: &'a [f64],
    pub out: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
        f(&vals)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutodiffError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(gout) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let args = BackwardArgs {
                gout: &gout,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                needs,
            };
            let pgrads = backward(&args);
            for (&p, g) in node.parents.iter().zip(pgrads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when nothing reached it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = v.shape();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.data().to_vec()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}

/// Largest relative error between the tape gradient of `f` at `x` and a
/// central finite difference with step `h`, over the listed coordinates.
pub fn fd_check(
    x: &Tensor,
    probes: &[usize],
    h: f64,
    f: impl for<'a> Fn(&'a Tape, Var<'a>) -> Var<'a>,
) -> f64 {
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&tape, xv);
    let g = tape.backward(out).unwrap().wrt(xv);
    let eval = |t: &Tensor| {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        f(&tape, v).item()
    };
    let mut worst: f64 = 0.0;
    for &i in probes {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let fd = (eval(&p) - eval(&m)) / (2.0 * h);
        let an = g.data()[i];
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
