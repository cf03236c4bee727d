use std::cell::Cell;
use std::cmp::Reverse;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::ops::Op;
use crate::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Node {
    id: usize,
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
}

/// A tensor value recorded on the gradient tape.
///
/// Every operation on a `Var` that has a gradient-requiring ancestor records
/// itself together with its inputs. The recorded graph is the tape: node ids
/// grow monotonically, so replaying nodes in descending id order visits each
/// node after every node that consumed it. A tape is single-threaded (`Var`
/// is `!Send`); independent tapes may live on different threads.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    /// Leaf that receives a gradient.
    pub fn parameter(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node { id: next_id(), value, requires_grad, op: None }))
    }

    pub(crate) fn from_op(value: Tensor, op: Op, name: &'static str) -> Result<Self> {
        let value = value.check_finite(name)?;
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { Some(op) } else { None };
        Ok(Var(Rc::new(Node { id: next_id(), value, requires_grad, op })))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn item(&self) -> Result<f64> {
        self.0.value.item()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.0.id, self.0.value, self.0.requires_grad)
    }
}

/// Gradients of a scalar with respect to every gradient-requiring leaf.
#[derive(Debug, Default)]
pub struct Gradients(HashMap<usize, Tensor>);

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.0.get(&var.id())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn ensure_scalar(output: &Var) -> Result<()> {
    if output.numel() != 1 {
        return Err(TensorError::Usage(format!(
            "gradients are only defined for scalar outputs, got shape {:?}",
            output.shape()
        )));
    }
    Ok(())
}

/// Reachable gradient-requiring nodes in reverse creation order.
fn replay_order(output: &Var) -> Vec<Var> {
    let mut seen = HashSet::new();
    let mut stack = vec![output.clone()];
    let mut order = Vec::new();
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        if let Some(op) = v.op() {
            stack.extend(op.parents().into_iter().cloned());
        }
        order.push(v);
    }
    order.sort_by_key(|v| Reverse(v.id()));
    order
}

fn propagate(
    output: &Var,
    create_graph: bool,
    keep: impl Fn(&Var) -> bool,
) -> Result<HashMap<usize, Var>> {
    ensure_scalar(output)?;
    let mut pending: HashMap<usize, Var> = HashMap::new();
    let mut kept = HashMap::new();
    if !output.requires_grad() {
        return Ok(kept);
    }
    pending.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
    for node in replay_order(output) {
        let Some(g) = pending.remove(&node.id()) else { continue };
        if keep(&node) {
            kept.insert(node.id(), g.clone());
        }
        let Some(op) = node.op() else { continue };
        for (parent, pg) in op.backward(&node, &g, create_graph)? {
            if !parent.requires_grad() {
                continue;
            }
            let merged = match pending.remove(&parent.id()) {
                Some(acc) => acc.add(&pg)?,
                None => pg,
            };
            pending.insert(parent.id(), merged);
        }
    }
    Ok(kept)
}

/// Reverse-mode gradients of a scalar `loss` for every leaf that requires one.
pub fn backward(loss: &Var) -> Result<Gradients> {
    let grads = propagate(loss, false, |v| v.op().is_none())?;
    Ok(Gradients(grads.into_iter().map(|(id, g)| (id, g.value().clone())).collect()))
}

/// Gradients of a scalar `output` with respect to `wrt`, returned as `Var`s.
///
/// With `create_graph` the returned gradients are themselves recorded, so
/// they can be differentiated again (needed for gradient penalties). Inputs
/// the output does not depend on receive zeros.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
    let wanted: HashSet<usize> = wrt.iter().map(Var::id).collect();
    let grads = propagate(output, create_graph, |v| wanted.contains(&v.id()))?;
    Ok(wrt
        .iter()
        .map(|v| {
            grads
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect())
}
