use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};

use super::{Shape, Tensor};

/// Position of a node on the tape. Ids increase in recording order, so the
/// tape is topologically sorted by construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output cotangent to one cotangent per recorded input (`None` for
/// inputs that receive no gradient).
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    op: &'static str,
    inputs: Vec<NodeId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// A graph lives for one forward/backward pass and is confined to the thread
/// that built it.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    kinks: Cell<u64>,
    kernel_log: RefCell<Vec<(&'static str, usize)>>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            kinks: Cell::new(0xcbf2_9ce4_8422_2325),
            kernel_log: RefCell::new(Vec::new()),
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            op: "constant",
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            op: "leaf",
            inputs: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    pub(crate) fn record<'g>(
        &'g self,
        op: &'static str,
        value: Tensor,
        inputs: &[Var<'g>],
        backward: BackwardFn,
    ) -> Var<'g> {
        let requires_grad = inputs.iter().any(|v| self.requires_grad(v.id));
        self.push(Node {
            value,
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: NodeId(nodes.len() - 1),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape_of(&self, id: NodeId) -> Shape {
        self.nodes.borrow()[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes.borrow()[id.0].op
    }

    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes.borrow()[id.0].inputs.clone()
    }

    /// Ids of every node recorded with the given op name.
    pub fn nodes_with_op(&self, op: &str) -> Vec<NodeId> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == op)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Hash of every branch decision taken by non-smooth ops (relu masks,
    /// affinity normalisation branches). Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks.get()
    }

    pub(crate) fn note_kinks(&self, bits: impl IntoIterator<Item = bool>) {
        let mut h = self.kinks.get();
        let mut word = 0u64;
        let mut count = 0u32;
        for b in bits {
            word = (word << 1) | b as u64;
            count += 1;
            if count == 64 {
                h = mix(h, word);
                word = 0;
                count = 0;
            }
        }
        h = mix(h, word ^ ((count as u64) << 56));
        self.kinks.set(h);
    }

    /// Records the element count of a kernel buffer materialised by a
    /// guidance op.
    pub(crate) fn log_kernel(&self, label: &'static str, elements: usize) {
        self.kernel_log.borrow_mut().push((label, elements));
    }

    pub fn kernel_allocations(&self) -> Ref<'_, Vec<(&'static str, usize)>> {
        self.kernel_log.borrow()
    }

    /// Differentiates a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        self.check_owned(output)?;
        let shape = self.shape_of(output.id);
        if shape != Shape::scalar() {
            return Err(Error::Usage(format!(
                "backward without a cotangent needs a scalar output, got {shape}"
            )));
        }
        self.backward_with(output, Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product with an explicit output cotangent.
    pub fn backward_with(&self, output: Var<'_>, cotangent: Tensor) -> Result<Gradients> {
        self.check_owned(output)?;
        let nodes = self.nodes.borrow();
        let out = output.id.0;
        if cotangent.shape() != nodes[out].value.shape() {
            return Err(crate::error::dim_err(
                "backward",
                format!(
                    "cotangent {} does not match output {}",
                    cotangent.shape(),
                    nodes[out].value.shape()
                ),
            ));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        acc[out] = Some(cotangent.to_vec());
        for id in (0..=out).rev() {
            let Some(grad) = acc[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let grad = Tensor::from_parts(node.value.shape(), grad);
            if let Some(back) = &node.backward {
                let input_grads = back(&grad);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
                for (input, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !nodes[input.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.shape(), nodes[input.0].value.shape(), "op {}", node.op);
                    match &mut acc[input.0] {
                        Some(buf) => buf.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g.to_vec()),
                    }
                }
            }
            // only leaf gradients are retained
            if node.backward.is_none() {
                acc[id] = Some(grad.to_vec());
            }
        }
        let grads = acc
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(nodes[i].value.shape(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn check_owned(&self, v: Var<'_>) -> Result<()> {
        if !std::ptr::eq(v.graph, self) || v.id.0 >= self.len() {
            return Err(Error::Usage(
                "backward called on a tensor that is not on this tape".into(),
            ));
        }
        Ok(())
    }
}

fn mix(h: u64, word: u64) -> u64 {
    (h ^ word).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(23)
}

/// Gradients of leaf nodes after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {})", self.id.0, self.graph.op_name(self.id))
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.graph.shape_of(self.id)
    }
}
