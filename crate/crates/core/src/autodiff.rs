//! Reverse-mode automatic differentiation over a graph recorded during each
//! forward pass, plus the named parameter store and a central-difference
//! gradient oracle.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to an op's backward closure.
pub struct BackwardArgs<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Whether each input needs a gradient; `None` may be returned otherwise.
    pub needs: Vec<bool>,
}

/// Maps the output gradient to one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> + Send + Sync>;

pub struct Node<T> {
    pub value: Tensor<T>,
    pub op: &'static str,
    pub inputs: Vec<NodeId>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    pub param: Option<ParamId>,
    backward: Option<BackwardFn<T>>,
}

/// Dynamically recorded computation. Nodes are appended in creation order and
/// may only reference earlier nodes, so the graph is acyclic and reverse
/// insertion order is a valid topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient (input data, labels).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, false, None)
    }

    /// A leaf that receives a gradient but is not tied to a parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, true, None)
    }

    /// A leaf holding a copy of a parameter's current value. Non-trainable
    /// entries are recorded as constants.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        let p = params.get(id);
        self.push_leaf(p.value.clone(), p.trainable(), Some(id))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: "leaf",
            inputs: Vec::new(),
            grad: None,
            requires_grad,
            param,
            backward: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Append the result of an op. The node requires a gradient if any input does.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[NodeId],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs: inputs.to_vec(),
            grad: None,
            requires_grad,
            param: None,
            backward: requires_grad.then_some(backward),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    /// Every node in creation order.
    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Clear every node gradient so the graph can be differentiated again.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Populate `grad` on every node that requires one, seeding the scalar
    /// `loss` with 1. Nodes used more than once accumulate by summation.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if !(shape.is_empty() || shape == [1]) {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::from_parts(shape, vec![T::one()]);
        accumulate(&mut self.nodes[loss.0].grad, seed)?;

        for idx in (0..=loss.0).rev() {
            let pending = {
                let node = &self.nodes[idx];
                let (Some(grad), Some(backward)) = (node.grad.as_ref(), node.backward.as_ref()) else {
                    continue;
                };
                let args = BackwardArgs {
                    grad,
                    inputs: node.inputs.iter().map(|i| &self.nodes[i.0].value).collect(),
                    output: &node.value,
                    needs: node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect(),
                };
                let grads = backward(&args);
                debug_assert_eq!(grads.len(), node.inputs.len(), "{} backward arity", node.op);
                node.inputs.iter().copied().zip(grads).collect::<Vec<_>>()
            };
            for (input, g) in pending {
                if let Some(g) = g {
                    if self.nodes[input.0].requires_grad {
                        accumulate(&mut self.nodes[input.0].grad, g)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// [`Graph::backward`], then add each parameter leaf's gradient into
    /// `params` (summing when a parameter was read more than once).
    pub fn backward_into(&mut self, loss: NodeId, params: &mut ParamSet<T>) -> Result<()> {
        self.backward(loss)?;
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, node.grad.as_ref()) {
                accumulate(&mut params.get_mut(id).grad, g.clone())?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable and subject to weight decay (conv and fc weights).
    Weight,
    /// Trainable without weight decay (biases, BN affine).
    Affine,
    /// Persistent but not trainable (BN running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub kind: ParamKind,
}

impl<T> Param<T> {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }
}

/// Parameters keyed by hierarchical name, iterated in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let (idx, _) = self.entries.insert_full(
            name,
            Param {
                value,
                grad: None,
                kind,
            },
        );
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, _, p)| p.trainable()).map(|(id, _, _)| id).collect()
    }

    /// Total element count of trainable entries.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| p.trainable()).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }
}

/// Per-parameter gradients keyed by parameter name.
pub type GradMap<T> = IndexMap<String, Tensor<T>>;

/// Central differences `(f(p+eps) − f(p−eps)) / 2eps` for every element of
/// every trainable parameter. `f` must be deterministic.
pub fn finite_diff_grad<T, F>(mut f: F, params: &mut ParamSet<T>, eps: f64) -> Result<GradMap<T>>
where
    T: Float,
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite_diff_grad: eps must be > 0, got {eps}")));
    }
    let mut out = GradMap::new();
    for id in params.trainable_ids() {
        let n = params.get(id).value.numel();
        let elems: Vec<usize> = (0..n).collect();
        let vals = finite_diff_elements(&mut f, params, id, &elems, eps)?;
        let shape = params.get(id).value.shape().to_vec();
        out.insert(params.name(id).to_string(), Tensor::new(&shape, vals)?);
    }
    Ok(out)
}

/// Central differences for selected elements of one parameter.
pub fn finite_diff_elements<T, F>(
    f: &mut F,
    params: &mut ParamSet<T>,
    id: ParamId,
    elements: &[usize],
    eps: f64,
) -> Result<Vec<T>>
where
    T: Float,
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    let h = T::from_f64(eps);
    let mut out = Vec::with_capacity(elements.len());
    for &e in elements {
        let orig = params.get(id).value.data()[e];
        params.get_mut(id).value.data_mut()[e] = orig + h;
        let plus = f(params);
        params.get_mut(id).value.data_mut()[e] = orig - h;
        let minus = f(params);
        params.get_mut(id).value.data_mut()[e] = orig;
        out.push((plus? - minus?) / (h + h));
    }
    Ok(out)
}

/// Central difference for one element at step `eps`, confirmed at `eps/2`.
/// `None` when the two estimates differ by more than `agree` (relative):
/// the step then straddles a point where the function is not differentiable,
/// such as a ReLU switching sign, and the quotient does not estimate the
/// gradient.
pub fn checked_difference<T, F>(
    f: &mut F,
    params: &mut ParamSet<T>,
    id: ParamId,
    element: usize,
    eps: f64,
    agree: f64,
) -> Result<Option<f64>>
where
    T: Float,
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    let coarse = finite_diff_elements(f, params, id, &[element], eps)?[0].as_f64();
    let fine = finite_diff_elements(f, params, id, &[element], eps / 2.0)?[0].as_f64();
    Ok((relative_error(coarse, fine, 1e-6) <= agree).then_some(fine))
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}
