//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every builder call evaluates its node immediately and records it, so node
//! ids are already in topological order. The graph owns its parameter table;
//! [`Graph::evaluate`] replays the recorded nodes against the current table,
//! which is how the finite-difference checker perturbs parameters.

use std::collections::HashMap;

use super::kernels;
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    FixedBilinear,
    /// Transposed convolution initialised to bilinear weights.
    #[default]
    LearnedTransposed,
}

/// Operation kinds, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Param,
    Conv2d,
    Relu,
    Sigmoid,
    MaxPool2,
    Concat,
    Slice,
    UpsampleBilinear,
    UpsampleLearned,
    Sum,
    Scale,
    Add,
    BalancedBce,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Param => "param",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::UpsampleBilinear => "upsample_bilinear",
            OpKind::UpsampleLearned => "upsample_learned",
            OpKind::Sum => "sum",
            OpKind::Scale => "scale",
            OpKind::Add => "add",
            OpKind::BalancedBce => "balanced_bce",
        }
    }

    pub const ALL: [OpKind; 14] = [
        OpKind::Input,
        OpKind::Param,
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::MaxPool2,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::UpsampleBilinear,
        OpKind::UpsampleLearned,
        OpKind::Sum,
        OpKind::Scale,
        OpKind::Add,
        OpKind::BalancedBce,
    ];

    pub fn parse(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Deliberately wrong backward rule, for negative-control testing of the
/// gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub op: OpKind,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { stride: usize, pad: usize },
    Relu,
    Sigmoid,
    MaxPool2,
    Concat,
    Slice { offset: usize, len: usize },
    UpsampleBilinear { factor: usize },
    UpsampleLearned { factor: usize },
    Sum,
    Scale(T),
    Add,
    BalancedBce { target: Tensor<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::MaxPool2 => OpKind::MaxPool2,
            Op::Concat => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::UpsampleBilinear { .. } => OpKind::UpsampleBilinear,
            Op::UpsampleLearned { .. } => OpKind::UpsampleLearned,
            Op::Sum => OpKind::Sum,
            Op::Scale(_) => OpKind::Scale,
            Op::Add => OpKind::Add,
            Op::BalancedBce { .. } => OpKind::BalancedBce,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradient per parameter, aligned with the graph's parameter table.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    names: Vec<String>,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.grads)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: ParamSet<T>,
    param_nodes: HashMap<ParamId, NodeId>,
    fault: Option<Fault>,
}

impl<T: Scalar> Graph<T> {
    pub fn new(params: ParamSet<T>) -> Self {
        Graph {
            nodes: Vec::new(),
            params,
            param_nodes: HashMap::new(),
            fault: None,
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Kinds of every recorded node, in evaluation order.
    pub fn kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>) -> Result<NodeId> {
        let value = self.compute(&op, &inputs)?;
        let requires_grad = match op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn compute(&self, op: &Op<T>, inputs: &[NodeId]) -> Result<Tensor<T>> {
        let arg = |i: usize| &self.nodes[inputs[i].0].value;
        Ok(match op {
            Op::Input => unreachable!("input values are stored at creation"),
            Op::Param(id) => self.params.by_id(*id).clone(),
            Op::Conv2d { stride, pad } => kernels::conv2d(arg(0), arg(1), arg(2), *stride, *pad)?,
            Op::Relu => kernels::relu(arg(0)),
            Op::Sigmoid => kernels::sigmoid(arg(0)),
            Op::MaxPool2 => kernels::maxpool2(arg(0))?,
            Op::Concat => {
                let xs: Vec<_> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                kernels::concat(&xs)?
            }
            Op::Slice { offset, len } => kernels::channel_block(arg(0), *offset, *len),
            Op::UpsampleBilinear { factor } => kernels::upsample_bilinear(arg(0), *factor)?,
            Op::UpsampleLearned { factor } => kernels::upsample_learned(arg(0), arg(1), *factor)?,
            Op::Sum => Tensor::scalar(arg(0).sum()),
            Op::Scale(c) => arg(0).map(|v| v * *c),
            Op::Add => {
                let mut acc = arg(0).clone();
                for i in 1..inputs.len() {
                    if arg(i).dims() != acc.dims() {
                        return Err(Error::ShapeMismatch {
                            op: "add",
                            left: acc.dims(),
                            right: arg(i).dims(),
                        });
                    }
                    acc.axpy(T::one(), arg(i));
                }
                acc
            }
            Op::BalancedBce { target } => Tensor::scalar(kernels::balanced_bce(arg(0), target)?.0),
        })
    }

    /// Re-evaluates every node against the current parameter table.
    pub fn evaluate(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input) {
                continue;
            }
            let value = self.compute(&self.nodes[i].op, &self.nodes[i].inputs)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            inputs: Vec::new(),
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Node reading the named parameter; one node per parameter.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if let Some(&node) = self.param_nodes.get(&id) {
            return Ok(node);
        }
        let node = self.push(Op::Param(id), Vec::new())?;
        self.param_nodes.insert(id, node);
        Ok(node)
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.push(Op::Conv2d { stride, pad }, vec![x, kernel, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, vec![x])
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::MaxPool2, vec![x])
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::Concat, xs.to_vec())
    }

    pub fn slice(&mut self, x: NodeId, sizes: &[usize]) -> Result<Vec<NodeId>> {
        let channels = self.value(x).channels();
        kernels::validate_slice_sizes(channels, sizes)?;
        if sizes.len() == 1 {
            return Ok(vec![x]);
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.push(Op::Slice { offset, len }, vec![x])?);
            offset += len;
        }
        Ok(out)
    }

    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        self.push(Op::UpsampleBilinear { factor }, vec![x])
    }

    pub fn upsample_learned(&mut self, x: NodeId, kernel: NodeId, factor: usize) -> Result<NodeId> {
        self.push(Op::UpsampleLearned { factor }, vec![x, kernel])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![x])
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        self.push(Op::Scale(c), vec![x])
    }

    pub fn add(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::invalid("add", "needs at least one input"));
        }
        self.push(Op::Add, xs.to_vec())
    }

    /// Class-balanced sigmoid cross-entropy of `logits` against a binary target.
    pub fn balanced_bce(&mut self, logits: NodeId, target: Tensor<T>) -> Result<NodeId> {
        self.push(Op::BalancedBce { target }, vec![logits])
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got dims {:?}", loss_value.dims()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.dims(), T::one()));
        let mut param_grads: Vec<Tensor<T>> = (0..self.params.len())
            .map(|id| Tensor::zeros(self.params.by_id(id).dims()))
            .collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.node_backward(node, &g)?;
            for (input, gi) in node.inputs.iter().zip(contributions) {
                let Some(mut gi) = gi else { continue };
                if let Some(fault) = self.fault {
                    if fault.op == node.op.kind() {
                        gi = gi.map(|v| v * T::from_f64_lossy(1.5));
                    }
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(T::one(), &gi),
                    slot @ None => *slot = Some(gi),
                }
            }
            if let Op::Param(id) = node.op {
                param_grads[id].axpy(T::one(), &g);
            }
        }

        Ok(Gradients {
            names: self.params.names().map(str::to_string).collect(),
            grads: param_grads,
        })
    }

    /// Gradient contribution to each input of `node`.
    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let arg = |i: usize| &self.nodes[node.inputs[i].0].value;
        let needs = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        Ok(match &node.op {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Conv2d { stride, pad } => {
                let (gx, gk, gb) = kernels::conv2d_backward(arg(0), arg(1), g, *stride, *pad, needs(0));
                let gb = Tensor::from_vec(arg(2).dims(), gb.into_vec())?;
                vec![gx, Some(gk), Some(gb)]
            }
            Op::Relu => vec![Some(kernels::relu_backward(arg(0), g))],
            Op::Sigmoid => vec![Some(kernels::sigmoid_backward(&node.value, g))],
            Op::MaxPool2 => vec![Some(kernels::maxpool2_backward(arg(0), g))],
            Op::Concat => {
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|i| {
                        let len = self.nodes[i.0].value.channels();
                        let block = kernels::channel_block(g, offset, len);
                        offset += len;
                        Some(block)
                    })
                    .collect()
            }
            Op::Slice { offset, .. } => {
                let mut full = Tensor::zeros(arg(0).dims());
                kernels::add_channel_block(&mut full, *offset, g);
                vec![Some(full)]
            }
            Op::UpsampleBilinear { factor } => {
                vec![Some(kernels::upsample_bilinear_backward(arg(0).dims(), g, *factor))]
            }
            Op::UpsampleLearned { factor } => {
                let (gx, gk) = kernels::upsample_learned_backward(arg(0), arg(1), g, *factor);
                vec![Some(gx), Some(gk)]
            }
            Op::Sum => {
                let s = g.item()?;
                vec![Some(Tensor::full(arg(0).dims(), s))]
            }
            Op::Scale(c) => vec![Some(g.map(|v| v * *c))],
            Op::Add => node.inputs.iter().map(|_| Some(g.clone())).collect(),
            Op::BalancedBce { target } => {
                let s = g.item()?;
                let (_, grad) = kernels::balanced_bce(arg(0), target)?;
                vec![Some(grad.map(|v| v * s))]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_with(name: &str, t: Tensor<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert(name, t);
        p
    }

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut g = Graph::new(params_with("p", Tensor::full([1, 2, 3, 3], 0.3)));
        let p = g.param("p").unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap(), &Tensor::full([1, 2, 3, 3], 1.0));
    }

    #[test]
    fn scaled_sum_gradient_is_constant() {
        let mut g = Graph::new(params_with("p", Tensor::full([2, 1, 2, 2], -1.0)));
        let p = g.param("p").unwrap();
        let s = g.scale(p, 3.0).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap(), &Tensor::full([2, 1, 2, 2], 3.0));
    }

    #[test]
    fn unreferenced_params_get_zero_gradients() {
        let mut params = params_with("used", Tensor::full([1, 1, 1, 2], 1.0));
        params.insert("unused", Tensor::full([1, 3, 1, 1], 1.0));
        let mut g = Graph::new(params);
        let p = g.param("used").unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros([1, 3, 1, 1]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new(params_with("p", Tensor::full([1, 1, 2, 2], 1.0)));
        let p = g.param("p").unwrap();
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new(params_with("p", Tensor::full([1, 1, 1, 3], 2.0)));
        let p = g.param("p").unwrap();
        let twice = g.add(&[p, p]).unwrap();
        let loss = g.sum(twice).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn evaluate_tracks_parameter_changes() {
        let mut g = Graph::new(params_with("p", Tensor::full([1, 1, 1, 2], 1.0)));
        let p = g.param("p").unwrap();
        let loss = g.sum(p).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 2.0);
        g.params_mut().get_mut("p").unwrap().data_mut()[0] = 5.0;
        g.evaluate().unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 6.0);
    }

    #[test]
    fn missing_param_is_named() {
        let mut g = Graph::<f32>::new(ParamSet::new());
        let err = g.param("lsu.x.lambda").unwrap_err();
        assert!(err.to_string().contains("lsu.x.lambda"));
    }
}
