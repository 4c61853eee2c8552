//! Static computation graph with reverse-mode differentiation.
//!
//! A graph is built once (nodes only reference earlier nodes, so the vector
//! order is already topological), then evaluated many times against named
//! input bindings. Gradients are exact up to floating point; the kinked ops
//! (`relu`, `clamp_min`, max reductions) use the subgradient that is zero at
//! the kink, with ties broken toward the first index in scan order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Named tensors bound to graph inputs for one evaluation.
pub type Bindings<'a> = BTreeMap<&'a str, &'a Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    ClampMin(NodeId, f64),
    Relu(NodeId),
    MatVec(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Softmax(NodeId),
    LogSumExp(NodeId),
    Sum(NodeId),
    MaxReduce(NodeId),
    AppendOne(NodeId),
    Reshape(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MaxPool2(NodeId),
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatVec(a, b) | Op::Dot(a, b) => {
                vec![a, b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::ClampMin(a, _)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::LogSumExp(a)
            | Op::Sum(a)
            | Op::MaxReduce(a)
            | Op::AppendOne(a)
            | Op::Reshape(a)
            | Op::MaxPool2(a) => vec![a],
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => vec![input, kernel, bias],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Numerically stable softmax of a slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// Numerically stable log(sum(exp(values))) via the max-shift trick.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let total: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

enum Slot<'a> {
    Missing,
    Ref(&'a Tensor),
    Owned(Tensor),
}

impl<'a> Slot<'a> {
    fn tensor(&self) -> &Tensor {
        match self {
            Slot::Missing => panic!("value read before computation"),
            Slot::Ref(t) => t,
            Slot::Owned(t) => t,
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn check_id(&self, id: NodeId, context: &str) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::InvalidParameter(format!(
                "{context}: node id {id} out of range"
            )));
        }
        Ok(())
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::InvalidParameter(format!(
                "duplicate graph input '{name}'"
            )));
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    fn binary_same_shape(
        &mut self,
        a: NodeId,
        b: NodeId,
        context: &str,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        self.check_id(a, context)?;
        self.check_id(b, context)?;
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                context,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(make(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "Graph::add", Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "Graph::sub", Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "Graph::mul", Op::Mul)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "Graph::neg")?;
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::Neg(a), shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.check_id(a, "Graph::scale")?;
        if !factor.is_finite() {
            return Err(Error::InvalidParameter("non-finite scale factor".into()));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::Scale(a, factor), shape))
    }

    /// Elementwise max(v, floor).
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.check_id(a, "Graph::clamp_min")?;
        if !floor.is_finite() {
            return Err(Error::InvalidParameter("non-finite clamp floor".into()));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::ClampMin(a, floor), shape))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "Graph::relu")?;
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::Relu(a), shape))
    }

    pub fn matvec(&mut self, matrix: NodeId, vector: NodeId) -> Result<NodeId> {
        self.check_id(matrix, "Graph::matvec")?;
        self.check_id(vector, "Graph::matvec")?;
        let (ms, vs) = (self.shape_of(matrix), self.shape_of(vector));
        if ms.len() != 2 || vs.len() != 1 || ms[1] != vs[0] {
            return Err(Error::shape(
                "Graph::matvec",
                format!("matrix {ms:?} vs vector {vs:?}"),
            ));
        }
        let rows = ms[0];
        Ok(self.push(Op::MatVec(matrix, vector), vec![rows]))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a, "Graph::dot")?;
        self.check_id(b, "Graph::dot")?;
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 1 || sa != sb {
            return Err(Error::shape("Graph::dot", format!("{sa:?} vs {sb:?}")));
        }
        Ok(self.push(Op::Dot(a, b), vec![]))
    }

    fn vector_reduce(
        &mut self,
        a: NodeId,
        context: &str,
        rank_one: bool,
        make: impl Fn(NodeId) -> Op,
    ) -> Result<NodeId> {
        self.check_id(a, context)?;
        let shape = self.shape_of(a);
        if rank_one && shape.len() != 1 {
            return Err(Error::shape(context, format!("expected vector, got {shape:?}")));
        }
        if shape.iter().product::<usize>() == 0 {
            return Err(Error::shape(context, "empty operand"));
        }
        Ok(self.push(make(a), vec![]))
    }

    pub fn softmax_node(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "Graph::softmax")?;
        let shape = self.shape_of(a);
        if shape.len() != 1 || shape[0] == 0 {
            return Err(Error::shape(
                "Graph::softmax",
                format!("expected non-empty vector, got {shape:?}"),
            ));
        }
        let shape = shape.to_vec();
        Ok(self.push(Op::Softmax(a), shape))
    }

    pub fn log_sum_exp_node(&mut self, a: NodeId) -> Result<NodeId> {
        self.vector_reduce(a, "Graph::log_sum_exp", true, Op::LogSumExp)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.vector_reduce(a, "Graph::sum", false, Op::Sum)
    }

    pub fn max_reduce(&mut self, a: NodeId) -> Result<NodeId> {
        self.vector_reduce(a, "Graph::max_reduce", false, Op::MaxReduce)
    }

    /// Appends a constant 1.0 coordinate; used to absorb output-layer biases
    /// into the weight matrix so logits are exactly linear in the features.
    pub fn append_one(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "Graph::append_one")?;
        let shape = self.shape_of(a);
        if shape.len() != 1 {
            return Err(Error::shape(
                "Graph::append_one",
                format!("expected vector, got {shape:?}"),
            ));
        }
        let n = shape[0];
        Ok(self.push(Op::AppendOne(a), vec![n + 1]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check_id(a, "Graph::reshape")?;
        let old: usize = self.shape_of(a).iter().product();
        let new: usize = shape.iter().product();
        if old != new {
            return Err(Error::shape(
                "Graph::reshape",
                format!("{:?} -> {:?}", self.shape_of(a), shape),
            ));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec()))
    }

    /// 2-D convolution with valid padding. Input is [in_ch, h, w], kernel
    /// [out_ch, in_ch, kh, kw], bias [out_ch]; output [out_ch, h-kh+1, w-kw+1].
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_id(input, "Graph::conv2d")?;
        self.check_id(kernel, "Graph::conv2d")?;
        self.check_id(bias, "Graph::conv2d")?;
        let (is, ks, bs) = (
            self.shape_of(input).to_vec(),
            self.shape_of(kernel).to_vec(),
            self.shape_of(bias).to_vec(),
        );
        if is.len() != 3 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::shape(
                "Graph::conv2d",
                format!("input {is:?}, kernel {ks:?}, bias {bs:?}"),
            ));
        }
        let (in_ch, h, w) = (is[0], is[1], is[2]);
        let (out_ch, kin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kin != in_ch || kh == 0 || kw == 0 || kh > h || kw > w || bs[0] != out_ch {
            return Err(Error::shape(
                "Graph::conv2d",
                format!("input {is:?} incompatible with kernel {ks:?} / bias {bs:?}"),
            ));
        }
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            vec![out_ch, h - kh + 1, w - kw + 1],
        ))
    }

    /// 2x2 max-pool with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a, "Graph::max_pool2")?;
        let s = self.shape_of(a);
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape(
                "Graph::max_pool2",
                format!("expected [ch, even h, even w], got {s:?}"),
            ));
        }
        let shape = vec![s[0], s[1] / 2, s[2] / 2];
        Ok(self.push(Op::MaxPool2(a), shape))
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) -> Result<()> {
        self.check_id(id, "Graph::mark_output")?;
        if self.outputs.contains_key(name) {
            return Err(Error::InvalidParameter(format!(
                "duplicate graph output '{name}'"
            )));
        }
        self.outputs.insert(name.to_string(), id);
        Ok(())
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.keys().map(String::as_str)
    }

    pub fn input_shape(&self, name: &str) -> Option<&[usize]> {
        self.inputs.get(name).map(|&id| self.shape_of(id))
    }

    pub fn output_shape(&self, name: &str) -> Option<&[usize]> {
        self.outputs.get(name).map(|&id| self.shape_of(id))
    }

    /// Node id of a named input, for extending the graph with new objectives.
    pub fn input_node(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownOutput(name.to_string()))
    }

    fn needed_set(&self, roots: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = roots.to_vec();
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            stack.extend(self.nodes[id].op.operands());
        }
        needed
    }

    fn forward<'a>(&'a self, bindings: &Bindings<'a>, needed: &[bool]) -> Result<Vec<Slot<'a>>> {
        let mut values: Vec<Slot<'a>> = Vec::with_capacity(self.nodes.len());
        for _ in 0..self.nodes.len() {
            values.push(Slot::Missing);
        }
        for id in 0..self.nodes.len() {
            if !needed[id] {
                continue;
            }
            let node = &self.nodes[id];
            let slot = match &node.op {
                Op::Input(name) => {
                    let bound = bindings
                        .get(name.as_str())
                        .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(Error::shape(
                            format!("input '{name}'"),
                            format!("declared {:?}, bound {:?}", node.shape, bound.shape()),
                        ));
                    }
                    Slot::Ref(bound)
                }
                Op::Const(t) => Slot::Ref(t),
                Op::Add(a, b) => {
                    let (x, y) = (values[*a].tensor().data(), values[*b].tensor().data());
                    Slot::Owned(Tensor::from_raw(
                        node.shape.clone(),
                        x.iter().zip(y).map(|(p, q)| p + q).collect(),
                    ))
                }
                Op::Sub(a, b) => {
                    let (x, y) = (values[*a].tensor().data(), values[*b].tensor().data());
                    Slot::Owned(Tensor::from_raw(
                        node.shape.clone(),
                        x.iter().zip(y).map(|(p, q)| p - q).collect(),
                    ))
                }
                Op::Mul(a, b) => {
                    let (x, y) = (values[*a].tensor().data(), values[*b].tensor().data());
                    Slot::Owned(Tensor::from_raw(
                        node.shape.clone(),
                        x.iter().zip(y).map(|(p, q)| p * q).collect(),
                    ))
                }
                Op::Neg(a) => Slot::Owned(values[*a].tensor().map(|v| -v)),
                Op::Scale(a, f) => Slot::Owned(values[*a].tensor().map(|v| v * f)),
                Op::ClampMin(a, floor) => {
                    let floor = *floor;
                    Slot::Owned(values[*a].tensor().map(|v| v.max(floor)))
                }
                Op::Relu(a) => Slot::Owned(values[*a].tensor().map(|v| v.max(0.0))),
                Op::MatVec(m, v) => {
                    let mat = values[*m].tensor();
                    let vec = values[*v].tensor().data();
                    let (rows, cols) = (mat.shape()[0], mat.shape()[1]);
                    let md = mat.data();
                    let mut out = vec![0.0; rows];
                    for r in 0..rows {
                        let row = &md[r * cols..(r + 1) * cols];
                        out[r] = row.iter().zip(vec).map(|(a, b)| a * b).sum();
                    }
                    Slot::Owned(Tensor::from_raw(node.shape.clone(), out))
                }
                Op::Dot(a, b) => {
                    let (x, y) = (values[*a].tensor().data(), values[*b].tensor().data());
                    let s: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    Slot::Owned(Tensor::from_raw(node.shape.clone(), vec![s]))
                }
                Op::Softmax(a) => Slot::Owned(Tensor::from_raw(
                    node.shape.clone(),
                    softmax(values[*a].tensor().data()),
                )),
                Op::LogSumExp(a) => Slot::Owned(Tensor::from_raw(
                    node.shape.clone(),
                    vec![log_sum_exp(values[*a].tensor().data())],
                )),
                Op::Sum(a) => Slot::Owned(Tensor::from_raw(
                    node.shape.clone(),
                    vec![values[*a].tensor().data().iter().sum()],
                )),
                Op::MaxReduce(a) => {
                    let data = values[*a].tensor().data();
                    Slot::Owned(Tensor::from_raw(
                        node.shape.clone(),
                        vec![data[argmax_first(data)]],
                    ))
                }
                Op::AppendOne(a) => {
                    let mut data = values[*a].tensor().data().to_vec();
                    data.push(1.0);
                    Slot::Owned(Tensor::from_raw(node.shape.clone(), data))
                }
                Op::Reshape(a) => Slot::Owned(Tensor::from_raw(
                    node.shape.clone(),
                    values[*a].tensor().data().to_vec(),
                )),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => {
                    let out = conv2d_forward(
                        values[*input].tensor(),
                        values[*kernel].tensor(),
                        values[*bias].tensor(),
                    );
                    Slot::Owned(Tensor::from_raw(node.shape.clone(), out))
                }
                Op::MaxPool2(a) => {
                    let out = max_pool2_forward(values[*a].tensor());
                    Slot::Owned(Tensor::from_raw(node.shape.clone(), out))
                }
            };
            values[id] = slot;
        }
        Ok(values)
    }

    fn check_finite(&self, name: &str, tensor: &Tensor) -> Result<()> {
        if tensor.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("graph output '{name}'")));
        }
        Ok(())
    }

    /// Evaluates the named outputs. Only their ancestor subgraph runs, so
    /// inputs feeding other outputs may stay unbound.
    pub fn evaluate_subset(&self, bindings: &Bindings, names: &[&str]) -> Result<Vec<Tensor>> {
        let ids: Vec<NodeId> = names
            .iter()
            .map(|n| self.output_id(n))
            .collect::<Result<_>>()?;
        let needed = self.needed_set(&ids);
        let values = self.forward(bindings, &needed)?;
        let mut out = Vec::with_capacity(ids.len());
        for (&id, name) in ids.iter().zip(names) {
            let t = values[id].tensor().clone();
            self.check_finite(name, &t)?;
            out.push(t);
        }
        Ok(out)
    }

    /// Evaluates every marked output; all inputs must be bound.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<BTreeMap<String, Tensor>> {
        let names: Vec<&str> = self.outputs.keys().map(String::as_str).collect();
        let values = self.evaluate_subset(bindings, &names)?;
        Ok(names
            .into_iter()
            .map(str::to_string)
            .zip(values)
            .collect())
    }

    /// Reverse-mode gradient of the scalar output `objective` with respect to
    /// the named inputs. Returns the objective value, the gradients (in `wrt`
    /// order), and the values of `also` outputs taken from the same forward
    /// pass.
    pub fn backward(
        &self,
        bindings: &Bindings,
        objective: &str,
        wrt: &[&str],
        also: &[&str],
    ) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
        let out_id = self.output_id(objective)?;
        if !self.nodes[out_id].shape.is_empty() {
            return Err(Error::NonScalarOutput(objective.to_string()));
        }
        let also_ids: Vec<NodeId> = also
            .iter()
            .map(|n| self.output_id(n))
            .collect::<Result<_>>()?;
        let wrt_ids: Vec<NodeId> = wrt
            .iter()
            .map(|n| {
                self.inputs
                    .get(*n)
                    .copied()
                    .ok_or_else(|| Error::InvalidParameter(format!("'{n}' is not a graph input")))
            })
            .collect::<Result<_>>()?;

        let mut roots = also_ids.clone();
        roots.push(out_id);
        let needed = self.needed_set(&roots);
        let values = self.forward(bindings, &needed)?;

        let value = values[out_id].tensor().item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("graph output '{objective}'")));
        }

        // Adjoints only flow through ancestors of the objective.
        let grad_needed = self.needed_set(&[out_id]);
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[out_id] = Some(vec![1.0]);

        for id in (0..=out_id).rev() {
            if !grad_needed[id] {
                continue;
            }
            let Some(adj) = adjoints[id].clone() else {
                continue;
            };
            self.accumulate(id, &adj, &values, &mut adjoints);
        }

        let mut grads = Vec::with_capacity(wrt_ids.len());
        for (&id, name) in wrt_ids.iter().zip(wrt) {
            let shape = self.nodes[id].shape.clone();
            let tensor = match adjoints[id].take() {
                Some(data) => Tensor::new(shape, data)
                    .map_err(|_| Error::NonFinite(format!("gradient wrt '{name}'")))?,
                None => Tensor::zeros(&shape),
            };
            grads.push(tensor);
        }
        let extra = also_ids
            .iter()
            .zip(also)
            .map(|(&id, name)| {
                let t = values[id].tensor().clone();
                self.check_finite(name, &t)?;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((value, grads, extra))
    }

    pub fn gradient(&self, bindings: &Bindings, objective: &str, wrt: &[&str]) -> Result<Vec<Tensor>> {
        let (_, grads, _) = self.backward(bindings, objective, wrt, &[])?;
        Ok(grads)
    }

    fn accumulate(
        &self,
        id: NodeId,
        adj: &[f64],
        values: &[Slot],
        adjoints: &mut [Option<Vec<f64>>],
    ) {
        macro_rules! adj_of {
            ($target:expr) => {{
                let target: NodeId = $target;
                if adjoints[target].is_none() {
                    adjoints[target] = Some(vec![0.0; values[target].tensor().len()]);
                }
                adjoints[target].as_mut().unwrap()
            }};
        }

        match &self.nodes[id].op {
            Op::Input(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                for (slot, v) in adj_of!(*a).iter_mut().zip(adj) {
                    *slot += v;
                }
                for (slot, v) in adj_of!(*b).iter_mut().zip(adj) {
                    *slot += v;
                }
            }
            Op::Sub(a, b) => {
                for (slot, v) in adj_of!(*a).iter_mut().zip(adj) {
                    *slot += v;
                }
                for (slot, v) in adj_of!(*b).iter_mut().zip(adj) {
                    *slot -= v;
                }
            }
            Op::Mul(a, b) => {
                let bv: Vec<f64> = values[*b].tensor().data().to_vec();
                let av: Vec<f64> = values[*a].tensor().data().to_vec();
                for ((slot, v), w) in adj_of!(*a).iter_mut().zip(adj).zip(&bv) {
                    *slot += v * w;
                }
                for ((slot, v), w) in adj_of!(*b).iter_mut().zip(adj).zip(&av) {
                    *slot += v * w;
                }
            }
            Op::Neg(a) => {
                for (slot, v) in adj_of!(*a).iter_mut().zip(adj) {
                    *slot -= v;
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                for (slot, v) in adj_of!(*a).iter_mut().zip(adj) {
                    *slot += f * v;
                }
            }
            Op::ClampMin(a, floor) => {
                let floor = *floor;
                let xs: Vec<f64> = values[*a].tensor().data().to_vec();
                for ((slot, v), x) in adj_of!(*a).iter_mut().zip(adj).zip(&xs) {
                    if *x > floor {
                        *slot += v;
                    }
                }
            }
            Op::Relu(a) => {
                let xs: Vec<f64> = values[*a].tensor().data().to_vec();
                for ((slot, v), x) in adj_of!(*a).iter_mut().zip(adj).zip(&xs) {
                    if *x > 0.0 {
                        *slot += v;
                    }
                }
            }
            Op::MatVec(m, v) => {
                let mat = values[*m].tensor();
                let (rows, cols) = (mat.shape()[0], mat.shape()[1]);
                let md: Vec<f64> = mat.data().to_vec();
                let vd: Vec<f64> = values[*v].tensor().data().to_vec();
                {
                    let dm = adj_of!(*m);
                    for r in 0..rows {
                        for c in 0..cols {
                            dm[r * cols + c] += adj[r] * vd[c];
                        }
                    }
                }
                {
                    let dv = adj_of!(*v);
                    for r in 0..rows {
                        let row = &md[r * cols..(r + 1) * cols];
                        for (slot, w) in dv.iter_mut().zip(row) {
                            *slot += adj[r] * w;
                        }
                    }
                }
            }
            Op::Dot(a, b) => {
                let s = adj[0];
                let bv: Vec<f64> = values[*b].tensor().data().to_vec();
                let av: Vec<f64> = values[*a].tensor().data().to_vec();
                for (slot, w) in adj_of!(*a).iter_mut().zip(&bv) {
                    *slot += s * w;
                }
                for (slot, w) in adj_of!(*b).iter_mut().zip(&av) {
                    *slot += s * w;
                }
            }
            Op::Softmax(a) => {
                let y: Vec<f64> = values[id].tensor().data().to_vec();
                let inner: f64 = adj.iter().zip(&y).map(|(d, p)| d * p).sum();
                for ((slot, d), p) in adj_of!(*a).iter_mut().zip(adj).zip(&y) {
                    *slot += p * (d - inner);
                }
            }
            Op::LogSumExp(a) => {
                let s = adj[0];
                let lse = values[id].tensor().data()[0];
                let xs: Vec<f64> = values[*a].tensor().data().to_vec();
                for (slot, x) in adj_of!(*a).iter_mut().zip(&xs) {
                    *slot += s * (x - lse).exp();
                }
            }
            Op::Sum(a) => {
                let s = adj[0];
                for slot in adj_of!(*a).iter_mut() {
                    *slot += s;
                }
            }
            Op::MaxReduce(a) => {
                let winner = argmax_first(values[*a].tensor().data());
                adj_of!(*a)[winner] += adj[0];
            }
            Op::AppendOne(a) => {
                for (slot, v) in adj_of!(*a).iter_mut().zip(adj) {
                    *slot += v;
                }
            }
            Op::Reshape(a) => {
                for (slot, v) in adj_of!(*a).iter_mut().zip(adj) {
                    *slot += v;
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let x = values[*input].tensor();
                let k = values[*kernel].tensor();
                let out_shape = &self.nodes[id].shape;
                // The three operands are distinct nodes (their ranks differ),
                // so taking all three buffers at once is safe.
                let mut dx = adjoints[*input].take().unwrap_or_else(|| vec![0.0; x.len()]);
                let mut dk = adjoints[*kernel]
                    .take()
                    .unwrap_or_else(|| vec![0.0; k.len()]);
                let mut db = adjoints[*bias]
                    .take()
                    .unwrap_or_else(|| vec![0.0; values[*bias].tensor().len()]);
                conv2d_backward(x, k, out_shape, adj, &mut dx, &mut dk, &mut db);
                adjoints[*input] = Some(dx);
                adjoints[*kernel] = Some(dk);
                adjoints[*bias] = Some(db);
            }
            Op::MaxPool2(a) => {
                let winners = max_pool2_argmax(values[*a].tensor());
                let dx = adj_of!(*a);
                for (flat_out, &src) in winners.iter().enumerate() {
                    dx[src] += adj[flat_out];
                }
            }
        }
    }
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (in_ch, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (out_ch, _, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let mut out = vec![0.0; out_ch * oh * ow];
    for oc in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..in_ch {
                    for ky in 0..kh {
                        let xrow = (ic * h + oy + ky) * w + ox;
                        let krow = ((oc * in_ch + ic) * kh + ky) * kw;
                        for kx in 0..kw {
                            acc += x[xrow + kx] * k[krow + kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    out_shape: &[usize],
    adj: &[f64],
    d_input: &mut [f64],
    d_kernel: &mut [f64],
    d_bias: &mut [f64],
) {
    let (in_ch, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (out_ch, kh, kw) = (out_shape[0], kernel.shape()[2], kernel.shape()[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let x = input.data();
    let k = kernel.data();

    for oc in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = adj[(oc * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                d_bias[oc] += g;
                for ic in 0..in_ch {
                    for ky in 0..kh {
                        let xrow = (ic * h + oy + ky) * w + ox;
                        let krow = ((oc * in_ch + ic) * kh + ky) * kw;
                        for kx in 0..kw {
                            d_input[xrow + kx] += g * k[krow + kx];
                            d_kernel[krow + kx] += g * x[xrow + kx];
                        }
                    }
                }
            }
        }
    }
}

fn max_pool2_forward(input: &Tensor) -> Vec<f64> {
    let x = input.data();
    max_pool2_argmax(input)
        .into_iter()
        .map(|src| x[src])
        .collect()
}

/// Flat source index of each pooled output; ties go to the first entry in
/// row-major window scan order.
fn max_pool2_argmax(input: &Tensor) -> Vec<usize> {
    let (ch, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(ch * oh * ow);
    for c in 0..ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (c * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (c * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(best);
            }
        }
    }
    out
}
