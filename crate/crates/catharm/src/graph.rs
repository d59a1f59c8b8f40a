//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape of operation records in topological
//! order: builder methods return [`NodeId`]s that later ops consume, so a
//! node's inputs always precede it. `forward` evaluates the tape and caches
//! every intermediate; `backward` walks it in reverse, accumulating gradients
//! of the scalar output into every parameter. Parameters live in the graph
//! and keep their values across forward passes; `set_param` mutates them
//! between optimizer steps.
//!
//! The op set is exactly what the models here need: matmul, add (with row
//! broadcast), sub, scalar scale, tanh/relu/sigmoid, transpose, row
//! concat/gather, squared Frobenius norm, fused softmax-cross-entropy
//! (log-sum-exp stabilized) and a fused biased RBF-MMD node.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("tensor error in node {node}: {source}")]
    Tensor {
        node: usize,
        #[source]
        source: TensorError,
    },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: String },
    #[error("unknown input '{0}'")]
    UnknownInput(String),
    #[error("input '{name}' has shape {got:?}, declared {declared:?}")]
    InputShape {
        name: String,
        declared: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing value for input '{0}'")]
    MissingInput(String),
    #[error("forward has not run on this graph")]
    ForwardNotRun,
    #[error("backward requires a scalar output, got shape {0:?}")]
    OutputNotScalar(Vec<usize>),
    #[error("graph has no output node")]
    NoOutput,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bandwidth selection for the fused RBF-MMD node.
///
/// `Median` recomputes sigma from the pooled pairwise distances at every
/// forward pass and treats it as a constant in backward (stop-gradient).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthPolicy {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Input { name: String, shape: Vec<usize> },
    Param { name: String },
    Const,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    FrobeniusSq(NodeId),
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    MmdRbf { a: NodeId, b: NodeId, bandwidth: BandwidthPolicy },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Transpose(..) => "transpose",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::FrobeniusSq(..) => "frobenius_sq",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::MmdRbf { .. } => "mmd_rbf",
        }
    }
}

/// Tape of op records plus cached values and gradient slots.
#[derive(Debug, Clone)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
    ran_forward: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
            output: None,
            ran_forward: false,
        }
    }

    fn push(&mut self, op: Op, value: Option<Tensor>) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        id
    }

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                shape,
            },
            None,
        );
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, GraphError> {
        if self.params.contains_key(name) {
            return Err(GraphError::DuplicateParam(name.to_string()));
        }
        let id = self.push(
            Op::Param {
                name: name.to_string(),
            },
            Some(value),
        );
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, Some(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b), None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b), None)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c), None)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a), None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a), None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a), None)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a), None)
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatRows(parts), None)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::GatherRows(a, indices), None)
    }

    pub fn frobenius_sq(&mut self, a: NodeId) -> NodeId {
        self.push(Op::FrobeniusSq(a), None)
    }

    /// Mean cross-entropy of row-wise softmax against integer labels,
    /// computed with the log-sum-exp trick.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, labels }, None)
    }

    /// Biased (V-statistic) squared MMD between the row sets of two matrices
    /// under an RBF kernel.
    pub fn mmd_rbf(&mut self, a: NodeId, b: NodeId, bandwidth: BandwidthPolicy) -> NodeId {
        self.push(Op::MmdRbf { a, b, bandwidth }, None)
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output_node(&self) -> Option<NodeId> {
        self.output
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn param_value(&self, name: &str) -> Result<&Tensor, GraphError> {
        let id = self
            .params
            .get(name)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))?;
        Ok(self.values[id.0].as_ref().expect("param value present"))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), GraphError> {
        let id = self
            .params
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))?;
        self.values[id.0] = Some(value);
        self.ran_forward = false;
        Ok(())
    }

    /// Cached value of any node after `forward`.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values[id.0].as_ref()
    }

    /// Gradient of any node after `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Evaluates the tape with the given named inputs, returning the output
    /// tensor. Every intermediate is cached for `backward`.
    pub fn forward(&mut self, inputs: &[(&str, Tensor)]) -> Result<Tensor, GraphError> {
        let output = self.output.ok_or(GraphError::NoOutput)?;
        // Bind inputs, validating names and declared shapes.
        let mut bound: BTreeMap<usize, Tensor> = BTreeMap::new();
        for (name, t) in inputs {
            let id = self
                .inputs
                .get(*name)
                .ok_or_else(|| GraphError::UnknownInput(name.to_string()))?;
            if let Op::Input { shape, .. } = &self.ops[id.0] {
                if shape != t.shape() {
                    return Err(GraphError::InputShape {
                        name: name.to_string(),
                        declared: shape.clone(),
                        got: t.shape().to_vec(),
                    });
                }
            }
            bound.insert(id.0, t.clone());
        }
        for (name, id) in &self.inputs {
            if !bound.contains_key(&id.0) {
                return Err(GraphError::MissingInput(name.clone()));
            }
        }

        for i in 0..self.ops.len() {
            let value = match &self.ops[i] {
                Op::Input { .. } => bound.remove(&i).expect("bound above"),
                Op::Param { .. } | Op::Const => {
                    // persistent leaves: value already present
                    continue;
                }
                Op::MatMul(a, b) => {
                    tensor::matmul(self.val(*a), self.val(*b)).map_err(|e| self.terr(i, e))?
                }
                Op::Add(a, b) => {
                    tensor::add(self.val(*a), self.val(*b)).map_err(|e| self.terr(i, e))?
                }
                Op::Sub(a, b) => {
                    tensor::sub(self.val(*a), self.val(*b)).map_err(|e| self.terr(i, e))?
                }
                Op::Scale(a, c) => tensor::scale(self.val(*a), *c),
                Op::Tanh(a) => tensor::tanh(self.val(*a)),
                Op::Relu(a) => tensor::relu(self.val(*a)),
                Op::Sigmoid(a) => tensor::sigmoid(self.val(*a)),
                Op::Transpose(a) => tensor::transpose(self.val(*a)).map_err(|e| self.terr(i, e))?,
                Op::ConcatRows(parts) => {
                    let vals: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                    tensor::concat_rows(&vals).map_err(|e| self.terr(i, e))?
                }
                Op::GatherRows(a, idx) => {
                    tensor::gather_rows(self.val(*a), idx).map_err(|e| self.terr(i, e))?
                }
                Op::FrobeniusSq(a) => Tensor::scalar(tensor::frobenius_sq(self.val(*a))),
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    softmax_xent_forward(self.val(*logits), labels)
                        .map_err(|e| match e {
                            XentError::Label { label, classes } => {
                                GraphError::LabelOutOfRange { label, classes }
                            }
                        })?
                }
                Op::MmdRbf { a, b, bandwidth } => {
                    Tensor::scalar(mmd_rbf_forward(self.val(*a), self.val(*b), *bandwidth).0)
                }
            };
            if value.check_finite().is_err() {
                return Err(GraphError::NonFinite {
                    node: i,
                    op: self.ops[i].name().to_string(),
                });
            }
            self.values[i] = Some(value);
        }
        self.ran_forward = true;
        Ok(self.values[output.0].clone().expect("output evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("topological order")
    }

    fn terr(&self, node: usize, source: TensorError) -> GraphError {
        GraphError::Tensor { node, source }
    }

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(existing) => {
                let sum = tensor::add(existing, &g).expect("gradient shapes agree");
                *existing = sum;
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradients of the scalar output with respect to every parameter.
    /// Accumulation order is the reverse of node creation order, so results
    /// are bit-reproducible.
    pub fn backward(&mut self) -> Result<BTreeMap<String, Tensor>, GraphError> {
        if !self.ran_forward {
            return Err(GraphError::ForwardNotRun);
        }
        let output = self.output.ok_or(GraphError::NoOutput)?;
        let out_val = self.values[output.0].as_ref().ok_or(GraphError::ForwardNotRun)?;
        if !out_val.is_scalar() {
            return Err(GraphError::OutputNotScalar(out_val.shape().to_vec()));
        }

        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.ops.len()).rev() {
            let Some(up) = self.grads[i].clone() else {
                continue;
            };
            match self.ops[i].clone() {
                Op::Input { .. } | Op::Param { .. } | Op::Const => {}
                Op::MatMul(a, b) => {
                    let bt = tensor::transpose(self.val(b)).expect("matrix");
                    let ga = tensor::matmul(&up, &bt).expect("shapes agree");
                    let at = tensor::transpose(self.val(a)).expect("matrix");
                    let gb = tensor::matmul(&at, &up).expect("shapes agree");
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, up.clone());
                    let bshape = self.val(b).shape().to_vec();
                    if bshape == up.shape() {
                        self.accumulate(b, up);
                    } else {
                        // row broadcast: sum the upstream gradient over rows
                        let cols = up.cols();
                        let mut acc = vec![0.0; cols];
                        for row in up.data().chunks(cols) {
                            for (s, &v) in acc.iter_mut().zip(row.iter()) {
                                *s += v;
                            }
                        }
                        self.accumulate(b, Tensor::from_raw(bshape, acc));
                    }
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, up.clone());
                    self.accumulate(b, tensor::scale(&up, -1.0));
                }
                Op::Scale(a, c) => self.accumulate(a, tensor::scale(&up, c)),
                Op::Tanh(a) => {
                    let y = self.val(NodeId(i)).clone();
                    let g = elementwise3(&up, &y, |u, yv| u * (1.0 - yv * yv));
                    self.accumulate(a, g);
                }
                Op::Relu(a) => {
                    let x = self.val(a).clone();
                    let g = elementwise3(&up, &x, |u, xv| if xv > 0.0 { u } else { 0.0 });
                    self.accumulate(a, g);
                }
                Op::Sigmoid(a) => {
                    let y = self.val(NodeId(i)).clone();
                    let g = elementwise3(&up, &y, |u, yv| u * yv * (1.0 - yv));
                    self.accumulate(a, g);
                }
                Op::Transpose(a) => {
                    self.accumulate(a, tensor::transpose(&up).expect("matrix"));
                }
                Op::ConcatRows(parts) => {
                    let cols = up.cols();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.val(p).rows();
                        let chunk = up.data()[offset * cols..(offset + rows) * cols].to_vec();
                        let shape = self.val(p).shape().to_vec();
                        self.accumulate(p, Tensor::from_raw(shape, chunk));
                        offset += rows;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let shape = self.val(a).shape().to_vec();
                    let cols = self.val(a).cols();
                    let mut acc = vec![0.0; self.val(a).len()];
                    for (pos, &r) in idx.iter().enumerate() {
                        let urow = &up.data()[pos * cols..(pos + 1) * cols];
                        for (s, &v) in acc[r * cols..(r + 1) * cols].iter_mut().zip(urow) {
                            *s += v;
                        }
                    }
                    self.accumulate(a, Tensor::from_raw(shape, acc));
                }
                Op::FrobeniusSq(a) => {
                    let u = up.scalar_value();
                    let g = tensor::scale(self.val(a), 2.0 * u);
                    self.accumulate(a, g);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let u = up.scalar_value();
                    let g = softmax_xent_backward(self.val(logits), &labels, u);
                    self.accumulate(logits, g);
                }
                Op::MmdRbf { a, b, bandwidth } => {
                    let u = up.scalar_value();
                    let (ga, gb) = mmd_rbf_backward(self.val(a), self.val(b), bandwidth, u);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let shape = self.values[id.0].as_ref().expect("param").shape().to_vec();
            let g = self.grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(shape));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn elementwise3(up: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = up
        .data()
        .iter()
        .zip(other.data().iter())
        .map(|(&u, &o)| f(u, o))
        .collect();
    Tensor::from_raw(up.shape().to_vec(), data)
}

enum XentError {
    Label { label: usize, classes: usize },
}

fn softmax_xent_forward(logits: &Tensor, labels: &[usize]) -> Result<Tensor, XentError> {
    let (rows, cols) = (logits.rows(), logits.cols());
    debug_assert_eq!(rows, labels.len());
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(XentError::Label {
                label: y,
                classes: cols,
            });
        }
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(Tensor::scalar(total / rows as f64))
}

fn softmax_xent_backward(logits: &Tensor, labels: &[usize], up: f64) -> Tensor {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut g = vec![0.0; rows * cols];
    let scale = up / rows as f64;
    for (r, &y) in labels.iter().enumerate() {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        for c in 0..cols {
            let p = (row[c] - max).exp() / denom;
            g[r * cols + c] = scale * (p - if c == y { 1.0 } else { 0.0 });
        }
    }
    Tensor::from_raw(logits.shape().to_vec(), g)
}

/// Softmax of each row, as plain tensor math (inference path).
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..cols {
            let e = (row[c] - max).exp();
            out[r * cols + c] = e;
            denom += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= denom;
        }
    }
    Tensor::from_raw(vec![rows, cols], out)
}

/// Median of the pooled pairwise euclidean distances of the rows of A and B,
/// the usual RBF bandwidth heuristic. Falls back to 1.0 when every distance
/// is zero.
pub fn median_pairwise_distance(a: &Tensor, b: &Tensor) -> f64 {
    let mut dists = Vec::new();
    let pool = [a, b];
    let offsets = [0usize, a.rows()];
    for (pi, p) in pool.iter().enumerate() {
        for (qi, q) in pool.iter().enumerate() {
            for i in 0..p.rows() {
                for j in 0..q.rows() {
                    let gi = offsets[pi] + i;
                    let gj = offsets[qi] + j;
                    if gi < gj {
                        dists.push(tensor::row_sqdist(p, i, q, j).sqrt());
                    }
                }
            }
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

pub(crate) fn mmd_rbf_forward(a: &Tensor, b: &Tensor, bw: BandwidthPolicy) -> (f64, f64) {
    let sigma = match bw {
        BandwidthPolicy::Fixed(s) => s,
        BandwidthPolicy::Median => median_pairwise_distance(a, b),
    };
    let inv = 1.0 / (2.0 * sigma * sigma);
    let (na, nb) = (a.rows() as f64, b.rows() as f64);
    let mut kaa = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.rows() {
            kaa += (-tensor::row_sqdist(a, i, a, j) * inv).exp();
        }
    }
    let mut kbb = 0.0;
    for i in 0..b.rows() {
        for j in 0..b.rows() {
            kbb += (-tensor::row_sqdist(b, i, b, j) * inv).exp();
        }
    }
    let mut kab = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            kab += (-tensor::row_sqdist(a, i, b, j) * inv).exp();
        }
    }
    let v = kaa / (na * na) + kbb / (nb * nb) - 2.0 * kab / (na * nb);
    // The V-statistic is nonnegative; clamp away float dust for the A==B case.
    (v.max(0.0), sigma)
}

fn mmd_rbf_backward(a: &Tensor, b: &Tensor, bw: BandwidthPolicy, up: f64) -> (Tensor, Tensor) {
    let sigma = match bw {
        BandwidthPolicy::Fixed(s) => s,
        BandwidthPolicy::Median => median_pairwise_distance(a, b),
    };
    let inv = 1.0 / (2.0 * sigma * sigma);
    let sig2 = sigma * sigma;
    let (na, nb) = (a.rows() as f64, b.rows() as f64);
    let cols = a.cols();
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];

    // d k(x,y) / d x = -k(x,y) (x - y) / sigma^2
    for i in 0..a.rows() {
        for j in 0..a.rows() {
            let k = (-tensor::row_sqdist(a, i, a, j) * inv).exp();
            let w = -2.0 * k / (na * na * sig2); // both (i,j) and (j,i) hit row i
            for c in 0..cols {
                let diff = a.get(i, c) - a.get(j, c);
                ga[i * cols + c] += w * diff;
            }
        }
    }
    for i in 0..b.rows() {
        for j in 0..b.rows() {
            let k = (-tensor::row_sqdist(b, i, b, j) * inv).exp();
            let w = -2.0 * k / (nb * nb * sig2);
            for c in 0..cols {
                let diff = b.get(i, c) - b.get(j, c);
                gb[i * cols + c] += w * diff;
            }
        }
    }
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let k = (-tensor::row_sqdist(a, i, b, j) * inv).exp();
            let w = 2.0 * k / (na * nb * sig2);
            for c in 0..cols {
                let diff = a.get(i, c) - b.get(j, c);
                ga[i * cols + c] += w * diff;
                gb[j * cols + c] -= w * diff;
            }
        }
    }
    for v in ga.iter_mut() {
        *v *= up;
    }
    for v in gb.iter_mut() {
        *v *= up;
    }
    (
        Tensor::from_raw(a.shape().to_vec(), ga),
        Tensor::from_raw(b.shape().to_vec(), gb),
    )
}

/// Per-parameter result of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub max_rel_err: f64,
    pub checked_entries: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }
}

/// Compares `backward` against central finite differences on every parameter
/// entry (seeded subsample above 10^4 entries per parameter).
pub fn grad_check(
    graph: &mut Graph,
    inputs: &[(&str, Tensor)],
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport, GraphError> {
    use rand::SeedableRng;
    use rand::seq::index::sample;

    const SUBSAMPLE_THRESHOLD: usize = 10_000;
    const SUBSAMPLE_SIZE: usize = 1_024;
    let h = 1e-5;

    graph.forward(inputs)?;
    let analytic = graph.backward()?;

    let mut entries = Vec::new();
    let names = graph.param_names();
    for name in names {
        let base = graph.param_value(&name)?.clone();
        let n = base.len();
        let picks: Vec<usize> = if n > SUBSAMPLE_THRESHOLD {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ fnv64(name.as_bytes()));
            let mut v: Vec<usize> = sample(&mut rng, n, SUBSAMPLE_SIZE).into_iter().collect();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };

        let ag = &analytic[&name];
        let mut max_rel: f64 = 0.0;
        for &k in &picks {
            let mut plus = base.clone();
            plus.data_mut()[k] += h;
            graph.set_param(&name, plus)?;
            let fp = graph.forward(inputs)?.scalar_value();

            let mut minus = base.clone();
            minus.data_mut()[k] -= h;
            graph.set_param(&name, minus)?;
            let fm = graph.forward(inputs)?.scalar_value();

            let numeric = (fp - fm) / (2.0 * h);
            let a = ag.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
        graph.set_param(&name, base)?;
        entries.push(GradCheckEntry {
            pass: max_rel <= tolerance,
            max_rel_err: max_rel,
            checked_entries: picks.len(),
            param: name,
        });
    }
    // restore caches to the unperturbed point
    graph.forward(inputs)?;
    graph.backward()?;
    Ok(GradCheckReport { entries, tolerance })
}

pub(crate) fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
