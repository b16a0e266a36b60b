//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node, so node ids are a
//! topological order by construction. A graph is built for one forward pass
//! and dropped afterwards.

use super::params::{ParamGrads, ParamId, ParamSet};
use super::tensor::TensorValue;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds with their static arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Elementwise sum of two equally shaped tensors.
    Add,
    /// Adds a vector of length `C` to every length-`C` row of the last axis.
    AddBias,
    /// Elementwise product of two equally shaped tensors.
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    /// `(N, Cin, H, W) * (Cout, Cin, K, K) [+ bias (Cout)]`, valid padding, stride 1.
    Conv2d,
    /// 2x2 max pooling with stride 2 over the last two axes of a 4-D tensor.
    MaxPool2,
    Tanh,
    Relu,
    SoftmaxLast,
    Log,
    Reshape(Vec<usize>),
    Sum,
    Mean,
    /// Mean softmax cross-entropy of `(R, C)` logits against one label per row.
    CrossEntropy(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2 => "max_pool2",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::SoftmaxLast => "softmax",
            OpKind::Log => "log",
            OpKind::Reshape(_) => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::CrossEntropy(_) => "cross_entropy",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Tanh(NodeId),
    Relu(NodeId),
    SoftmaxLast(NodeId),
    Log(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: TensorValue,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Deliberate backward-pass corruption, used to show that gradient checks catch bugs.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    TanhBackwardScale(f64),
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    differentiated: Vec<NodeId>,
    fault: Option<Fault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &TensorValue {
        &self.nodes[id.0].value
    }

    /// Clears the record of completed backward passes.
    pub fn reset(&mut self) {
        self.differentiated.clear();
    }

    fn push(&mut self, op: Op, value: TensorValue, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite output from {} (node {})",
                op_name(&op),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: TensorValue) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: params.value(id).clone(),
            requires_grad: true,
            param: Some(id),
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Generic entry point: applies `kind` to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            OpKind::Add | OpKind::AddBias | OpKind::Mul | OpKind::MatMul => 2,
            OpKind::Conv2d => {
                if inputs.len() == 2 || inputs.len() == 3 {
                    inputs.len()
                } else {
                    3
                }
            }
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::config(format!(
                "{} takes {arity} inputs, got {}",
                kind.name(),
                inputs.len()
            )));
        }
        match kind {
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::AddBias => self.add_bias(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Scale(c) => self.scale(inputs[0], c),
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Transpose => self.transpose(inputs[0]),
            OpKind::Conv2d => self.conv2d(inputs[0], inputs[1], inputs.get(2).copied()),
            OpKind::MaxPool2 => self.max_pool2(inputs[0]),
            OpKind::Tanh => self.tanh(inputs[0]),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::SoftmaxLast => self.softmax(inputs[0]),
            OpKind::Log => self.log(inputs[0]),
            OpKind::Reshape(shape) => self.reshape(inputs[0], &shape),
            OpKind::Sum => self.sum(inputs[0]),
            OpKind::Mean => self.mean(inputs[0]),
            OpKind::CrossEntropy(labels) => self.cross_entropy(inputs[0], &labels),
        }
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::config(format!(
                "{op}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out, self.rg(&[a, b]))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let c = *xv.shape().last().unwrap();
        if bv.ndim() != 1 || bv.len() != c {
            return Err(Error::config(format!(
                "add_bias: bias shape {:?} does not match last axis of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(Op::AddBias(x, bias), out, self.rg(&[x, bias]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = TensorValue::new(self.value(a).shape().to_vec(), data)?;
        self.push(Op::Mul(a, b), out, self.rg(&[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let out = TensorValue::new(av.shape().to_vec(), data)?;
        self.push(Op::Scale(a, c), out, self.rg(&[a]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::config(format!(
                "matmul: shapes {:?} and {:?} do not conform",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let out = TensorValue::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), out, self.rg(&[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        let out = TensorValue::new(vec![c, r], kernels::transpose(self.value(a).data(), r, c))?;
        self.push(Op::Transpose(a), out, self.rg(&[a]))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId> {
        let (n, cin, h, w) = self.value(input).dims4()?;
        let (cout, cin2, kh, kw) = self.value(weight).dims4()?;
        if cin != cin2 || kh != kw || kh > h || kw > w {
            return Err(Error::config(format!(
                "conv2d: input {:?} and kernel {:?} do not conform",
                self.value(input).shape(),
                self.value(weight).shape()
            )));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [cout] {
                return Err(Error::config(format!(
                    "conv2d: bias shape {bs:?}, expected [{cout}]"
                )));
            }
        }
        let geom = kernels::ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = TensorValue::new(vec![n, cout, geom.oh(), geom.ow()], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            out,
            rg,
        )
    }

    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::config(format!(
                "max_pool2: spatial size {h}x{w} is smaller than the 2x2 window"
            )));
        }
        let (out, argmax) = kernels::max_pool2(self.value(input).data(), n * c, h, w);
        let out = TensorValue::new(vec![n, c, h / 2, w / 2], out)?;
        self.push(Op::MaxPool2 { input, argmax }, out, self.rg(&[input]))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let av = self.value(a);
        let out = TensorValue::new(
            av.shape().to_vec(),
            av.data().iter().map(|&x| f(x)).collect(),
        )?;
        self.push(op, out, self.rg(&[a]))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let c = *av.shape().last().unwrap();
        let mut out = av.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            kernels::softmax_in_place(row);
        }
        self.push(Op::SoftmaxLast(a), out, self.rg(&[a]))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).reshaped(shape)?;
        self.push(Op::Reshape(a), out, self.rg(&[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().fold(0.0, |acc, x| acc + x);
        self.push(Op::Sum(a), TensorValue::scalar(s), self.rg(&[a]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let s = av.data().iter().fold(0.0, |acc, x| acc + x) / av.len() as f64;
        self.push(Op::Mean(a), TensorValue::scalar(s), self.rg(&[a]))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (r, c) = self.value(logits).dims2()?;
        if labels.len() != r {
            return Err(Error::config(format!(
                "cross_entropy: {} labels for {r} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let x = self.value(logits).data();
        let mut probs = x.to_vec();
        let mut total = 0.0;
        for (row, (p, &y)) in x.chunks_exact(c).zip(probs.chunks_exact_mut(c).zip(labels)) {
            total += kernels::nll_row(row, y);
            kernels::softmax_in_place(p);
        }
        let loss = total / r as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            TensorValue::scalar(loss),
            rg,
        )
    }

    /// Gradient of the scalar `loss` with respect to every parameter in
    /// `params`. Parameters the loss does not reach get zero gradients.
    ///
    /// Each loss node may be differentiated once until [`Graph::reset`].
    pub fn backward(&mut self, loss: NodeId, params: &ParamSet) -> Result<ParamGrads> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage(format!("node {} does not exist", loss.0)));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        if self.differentiated.contains(&loss) {
            return Err(Error::usage(format!(
                "backward already ran from node {} (call reset first)",
                loss.0
            )));
        }
        self.differentiated.push(loss);

        let mut grads: Vec<Option<TensorValue>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(TensorValue::filled(self.value(loss).shape(), 1.0));
        let mut out = ParamGrads::empty(params.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                if pid.0 >= params.len() {
                    return Err(Error::usage(format!(
                        "graph references parameter {} outside the given set",
                        pid.0
                    )));
                }
                out.accumulate(pid, &g);
                continue;
            }
            for (input, contrib) in self.input_grads(idx, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (id, p) in params.iter() {
            if out.get(id).is_none() {
                out.set(id, TensorValue::zeros(p.value.shape()));
            }
        }
        Ok(out)
    }

    /// Gradient contributions of node `idx` to those of its inputs that need one.
    fn input_grads(&self, idx: usize, g: &TensorValue) -> Result<Vec<(NodeId, TensorValue)>> {
        let node = &self.nodes[idx];
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut res = Vec::with_capacity(3);
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if needs(id) {
                        res.push((id, g.clone()));
                    }
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    res.push((*x, g.clone()));
                }
                if needs(*b) {
                    let c = self.value(*b).len();
                    let mut gb = vec![0.0; c];
                    for row in gd.chunks_exact(c) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    res.push((*b, TensorValue::new(vec![c], gb)?));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    res.push((*a, TensorValue::new(av.shape().to_vec(), d)?));
                }
                if needs(*b) {
                    let d = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    res.push((*b, TensorValue::new(bv.shape().to_vec(), d)?));
                }
            }
            Op::Scale(a, c) => {
                res.push((
                    *a,
                    TensorValue::new(g.shape().to_vec(), gd.iter().map(|v| v * c).collect())?,
                ));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt(gd, self.value(*b).data(), &mut ga, m, n, k);
                    res.push((*a, TensorValue::new(vec![m, k], ga)?));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn(self.value(*a).data(), gd, &mut gb, m, k, n);
                    res.push((*b, TensorValue::new(vec![k, n], gb)?));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2()?;
                res.push((
                    *a,
                    TensorValue::new(vec![r, c], kernels::transpose(gd, c, r))?,
                ));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let (n, cin, h, w) = self.value(*input).dims4()?;
                let (cout, _, k, _) = self.value(*weight).dims4()?;
                let geom = kernels::ConvGeom {
                    n,
                    cin,
                    h,
                    w,
                    cout,
                    k,
                };
                if needs(*input) {
                    let gi = kernels::conv2d_grad_input(&geom, gd, self.value(*weight).data());
                    res.push((*input, TensorValue::new(vec![n, cin, h, w], gi)?));
                }
                if needs(*weight) {
                    let gw = kernels::conv2d_grad_weight(&geom, gd, self.value(*input).data());
                    res.push((*weight, TensorValue::new(vec![cout, cin, k, k], gw)?));
                }
                if let Some(b) = bias.filter(|b| needs(*b)) {
                    let plane = geom.oh() * geom.ow();
                    let mut gb = vec![0.0; cout];
                    for (i, chunk) in gd.chunks_exact(plane).enumerate() {
                        gb[i % cout] += chunk.iter().fold(0.0, |acc, v| acc + v);
                    }
                    res.push((b, TensorValue::new(vec![cout], gb)?));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let iv = self.value(*input);
                let mut gi = vec![0.0; iv.len()];
                for (&src, v) in argmax.iter().zip(gd) {
                    gi[src] += v;
                }
                res.push((*input, TensorValue::new(iv.shape().to_vec(), gi)?));
            }
            Op::Tanh(a) => {
                let scale = match self.fault {
                    Some(Fault::TanhBackwardScale(s)) => s,
                    None => 1.0,
                };
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(y, g)| scale * g * (1.0 - y * y))
                    .collect();
                res.push((*a, TensorValue::new(g.shape().to_vec(), d)?));
            }
            Op::Relu(a) => {
                let d = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                res.push((*a, TensorValue::new(g.shape().to_vec(), d)?));
            }
            Op::SoftmaxLast(a) => {
                let c = *g.shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((dr, yr), gr) in d
                    .chunks_exact_mut(c)
                    .zip(node.value.data().chunks_exact(c))
                    .zip(gd.chunks_exact(c))
                {
                    let inner = yr.iter().zip(gr).fold(0.0, |acc, (y, g)| acc + y * g);
                    for ((o, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - inner);
                    }
                }
                res.push((*a, TensorValue::new(g.shape().to_vec(), d)?));
            }
            Op::Log(a) => {
                let d = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(x, g)| g / x)
                    .collect();
                res.push((*a, TensorValue::new(g.shape().to_vec(), d)?));
            }
            Op::Reshape(a) => {
                res.push((*a, g.reshaped(self.value(*a).shape())?));
            }
            Op::Sum(a) => {
                res.push((*a, TensorValue::filled(self.value(*a).shape(), g.item())));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                res.push((
                    *a,
                    TensorValue::filled(av.shape(), g.item() / av.len() as f64),
                ));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (r, c) = self.value(*logits).dims2()?;
                let s = g.item() / r as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (row, &y) in d.chunks_exact_mut(c).zip(labels) {
                    row[y] -= s;
                }
                res.push((*logits, TensorValue::new(vec![r, c], d)?));
            }
        }
        Ok(res)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Conv2d { .. } => "conv2d",
        Op::MaxPool2 { .. } => "max_pool2",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::SoftmaxLast(..) => "softmax",
        Op::Log(..) => "log",
        Op::Reshape(..) => "reshape",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

/// Raw slice kernels. Elementwise reductions run in ascending index order;
/// matrix products go through a fixed-blocking GEMM, so results are
/// reproducible run to run on the same machine.
pub(crate) mod kernels {
    /// `c = a * b + beta * c` over strided row/column views.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (usize, usize),
        b: &[f64],
        (rsb, csb): (usize, usize),
        beta: f64,
        c: &mut [f64],
        (rsc, csc): (usize, usize),
    ) {
        let last =
            |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
        assert!(m > 0 && k > 0 && n > 0);
        assert!(last(m, k, rsa, csa) < a.len());
        assert!(last(k, n, rsb, csb) < b.len());
        assert!(last(m, n, rsc, csc) < c.len());
        // SAFETY: the asserts above keep every strided access inside its slice,
        // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                csc as isize,
            );
        }
    }

    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, out, (n, 1));
    }

    /// `out (m x k) = g (m x n) * b^T` where `b` is `k x n`.
    pub fn matmul_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
        gemm(m, n, k, g, (n, 1), b, (1, n), 0.0, out, (k, 1));
    }

    /// `out (k x n) = a^T * g` where `a` is `m x k` and `g` is `m x n`.
    pub fn matmul_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        gemm(k, m, n, a, (1, k), g, (n, 1), 0.0, out, (n, 1));
    }

    pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        out
    }

    pub fn softmax_in_place(row: &mut [f64]) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }

    /// `-log softmax(row)[y]`, computed as `(m - x_y) + ln(sum exp(x_j - m))`
    /// with the max term split out so confident rows keep their precision.
    pub fn nll_row(row: &[f64], y: usize) -> f64 {
        let (mi, m) =
            row.iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, v)| {
                    if v > bm {
                        (i, v)
                    } else {
                        (bi, bm)
                    }
                });
        let rest = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != mi)
            .fold(0.0, |acc, (_, v)| acc + (v - m).exp());
        (m - row[y]) + rest.ln_1p()
    }

    pub struct ConvGeom {
        pub n: usize,
        pub cin: usize,
        pub h: usize,
        pub w: usize,
        pub cout: usize,
        pub k: usize,
    }

    impl ConvGeom {
        pub fn oh(&self) -> usize {
            self.h - self.k + 1
        }
        pub fn ow(&self) -> usize {
            self.w - self.k + 1
        }
        /// Length of a "full-width" output plane: output rows laid out with
        /// the input's row stride, cut off after the last valid column.
        ///
        /// In that layout every kernel tap `(ky, kx)` becomes one contiguous
        /// slice of the input starting at `ky * w + kx`, so each tap is a
        /// single long axpy (forward, input grad) or dot (weight grad).
        fn span(&self) -> usize {
            (self.oh() - 1) * self.w + self.ow()
        }
    }

    fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
        for (yv, xv) in y.iter_mut().zip(x) {
            *yv += a * xv;
        }
    }

    /// Dot product with eight interleaved partial sums (fixed order, so
    /// still deterministic).
    fn dot8(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = [0.0; 8];
        let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for j in 0..8 {
                acc[j] += x[j] * y[j];
            }
        }
        let mut tail = 0.0;
        for (x, y) in ra.iter().zip(rb) {
            tail += x * y;
        }
        acc.iter().fold(0.0, |s, v| s + v) + tail
    }

    /// Planes with a smaller fraction of non-zero entries take the scatter
    /// path (cost proportional to the non-zeros) instead of the dense one.
    const SPARSE_DENSITY: f64 = 0.3;

    fn is_sparse(plane: &[f64]) -> bool {
        let nnz = plane.iter().filter(|v| **v != 0.0).count();
        (nnz as f64) < SPARSE_DENSITY * plane.len() as f64
    }

    fn nonzeros(plane: &[f64]) -> impl Iterator<Item = (usize, f64)> + '_ {
        plane.iter().copied().enumerate().filter(|(_, v)| *v != 0.0)
    }

    pub fn conv2d_forward(
        g: &ConvGeom,
        input: &[f64],
        weight: &[f64],
        bias: Option<&[f64]>,
    ) -> Vec<f64> {
        let (oh, ow, k, span) = (g.oh(), g.ow(), g.k, g.span());
        let in_plane = g.h * g.w;
        let p = oh * ow;
        let kk = k * k;
        // Scatter path writes up to k-1 columns left of a row start, so each
        // channel buffer gets a front pad and whole rows.
        let pad = k - 1;
        let buf_len = pad + oh * g.w;
        let mut flipped = weight.to_vec();
        for row in flipped.chunks_exact_mut(k) {
            row.reverse();
        }
        let mut out = vec![0.0; g.n * g.cout * p];
        let mut bufs = vec![0.0; g.cout * buf_len];
        for n in 0..g.n {
            for (co, buf) in bufs.chunks_exact_mut(buf_len).enumerate() {
                buf.fill(bias.map_or(0.0, |b| b[co]));
            }
            for ci in 0..g.cin {
                let x = &input[(n * g.cin + ci) * in_plane..][..in_plane];
                if is_sparse(x) {
                    for (idx, v) in nonzeros(x) {
                        let (iy, ix) = (idx / g.w, idx % g.w);
                        let (ky0, ky1) = ((iy + 1).saturating_sub(oh), iy.min(k - 1));
                        for (co, buf) in bufs.chunks_exact_mut(buf_len).enumerate() {
                            let wk = &flipped[(co * g.cin + ci) * kk..][..kk];
                            for ky in ky0..=ky1 {
                                let base = (iy - ky) * g.w + ix;
                                axpy(&mut buf[base..base + k], v, &wk[ky * k..(ky + 1) * k]);
                            }
                        }
                    }
                } else {
                    for (co, buf) in bufs.chunks_exact_mut(buf_len).enumerate() {
                        let wk = &weight[(co * g.cin + ci) * kk..][..kk];
                        let dst = &mut buf[pad..pad + span];
                        for ky in 0..k {
                            for kx in 0..k {
                                let off = ky * g.w + kx;
                                axpy(dst, wk[ky * k + kx], &x[off..off + span]);
                            }
                        }
                    }
                }
            }
            for (co, buf) in bufs.chunks_exact(buf_len).enumerate() {
                let o = &mut out[(n * g.cout + co) * p..][..p];
                for y in 0..oh {
                    o[y * ow..(y + 1) * ow].copy_from_slice(&buf[pad + y * g.w..][..ow]);
                }
            }
        }
        out
    }

    /// Spreads one output-gradient plane into the full-width layout.
    fn widen(g: &ConvGeom, plane: &[f64], full: &mut [f64]) {
        let ow = g.ow();
        full.fill(0.0);
        for y in 0..g.oh() {
            full[y * g.w..y * g.w + ow].copy_from_slice(&plane[y * ow..(y + 1) * ow]);
        }
    }

    pub fn conv2d_grad_input(g: &ConvGeom, gout: &[f64], weight: &[f64]) -> Vec<f64> {
        let (ow, k, span) = (g.ow(), g.k, g.span());
        let in_plane = g.h * g.w;
        let p = g.oh() * ow;
        let kk = k * k;
        let mut gin = vec![0.0; g.n * g.cin * in_plane];
        let mut full = vec![0.0; span];
        for n in 0..g.n {
            let gin_n = &mut gin[n * g.cin * in_plane..(n + 1) * g.cin * in_plane];
            for co in 0..g.cout {
                let go = &gout[(n * g.cout + co) * p..][..p];
                if is_sparse(go) {
                    for (idx, gv) in nonzeros(go) {
                        let (y, x) = (idx / ow, idx % ow);
                        for (ci, gi) in gin_n.chunks_exact_mut(in_plane).enumerate() {
                            let wk = &weight[(co * g.cin + ci) * kk..][..kk];
                            for ky in 0..k {
                                let base = (y + ky) * g.w + x;
                                axpy(&mut gi[base..base + k], gv, &wk[ky * k..(ky + 1) * k]);
                            }
                        }
                    }
                } else {
                    widen(g, go, &mut full);
                    for (ci, gi) in gin_n.chunks_exact_mut(in_plane).enumerate() {
                        let wk = &weight[(co * g.cin + ci) * kk..][..kk];
                        for ky in 0..k {
                            for kx in 0..k {
                                let off = ky * g.w + kx;
                                axpy(&mut gi[off..off + span], wk[ky * k + kx], &full);
                            }
                        }
                    }
                }
            }
        }
        gin
    }

    pub fn conv2d_grad_weight(g: &ConvGeom, gout: &[f64], input: &[f64]) -> Vec<f64> {
        let (ow, k, span) = (g.ow(), g.k, g.span());
        let in_plane = g.h * g.w;
        let p = g.oh() * ow;
        let kk = k * k;
        let mut gw = vec![0.0; g.cout * g.cin * kk];
        let mut full = vec![0.0; span];
        for n in 0..g.n {
            let x_n = &input[n * g.cin * in_plane..(n + 1) * g.cin * in_plane];
            for co in 0..g.cout {
                let go = &gout[(n * g.cout + co) * p..][..p];
                let gw_co = &mut gw[co * g.cin * kk..(co + 1) * g.cin * kk];
                if is_sparse(go) {
                    for (idx, gv) in nonzeros(go) {
                        let (y, x) = (idx / ow, idx % ow);
                        for (gk, xc) in gw_co.chunks_exact_mut(kk).zip(x_n.chunks_exact(in_plane)) {
                            for ky in 0..k {
                                let base = (y + ky) * g.w + x;
                                axpy(&mut gk[ky * k..(ky + 1) * k], gv, &xc[base..base + k]);
                            }
                        }
                    }
                } else {
                    widen(g, go, &mut full);
                    for (gk, xc) in gw_co.chunks_exact_mut(kk).zip(x_n.chunks_exact(in_plane)) {
                        for ky in 0..k {
                            for kx in 0..k {
                                let off = ky * g.w + kx;
                                gk[ky * k + kx] += dot8(&full, &xc[off..off + span]);
                            }
                        }
                    }
                }
            }
        }
        gw
    }

    /// Returns the pooled values and, for each output, the flat index of the
    /// input element it came from (first maximum wins ties).
    pub fn max_pool2(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut arg = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * x + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                    out.push(input[best]);
                    arg.push(best);
                }
            }
        }
        (out, arg)
    }
}
