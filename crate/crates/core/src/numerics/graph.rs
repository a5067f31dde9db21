//! Eagerly evaluated computation graph with reverse-mode differentiation.
//!
//! Every vector-Jacobian product is itself recorded as graph nodes, so the
//! result of [`Graph::backward`] can be differentiated again. This is what
//! lets the meta-gradient flow through an unrolled sequence of inner SGD
//! steps exactly.
//!
//! A graph is meant to live for one episode and then be dropped.

use std::sync::atomic::{AtomicU64, Ordering};

use super::params::ParamVector;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node in a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    /// `[n, o] + [o]` broadcast over rows.
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    /// `grad * 1[pre > 0]`; the mask is piecewise constant in `pre`.
    ReluGrad {
        pre: usize,
        grad: usize,
    },
    SumAll(usize),
    /// Broadcast a one-element tensor to the node's shape.
    Fill(usize),
    /// `[n, d] -> [d]`
    SumRows(usize),
    /// `[d] -> [n, d]`
    BroadcastRows(usize),
    Transpose(usize),
    Reshape(usize),
    /// Contiguous window of the flattened input, starting at `offset`.
    Slice {
        input: usize,
        offset: usize,
    },
    /// Inverse of `Slice`: places the input into zeros at `offset`.
    Embed {
        input: usize,
        offset: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    /// First derivative of cross-entropy. Not differentiable again.
    CrossEntropyGrad {
        logits: usize,
        labels: Vec<usize>,
        upstream: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::ReluGrad { .. } => "relu_grad",
            Op::SumAll(_) => "sum",
            Op::Fill(_) => "fill",
            Op::SumRows(_) => "sum_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::CrossEntropyGrad { .. } => "cross_entropy_grad",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::SumAll(a)
            | Op::Fill(a)
            | Op::SumRows(a)
            | Op::BroadcastRows(a)
            | Op::Transpose(a)
            | Op::Reshape(a) => vec![a],
            Op::ReluGrad { pre, grad } => vec![pre, grad],
            Op::Slice { input, .. } | Op::Embed { input, .. } => vec![input],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::CrossEntropyGrad {
                logits, upstream, ..
            } => vec![logits, upstream],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Named parameter segments bound to nodes of a graph.
#[derive(Clone, Debug)]
pub struct ParamVars {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn new(names: Vec<String>, vars: Vec<Var>) -> Result<Self> {
        if names.len() != vars.len() {
            return Err(Error::shape("param_vars", &[names.len()], &[vars.len()]));
        }
        Ok(Self { names, vars })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Segments whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        let (names, vars) = self
            .names
            .iter()
            .zip(&self.vars)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n.clone(), *v))
            .unzip();
        Self { names, vars }
    }

    pub fn concat(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.names.extend(other.names.iter().cloned());
        out.vars.extend(other.vars.iter().copied());
        out
    }
}

/// Recorded computation; see the module docs.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::UnknownParameter(format!(
                "node {} does not belong to this graph",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn var(&self, index: usize) -> Var {
        Var {
            graph: self.id,
            index,
        }
    }

    fn val(&self, index: usize) -> &Tensor {
        &self.nodes[index].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// Copies a node's current value into a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.check(v)?;
        let value = self.val(i).clone();
        Ok(self.constant(value))
    }

    /// Binds every segment of `params` to a fresh leaf.
    pub fn bind(&mut self, params: &ParamVector) -> ParamVars {
        let mut names = Vec::with_capacity(params.num_segments());
        let mut vars = Vec::with_capacity(params.num_segments());
        for (n, t) in params.segments() {
            names.push(n.clone());
            vars.push(self.leaf(t.clone()));
        }
        ParamVars { names, vars }
    }

    /// Binds every segment of `params` as constants.
    pub fn bind_constant(&mut self, params: &ParamVector) -> ParamVars {
        let mut names = Vec::with_capacity(params.num_segments());
        let mut vars = Vec::with_capacity(params.num_segments());
        for (n, t) in params.segments() {
            names.push(n.clone());
            vars.push(self.constant(t.clone()));
        }
        ParamVars { names, vars }
    }

    /// Reads the current values of bound parameters.
    pub fn values(&self, params: &ParamVars) -> Result<ParamVector> {
        let segments = params
            .names
            .iter()
            .zip(&params.vars)
            .map(|(n, &v)| Ok((n.clone(), self.val(self.check(v)?).clone())))
            .collect::<Result<Vec<_>>>()?;
        ParamVector::new(segments)
    }

    // ---- forward ops ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.val(ia).matmul(self.val(ib))?;
        Ok(self.push(Op::MatMul(ia, ib), value))
    }

    pub fn add_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (im, ib) = (self.check(m)?, self.check(bias)?);
        let (mv, bv) = (self.val(im), self.val(ib));
        if mv.shape().len() != 2 || bv.shape() != [mv.cols()] {
            return Err(Error::shape("add_bias", mv.shape(), bv.shape()));
        }
        let cols = mv.cols();
        let data = mv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % cols])
            .collect();
        let value = Tensor::raw(mv.shape().to_vec(), data);
        Ok(self.push(Op::AddBias(im, ib), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.val(ia).zip_with(self.val(ib), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(ia, ib), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.val(ia).zip_with(self.val(ib), "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(ia, ib), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.val(ia).zip_with(self.val(ib), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(ia, ib), value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.val(ia).map(|x| x * factor);
        Ok(self.push(Op::Scale(ia, factor), value))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.val(ia).map(|x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(Op::Relu(ia), value))
    }

    fn relu_grad(&mut self, pre: usize, grad: usize) -> Result<Var> {
        let value =
            self.val(grad).zip_with(
                self.val(pre),
                "relu_grad",
                |g, x| if x > 0.0 { g } else { 0.0 },
            )?;
        Ok(self.push(Op::ReluGrad { pre, grad }, value))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = Tensor::scalar(self.val(ia).data().iter().sum());
        Ok(self.push(Op::SumAll(ia), value))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::EmptyBatch("mean"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn fill(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        if self.val(ia).len() != 1 {
            return Err(Error::shape("fill", self.val(ia).shape(), &[1]));
        }
        let value = Tensor::full(shape, self.val(ia).item());
        Ok(self.push(Op::Fill(ia), value))
    }

    /// Column sums of a matrix: `[n, d] -> [d]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = self.val(ia);
        if av.shape().len() != 2 {
            return Err(Error::shape("sum_rows", av.shape(), &[0, 0]));
        }
        let (n, d) = (av.rows(), av.cols());
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, x) in out.iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        let value = Tensor::raw(vec![d], out);
        Ok(self.push(Op::SumRows(ia), value))
    }

    /// Column means of a matrix: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).rows();
        if self.value(a).shape().len() == 2 && n == 0 {
            return Err(Error::EmptyBatch("mean_rows"));
        }
        let s = self.sum_rows(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Repeats a vector as `n` rows: `[d] -> [n, d]`.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let av = self.val(ia);
        if av.shape().len() != 1 {
            return Err(Error::shape("broadcast_rows", av.shape(), &[0]));
        }
        let d = av.len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        let value = Tensor::raw(vec![n, d], data);
        Ok(self.push(Op::BroadcastRows(ia), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.val(ia).transpose()?;
        Ok(self.push(Op::Transpose(ia), value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.val(ia).reshape(shape)?;
        Ok(self.push(Op::Reshape(ia), value))
    }

    /// Takes `prod(shape)` consecutive values of the flattened input.
    pub fn slice(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let n: usize = shape.iter().product();
        let av = self.val(ia);
        if offset + n > av.len() {
            return Err(Error::shape("slice", av.shape(), shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), av.data()[offset..offset + n].to_vec())?;
        Ok(self.push(Op::Slice { input: ia, offset }, value))
    }

    fn embed(&mut self, a: usize, offset: usize, shape: &[usize]) -> Result<Var> {
        let av = self.val(a);
        let total: usize = shape.iter().product();
        if offset + av.len() > total {
            return Err(Error::shape("embed", av.shape(), shape));
        }
        let mut data = vec![0.0; total];
        data[offset..offset + av.len()].copy_from_slice(av.data());
        let value = Tensor::raw(shape.to_vec(), data);
        Ok(self.push(Op::Embed { input: a, offset }, value))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Mean squared error between two same-shaped nodes.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).is_empty() {
            return Err(Error::EmptyBatch("mse"));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Mean negative log-softmax of the true class; `labels` are 1-based.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let lv = self.val(il);
        if lv.shape().len() != 2 || lv.rows() != labels.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let value = Tensor::scalar(cross_entropy_value(lv, labels)?);
        let labels = labels.to_vec();
        Ok(self.push(Op::CrossEntropy { logits: il, labels }, value))
    }

    fn cross_entropy_grad(
        &mut self,
        logits: usize,
        labels: &[usize],
        upstream: usize,
    ) -> Result<Var> {
        let lv = self.val(logits);
        let scale = self.val(upstream).item() / lv.rows() as f64;
        let mut data = softmax_rows(lv);
        let c = lv.cols();
        for (i, &y) in labels.iter().enumerate() {
            data[i * c + y - 1] -= 1.0;
        }
        for v in &mut data {
            *v *= scale;
        }
        let value = Tensor::raw(lv.shape().to_vec(), data);
        let labels = labels.to_vec();
        Ok(self.push(
            Op::CrossEntropyGrad {
                logits,
                labels,
                upstream,
            },
            value,
        ))
    }

    // ---- reverse mode ---------------------------------------------------

    /// Gradients of the scalar `output` with respect to each node in `wrt`.
    ///
    /// The returned nodes are part of this graph and can be differentiated
    /// again. A node in `wrt` that `output` does not depend on receives a
    /// zero constant.
    pub fn backward(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out = self.check(output)?;
        if self.val(out).len() != 1 {
            return Err(Error::shape("backward", self.val(out).shape(), &[]));
        }
        let wrt_idx = wrt
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;

        // Nodes between a `wrt` node and the output.
        let mut on_path = vec![false; out + 1];
        for &w in &wrt_idx {
            if w <= out {
                on_path[w] = true;
            }
        }
        for i in 0..=out {
            if !on_path[i] && self.nodes[i].op.inputs().iter().any(|&j| on_path[j]) {
                on_path[i] = true;
            }
        }

        let mut adjoint: Vec<Option<usize>> = vec![None; out + 1];
        if on_path[out] {
            let seed = Tensor::full(self.val(out).shape(), 1.0);
            adjoint[out] = Some(self.constant(seed).index);
        }

        for i in (0..=out).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !on_path[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contributions = self.vjp(i, &op, g, &on_path)?;
            for (j, c) in contributions {
                adjoint[j] = Some(match adjoint[j] {
                    None => c,
                    Some(prev) => self.add(self.var(prev), self.var(c))?.index,
                });
            }
        }

        wrt_idx
            .iter()
            .map(|&w| match adjoint.get(w).copied().flatten() {
                Some(a) => Ok(self.var(a)),
                None => {
                    let zeros = Tensor::zeros(self.val(w).shape());
                    Ok(self.constant(zeros))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of node `i` (with adjoint `g`) for each input on the path.
    fn vjp(
        &mut self,
        i: usize,
        op: &Op,
        g: usize,
        on_path: &[bool],
    ) -> Result<Vec<(usize, usize)>> {
        let gv = self.var(g);
        let wants = |j: usize| on_path[j];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    let bt = self.transpose(self.var(b))?;
                    out.push((a, self.matmul(gv, bt)?.index));
                }
                if wants(b) {
                    let at = self.transpose(self.var(a))?;
                    out.push((b, self.matmul(at, gv)?.index));
                }
            }
            Op::AddBias(m, b) => {
                if wants(m) {
                    out.push((m, g));
                }
                if wants(b) {
                    out.push((b, self.sum_rows(gv)?.index));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    out.push((b, self.scale(gv, -1.0)?.index));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    out.push((a, self.mul(gv, self.var(b))?.index));
                }
                if wants(b) {
                    out.push((b, self.mul(gv, self.var(a))?.index));
                }
            }
            Op::Scale(a, f) => {
                if wants(a) {
                    out.push((a, self.scale(gv, f)?.index));
                }
            }
            Op::Relu(a) => {
                if wants(a) {
                    out.push((a, self.relu_grad(a, g)?.index));
                }
            }
            Op::ReluGrad { pre, grad } => {
                // d/d(pre) vanishes almost everywhere.
                if wants(grad) {
                    out.push((grad, self.relu_grad(pre, g)?.index));
                }
            }
            Op::SumAll(a) => {
                if wants(a) {
                    let shape = self.val(a).shape().to_vec();
                    out.push((a, self.fill(gv, &shape)?.index));
                }
            }
            Op::Fill(a) => {
                if wants(a) {
                    let s = self.sum(gv)?;
                    let shape = self.val(a).shape().to_vec();
                    out.push((a, self.reshape(s, &shape)?.index));
                }
            }
            Op::SumRows(a) => {
                if wants(a) {
                    let n = self.val(a).rows();
                    out.push((a, self.broadcast_rows(gv, n)?.index));
                }
            }
            Op::BroadcastRows(a) => {
                if wants(a) {
                    out.push((a, self.sum_rows(gv)?.index));
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    out.push((a, self.transpose(gv)?.index));
                }
            }
            Op::Reshape(a) => {
                if wants(a) {
                    let shape = self.val(a).shape().to_vec();
                    out.push((a, self.reshape(gv, &shape)?.index));
                }
            }
            Op::Slice { input, offset } => {
                if wants(input) {
                    let shape = self.val(input).shape().to_vec();
                    out.push((input, self.embed(g, offset, &shape)?.index));
                }
            }
            Op::Embed { input, offset } => {
                if wants(input) {
                    let shape = self.val(input).shape().to_vec();
                    out.push((input, self.slice(gv, offset, &shape)?.index));
                }
            }
            Op::CrossEntropy { logits, ref labels } => {
                if wants(logits) {
                    out.push((logits, self.cross_entropy_grad(logits, labels, g)?.index));
                }
            }
            Op::CrossEntropyGrad { .. } => {
                return Err(Error::UnsupportedOp(self.nodes[i].op.name()));
            }
        }
        Ok(out)
    }

    /// Gradient values of `output` with respect to bound parameters.
    pub fn grad(&mut self, output: Var, params: &ParamVars) -> Result<ParamVector> {
        let grads = self.backward(output, &params.vars)?;
        let segments = params
            .names
            .iter()
            .zip(grads)
            .map(|(n, v)| (n.clone(), self.value(v).clone()))
            .collect();
        ParamVector::new(segments)
    }

    /// Re-evaluates `output` from the recorded leaf and constant values.
    ///
    /// Used to check that replaying a recording is bit-identical to the
    /// eager pass; the graph itself is not modified.
    pub fn replay(&self, output: Var) -> Result<Tensor> {
        let out = self.check(output)?;
        let mut vals: Vec<Tensor> = Vec::with_capacity(out + 1);
        for i in 0..=out {
            let node = &self.nodes[i];
            let v = match &node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                op => recompute(op, &node.value, &vals)?,
            };
            vals.push(v);
        }
        Ok(vals.pop().expect("non-empty replay"))
    }
}

fn recompute(op: &Op, recorded: &Tensor, vals: &[Tensor]) -> Result<Tensor> {
    let relu = |x: f64| if x > 0.0 { x } else { 0.0 };
    Ok(match *op {
        Op::Leaf | Op::Constant => unreachable!(),
        Op::MatMul(a, b) => vals[a].matmul(&vals[b])?,
        Op::AddBias(m, b) => {
            let c = vals[m].cols();
            let data = vals[m]
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + vals[b].data()[i % c])
                .collect();
            Tensor::raw(vals[m].shape().to_vec(), data)
        }
        Op::Add(a, b) => vals[a].zip_with(&vals[b], "add", |x, y| x + y)?,
        Op::Sub(a, b) => vals[a].zip_with(&vals[b], "sub", |x, y| x - y)?,
        Op::Mul(a, b) => vals[a].zip_with(&vals[b], "mul", |x, y| x * y)?,
        Op::Scale(a, f) => vals[a].map(|x| x * f),
        Op::Relu(a) => vals[a].map(relu),
        Op::ReluGrad { pre, grad } => {
            vals[grad].zip_with(
                &vals[pre],
                "relu_grad",
                |g, x| if x > 0.0 { g } else { 0.0 },
            )?
        }
        Op::SumAll(a) => Tensor::scalar(vals[a].data().iter().sum()),
        Op::Fill(a) => Tensor::full(recorded.shape(), vals[a].item()),
        Op::SumRows(a) => {
            let mut out = vec![0.0; vals[a].cols()];
            for i in 0..vals[a].rows() {
                for (o, x) in out.iter_mut().zip(vals[a].row(i)) {
                    *o += x;
                }
            }
            Tensor::raw(recorded.shape().to_vec(), out)
        }
        Op::BroadcastRows(a) => {
            let mut data = Vec::with_capacity(recorded.len());
            for _ in 0..recorded.rows() {
                data.extend_from_slice(vals[a].data());
            }
            Tensor::raw(recorded.shape().to_vec(), data)
        }
        Op::Transpose(a) => vals[a].transpose()?,
        Op::Reshape(a) => vals[a].reshape(recorded.shape())?,
        Op::Slice { input, offset } => Tensor::raw(
            recorded.shape().to_vec(),
            vals[input].data()[offset..offset + recorded.len()].to_vec(),
        ),
        Op::Embed { input, offset } => {
            let mut data = vec![0.0; recorded.len()];
            data[offset..offset + vals[input].len()].copy_from_slice(vals[input].data());
            Tensor::raw(recorded.shape().to_vec(), data)
        }
        Op::CrossEntropy { logits, ref labels } => {
            Tensor::scalar(cross_entropy_value(&vals[logits], labels)?)
        }
        Op::CrossEntropyGrad {
            logits,
            ref labels,
            upstream,
        } => {
            let lv = &vals[logits];
            let scale = vals[upstream].item() / lv.rows() as f64;
            let mut data = softmax_rows(lv);
            for (i, &y) in labels.iter().enumerate() {
                data[i * lv.cols() + y - 1] -= 1.0;
            }
            Tensor::raw(
                lv.shape().to_vec(),
                data.into_iter().map(|v| v * scale).collect(),
            )
        }
    })
}

fn softmax_rows(logits: &Tensor) -> Vec<f64> {
    let c = logits.cols();
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    debug_assert_eq!(out.len(), logits.rows() * c);
    out
}

pub(crate) fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = logits.rows();
    if n == 0 || labels.is_empty() {
        return Err(Error::EmptyBatch("cross_entropy"));
    }
    let c = logits.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y < 1 || y > c {
            return Err(Error::Validation(format!(
                "label {y} at row {i} outside 1..={c}"
            )));
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[y - 1];
    }
    Ok(total / n as f64)
}
