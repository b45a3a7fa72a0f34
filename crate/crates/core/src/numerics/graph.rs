//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends one node holding its output value. Parameters enter
//! through [`Graph::param`] and are cached by name, so a weight used at every
//! recurrent step is a single node whose gradient accumulates across uses.

use std::collections::{BTreeMap, HashMap};

use super::params::ParameterStore;
use super::tensor::{dot, sigmoid, split_axis, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the forward output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    Softmax(NodeId, usize),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Reshape(NodeId),
    AvgPoolSpatial(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Dot(NodeId, NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every trainable parameter on the tape.
pub type Gradients = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: NodeId,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id.0].needs_grad {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.numel()]))
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::Validation(format!(
                "non-finite value produced by {op:?}"
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let value = value.with_requires_grad(false);
        self.push(value, Op::Leaf, false)
            .expect("constant inputs must be finite")
    }

    /// A parameter from `store`. Trainable when the stored tensor requires grad.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let tensor = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let trainable = tensor.requires_grad();
        let value = Tensor::new(tensor.shape(), tensor.data().to_vec())?;
        let id = self.push(value, Op::Param(name.to_string()), trainable)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// A parameter read as a constant regardless of its trainable flag.
    pub fn frozen_param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        let tensor = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.constant(Tensor::new(tensor.shape(), tensor.data().to_vec())?))
    }

    /// `a · b` with `a` of shape `[m, k]` or `[k]` and `b` of shape `[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa.len() > 2 || *sa.last().unwrap() != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = if sa.len() == 2 { sa[0] } else { 1 };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![n] };
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), needs)
    }

    /// `x Wᵀ + b` over the trailing axis of `x`, with `W` of shape `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.is_empty() || *sx.last().unwrap() != sw[1] {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let (out_dim, in_dim) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::dim("linear bias", self.shape(b), &[out_dim]));
            }
        }
        let rows = rows_of(&sx);
        let (xd, wd) = (self.data(x), self.data(w));
        let bias = b.map(|b| self.data(b));
        let mut out = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xr = &xd[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let wr = &wd[o * in_dim..(o + 1) * in_dim];
                out[r * out_dim + o] = bias.map_or(0.0, |b| b[o]) + dot(xr, wr);
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = out_dim;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, needs)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, data)?, op, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds vector `v` to every row of `m` (`[r, c] + [c]`).
    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv != [sm[1]] {
            return Err(Error::dim("add_row", &sm, &sv));
        }
        let cols = sm[1];
        let vd = self.data(v);
        let data = self
            .data(m)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vd[i % cols])
            .collect();
        let needs = self.needs(m) || self.needs(v);
        self.push(Tensor::new(&sm, data)?, Op::AddRow(m, v), needs)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(&shape, data)?, Op::Scale(a, factor), needs)
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| kind.apply(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(&shape, data)?, Op::Act(a, kind), needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.activation(a, Activation::Tanh)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Validation(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * extent + j) * inner + i;
                let max = (0..extent).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..extent {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..extent {
                    out[idx(j)] /= total;
                }
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(&shape, out)?, Op::Softmax(a, axis), needs)
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Validation(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let ext = self.shape(x)[axis];
                let block = ext * inner;
                out.extend_from_slice(&self.data(x)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(Tensor::new(&shape, out)?, Op::Concat(xs.to_vec(), axis), needs)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Validation(format!(
                "slice [{start}, {}) on axis {axis} out of range for shape {shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let needs = self.needs(x);
        self.push(Tensor::new(&new_shape, out)?, Op::Slice { x, axis, start }, needs)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data)?, Op::Reshape(x), needs)
    }

    /// Row `i` of a 2-D node as a 1-D node.
    pub fn row(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let cols = self.shape(x).get(1).copied().unwrap_or(0);
        let r = self.slice(x, 0, i, 1)?;
        self.reshape(r, &[cols])
    }

    /// Mean over both spatial axes of a `[k, k, d]` map.
    pub fn avg_pool_spatial(&mut self, map: NodeId) -> Result<NodeId> {
        let shape = self.shape(map).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim("avg_pool_spatial", &shape, &[0, 0, 0]));
        }
        let cells = shape[0] * shape[1];
        let d = shape[2];
        let mut out = vec![0.0; d];
        for cell in self.data(map).chunks(d) {
            for (o, v) in out.iter_mut().zip(cell) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= cells as f64);
        let needs = self.needs(map);
        self.push(Tensor::new(&[d], out)?, Op::AvgPoolSpatial(map), needs)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 1 {
            return Err(Error::dim("dot", self.shape(a), self.shape(b)));
        }
        self.same_shape("dot", a, b)?;
        let s = dot(self.data(a), self.data(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::Dot(a, b), needs)
    }

    /// Rows of a `[V, d]` table, stacked to `[ids.len(), d]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("gather", &shape, &[0, 0]));
        }
        if ids.is_empty() {
            return Err(Error::Validation("gather with no indices".into()));
        }
        let (rows, d) = (shape[0], shape[1]);
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::Validation(format!(
                    "index {i} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    /// Mean binary cross-entropy on logits, in the stable
    /// `max(x, 0) - x t + ln(1 + e^{-|x|})` form.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let x = self.data(logits);
        if x.len() != targets.len() {
            return Err(Error::dim("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Validation(format!(
                "BCE target {t} outside [0, 1]"
            )));
        }
        let n = x.len() as f64;
        let loss = x
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        )
    }

    /// Mean softmax cross-entropy of `[n, V]` (or `[V]`) logits against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        let (rows, classes) = match shape.as_slice() {
            [v] => (1, *v),
            [n, v] => (*n, *v),
            _ => return Err(Error::dim("cross_entropy", &shape, &[targets.len()])),
        };
        if rows != targets.len() {
            return Err(Error::dim("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Validation(format!(
                "class index {t} out of range for {classes} classes"
            )));
        }
        let x = self.data(logits);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= rows as f64;
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        )
    }

    /// Gradients of scalar `loss` for every trainable parameter on the tape.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    /// Runs [`Graph::gradients`] and writes the result into `store`'s grad
    /// slots. Trainable parameters not reached from `loss` get a zero gradient.
    pub fn backward(&self, loss: NodeId, store: &mut ParameterStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (name, g) in grads {
            if let Some(t) = store.get_mut(&name) {
                t.set_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let nodes = &self.nodes;
        macro_rules! slot {
            ($id:expr) => {
                grad_slot(nodes, grads, $id)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => {
                out.entry(name.clone())
                    .and_modify(|e| e.iter_mut().zip(&g).for_each(|(a, b)| *a += b))
                    .or_insert(g);
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (k, n) = (sb[0], sb[1]);
                let m = if sa.len() == 2 { sa[0] } else { 1 };
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(ga) = slot!(a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                if let Some(gb) = slot!(b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let sw = self.shape(w);
                let (out_dim, in_dim) = (sw[0], sw[1]);
                let rows = g.len() / out_dim;
                let (xd, wd) = (self.data(x), self.data(w));
                if let Some(gx) = slot!(x) {
                    for r in 0..rows {
                        let gxr = &mut gx[r * in_dim..(r + 1) * in_dim];
                        for o in 0..out_dim {
                            let gv = g[r * out_dim + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for (t, wv) in gxr.iter_mut().zip(&wd[o * in_dim..(o + 1) * in_dim]) {
                                *t += gv * wv;
                            }
                        }
                    }
                }
                if let Some(gw) = slot!(w) {
                    for r in 0..rows {
                        let xr = &xd[r * in_dim..(r + 1) * in_dim];
                        for o in 0..out_dim {
                            let gv = g[r * out_dim + o];
                            if gv == 0.0 {
                                continue;
                            }
                            for (t, xv) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xr) {
                                *t += gv * xv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = slot!(b) {
                        for r in 0..rows {
                            for o in 0..out_dim {
                                gb[o] += g[r * out_dim + o];
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
                }
                if let Some(gb) = slot!(b) {
                    gb.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
                }
                if let Some(gb) = slot!(b) {
                    gb.iter_mut().zip(&g).for_each(|(t, v)| *t -= v);
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(ga) = slot!(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if let Some(gb) = slot!(b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            &Op::AddRow(m, v) => {
                let cols = self.shape(v)[0];
                if let Some(gm) = slot!(m) {
                    gm.iter_mut().zip(&g).for_each(|(t, x)| *t += x);
                }
                if let Some(gv) = slot!(v) {
                    for (i, x) in g.iter().enumerate() {
                        gv[i % cols] += x;
                    }
                }
            }
            &Op::Scale(a, f) => {
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(&g).for_each(|(t, v)| *t += f * v);
                }
            }
            &Op::Act(a, kind) => {
                let y = node.value.data();
                if let Some(ga) = slot!(a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * kind.derivative_from_output(y[i]);
                    }
                }
            }
            &Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, extent, inner) = split_axis(node.value.shape(), axis);
                if let Some(ga) = slot!(a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * extent + j) * inner + i;
                            let s: f64 = (0..extent).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..extent {
                                ga[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let axis = *axis;
                let (outer, total, inner) = split_axis(node.value.shape(), axis);
                let mut offset = 0;
                for &x in xs {
                    let ext = self.shape(x)[axis];
                    if let Some(gx) = slot!(x) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            for j in 0..ext * inner {
                                gx[dst + j] += g[src + j];
                            }
                        }
                    }
                    offset += ext;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, extent, inner) = split_axis(self.shape(x), axis);
                let len = node.value.shape()[axis];
                if let Some(gx) = slot!(x) {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += g[src + j];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().zip(&g).for_each(|(t, v)| *t += v);
                }
            }
            &Op::AvgPoolSpatial(map) => {
                let shape = self.shape(map);
                let cells = (shape[0] * shape[1]) as f64;
                let d = shape[2];
                if let Some(gm) = slot!(map) {
                    for (i, t) in gm.iter_mut().enumerate() {
                        *t += g[i % d] / cells;
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().for_each(|t| *t += g[0]);
                }
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel() as f64;
                if let Some(gx) = slot!(x) {
                    gx.iter_mut().for_each(|t| *t += g[0] / n);
                }
            }
            &Op::Dot(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                if let Some(ga) = slot!(a) {
                    ga.iter_mut().zip(bd).for_each(|(t, v)| *t += g[0] * v);
                }
                if let Some(gb) = slot!(b) {
                    gb.iter_mut().zip(ad).for_each(|(t, v)| *t += g[0] * v);
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = slot!(*table) {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let x = self.data(*logits);
                let n = x.len() as f64;
                if let Some(gx) = slot!(*logits) {
                    for i in 0..x.len() {
                        gx[i] += g[0] * (sigmoid(x[i]) - targets[i]) / n;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let x = self.data(*logits);
                let rows = targets.len();
                let classes = x.len() / rows;
                if let Some(gx) = slot!(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &x[r * classes..(r + 1) * classes];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for c in 0..classes {
                            let p = (row[c] - max).exp() / total;
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gx[r * classes + c] += g[0] * (p - onehot) / rows as f64;
                        }
                    }
                }
            }
        }
    }
}
