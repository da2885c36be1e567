use std::collections::BTreeMap;

use super::kernels::{col2im, conv_out, gemm, im2col};
use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Param(String),
    Constant(Tensor),
    /// `x (B, I) · w (I, O) + b (O)`.
    Dense { x: NodeId, w: NodeId, b: NodeId },
    /// 3×3 convolution, zero padding 1. `x (B, C, H, W)`, `w (O, C, 3, 3)`, `b (O)`.
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    Relu(NodeId),
    /// Global average over the spatial axes: `(B, C, H, W) -> (B, C)`.
    MeanPool(NodeId),
    Flatten(NodeId),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul { a: NodeId, b: NodeId, trans_a: bool, trans_b: bool },
    Sum { x: NodeId, axis: Option<usize> },
    Mean { x: NodeId, axis: Option<usize> },
    /// Row normalization over the last axis.
    L2Normalize(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Softmax { x: NodeId, axis: usize },
    Concat { xs: Vec<NodeId>, axis: usize },
    /// Per-sample planar map of a flattened point set `z (B, 2m)`:
    /// `p -> A (p - c) + c + s·o` with `c` the sample centroid and
    /// `maps (B, 6) = [a11, a12, a21, a22, ox, oy]`. When `range_scaled`, `s`
    /// is the sample's coordinate range `max(z_b) - min(z_b)`, otherwise 1.
    /// The maps and `s` are constants for differentiation.
    PointAffine { z: NodeId, maps: NodeId, range_scaled: bool },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MeanPool(_) => "mean_pool",
            Op::Flatten(_) => "flatten",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2Normalize(_) => "l2_normalize",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::PointAffine { .. } => "point_affine",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => vec![],
            Op::Dense { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Relu(x)
            | Op::MeanPool(x)
            | Op::Flatten(x)
            | Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::L2Normalize(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Softmax { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Concat { xs, .. } => xs.clone(),
            Op::PointAffine { z, maps, .. } => vec![*z, *maps],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    /// One entry per declared parameter; zero when unreachable from the outputs.
    pub params: ParamSet,
    /// Gradients of inputs declared with [`Graph::input_with_grad`].
    pub inputs: BTreeMap<String, Tensor>,
}

/// Static computation graph. Nodes can only reference earlier nodes, so the
/// insertion order is a topological order and evaluation is deterministic.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    params: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    values: Vec<Option<Tensor>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let requires_grad = match &op {
            Op::Param(_) => true,
            Op::Input(_) | Op::Constant(_) => false,
            Op::PointAffine { z, .. } => self.nodes[z.0].requires_grad,
            other => other.operands().iter().any(|o| self.nodes[o.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            requires_grad,
        });
        self.values.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| Error::shape(format!("unknown node {}", id.0)))
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::shape(format!("input `{name}` declared twice")));
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Declares an input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        let id = self.input(name, shape)?;
        self.nodes[id.0].requires_grad = true;
        Ok(id)
    }

    /// Declares (or re-uses) a parameter.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            if self.nodes[id.0].shape != shape {
                return Err(Error::shape(format!(
                    "parameter `{name}` redeclared with shape {shape:?}"
                )));
            }
            return Ok(id);
        }
        let id = self.push(Op::Param(name.to_string()), shape.to_vec());
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Constant(t), shape)
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) -> Result<()> {
        self.check(id)?;
        self.outputs.insert(name.to_string(), id);
        Ok(())
    }

    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.params
            .iter()
            .map(|(k, id)| (k.clone(), self.nodes[id.0].shape.clone()))
            .collect()
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.check(x)?, self.check(w)?, self.check(b)?);
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || bs[0] != ws[1] {
            return Err(Error::shape(format!("dense: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let shape = vec![xs[0], ws[1]];
        Ok(self.push(Op::Dense { x, w, b }, shape))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (xs, ws, bs) = (self.check(x)?, self.check(w)?, self.check(b)?);
        if xs.len() != 4
            || ws.len() != 4
            || bs.len() != 1
            || ws[1] != xs[1]
            || ws[2] != 3
            || ws[3] != 3
            || bs[0] != ws[0]
            || stride == 0
        {
            return Err(Error::shape(format!(
                "conv2d: x {xs:?}, w {ws:?}, b {bs:?}, stride {stride}"
            )));
        }
        let shape = vec![xs[0], ws[0], conv_out(xs[2], stride), conv_out(xs[3], stride)];
        Ok(self.push(Op::Conv2d { x, w, b, stride }, shape))
    }

    fn unary(&mut self, x: NodeId, make: impl FnOnce(NodeId) -> Op) -> Result<NodeId> {
        let shape = self.check(x)?.to_vec();
        Ok(self.push(make(x), shape))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Log)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Exp)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.unary(x, |x| Op::Scale(x, factor))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        if self.check(x)?.is_empty() {
            return Err(Error::shape("l2_normalize needs at least one axis"));
        }
        self.unary(x, Op::L2Normalize)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        if axis >= self.check(x)?.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range")));
        }
        self.unary(x, |x| Op::Softmax { x, axis })
    }

    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.check(x)?;
        if xs.len() != 4 {
            return Err(Error::shape(format!("mean_pool expects 4 axes, got {xs:?}")));
        }
        let shape = vec![xs[0], xs[1]];
        Ok(self.push(Op::MeanPool(x), shape))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.check(x)?;
        if xs.is_empty() {
            return Err(Error::shape("flatten needs a batch axis"));
        }
        let shape = vec![xs[0], numel(&xs[1..])];
        Ok(self.push(Op::Flatten(x), shape))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xs = self.check(x)?;
        if numel(xs) != numel(shape) {
            return Err(Error::shape(format!("reshape {xs:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    fn binary_same(&mut self, a: NodeId, b: NodeId, make: fn(NodeId, NodeId) -> Op) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa != sb {
            return Err(Error::shape(format!("elementwise op on {sa:?} and {sb:?}")));
        }
        let shape = sa.to_vec();
        Ok(self.push(make(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Mul)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.check(a)?, self.check(b)?);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!("matmul on {sa:?} and {sb:?}")));
        }
        let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {sa:?}{} · {sb:?}{}",
                if trans_a { "ᵀ" } else { "" },
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        Ok(self.push(Op::MatMul { a, b, trans_a, trans_b }, vec![m, n]))
    }

    fn reduce_shape(&self, x: NodeId, axis: Option<usize>) -> Result<Vec<usize>> {
        let xs = self.check(x)?;
        match axis {
            None => Ok(vec![]),
            Some(a) if a < xs.len() => {
                let mut s = xs.to_vec();
                s.remove(a);
                Ok(s)
            }
            Some(a) => Err(Error::shape(format!("axis {a} out of range for {xs:?}"))),
        }
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let shape = self.reduce_shape(x, axis)?;
        Ok(self.push(Op::Sum { x, axis }, shape))
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let shape = self.reduce_shape(x, axis)?;
        Ok(self.push(Op::Mean { x, axis }, shape))
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.check(*xs.first().ok_or_else(|| Error::shape("concat of nothing"))?)?;
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        let mut shape = first.to_vec();
        shape[axis] = 0;
        for &x in xs {
            let s = self.check(x)?;
            if s.len() != shape.len()
                || s.iter()
                    .zip(&shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!("concat of incompatible {s:?}")));
            }
            shape[axis] += s[axis];
        }
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            shape,
        ))
    }

    pub fn point_affine(&mut self, z: NodeId, maps: NodeId, range_scaled: bool) -> Result<NodeId> {
        let (zs, ms) = (self.check(z)?, self.check(maps)?);
        if zs.len() != 2 || zs[1] % 2 != 0 || zs[1] < 4 || ms != [zs[0], 6] {
            return Err(Error::shape(format!("point_affine: z {zs:?}, maps {ms:?}")));
        }
        let shape = zs.to_vec();
        Ok(self.push(
            Op::PointAffine {
                z,
                maps,
                range_scaled,
            },
            shape,
        ))
    }

    /// Value computed for `id` by the last forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).and_then(|id| self.value(*id))
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    /// Evaluates every node in insertion order and returns the marked outputs.
    pub fn forward(
        &mut self,
        params: &ParamSet,
        inputs: &[(&str, &Tensor)],
    ) -> Result<BTreeMap<String, Tensor>> {
        for (name, _) in inputs {
            if !self.inputs.contains_key(*name) {
                return Err(Error::shape(format!("unknown input `{name}`")));
            }
        }
        for v in self.values.iter_mut() {
            *v = None;
        }
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i, params, inputs)?;
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.values[i] = Some(value);
        }
        Ok(self
            .outputs
            .iter()
            .map(|(k, id)| (k.clone(), self.values[id.0].clone().expect("evaluated")))
            .collect())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("operand evaluated earlier")
    }

    fn eval_node(&self, i: usize, params: &ParamSet, inputs: &[(&str, &Tensor)]) -> Result<Tensor> {
        let node = &self.nodes[i];
        let shape = node.shape.clone();
        let out = match &node.op {
            Op::Input(name) => {
                let t = inputs
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| *t)
                    .ok_or_else(|| Error::shape(format!("missing input `{name}`")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "input `{name}` has shape {:?}, graph expects {shape:?}",
                        t.shape()
                    )));
                }
                t.clone()
            }
            Op::Param(name) => {
                let t = params
                    .get(name)
                    .ok_or_else(|| Error::shape(format!("missing parameter `{name}`")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "parameter `{name}` has shape {:?}, graph expects {shape:?}",
                        t.shape()
                    )));
                }
                t.clone()
            }
            Op::Constant(t) => t.clone(),
            Op::Dense { x, w, b } => {
                let (x, w, b) = (self.val(*x), self.val(*w), self.val(*b));
                let (rows, inner, cols) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                let mut y = vec![0.0; rows * cols];
                for r in 0..rows {
                    y[r * cols..(r + 1) * cols].copy_from_slice(b.data());
                }
                gemm(rows, inner, cols, x.data(), false, w.data(), false, &mut y, true);
                Tensor::new(shape, y)?
            }
            Op::Conv2d { x, w, b, stride } => {
                let (x, w, b) = (self.val(*x), self.val(*w), self.val(*b));
                let xs = x.shape();
                let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let o = w.shape()[0];
                let p = shape[2] * shape[3];
                let cols = im2col(x.data(), batch, c, h, wd, *stride);
                let mut yt = vec![0.0; o * batch * p];
                gemm(o, c * 9, batch * p, w.data(), false, &cols, false, &mut yt, false);
                let mut y = vec![0.0; batch * o * p];
                for oc in 0..o {
                    let bias = b.data()[oc];
                    for bi in 0..batch {
                        let src = &yt[oc * batch * p + bi * p..oc * batch * p + (bi + 1) * p];
                        let dst = &mut y[(bi * o + oc) * p..(bi * o + oc + 1) * p];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s + bias;
                        }
                    }
                }
                Tensor::new(shape, y)?
            }
            Op::Relu(x) => map(self.val(*x), |v| if v > 0.0 { v } else { 0.0 }),
            Op::Log(x) => map(self.val(*x), f64::ln),
            Op::Exp(x) => map(self.val(*x), f64::exp),
            Op::Scale(x, f) => map(self.val(*x), |v| v * f),
            Op::MeanPool(x) => {
                let x = self.val(*x);
                let hw = x.shape()[2] * x.shape()[3];
                let data = x
                    .data()
                    .chunks(hw)
                    .map(|c| c.iter().sum::<f64>() / hw as f64)
                    .collect();
                Tensor::new(shape, data)?
            }
            Op::Flatten(x) | Op::Reshape(x) => self.val(*x).clone().reshape(&shape)?,
            Op::Add(a, b) => zip(self.val(*a), self.val(*b), |p, q| p + q),
            Op::Sub(a, b) => zip(self.val(*a), self.val(*b), |p, q| p - q),
            Op::Mul(a, b) => zip(self.val(*a), self.val(*b), |p, q| p * q),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (a, b) = (self.val(*a), self.val(*b));
                let k = if *trans_a { a.shape()[0] } else { a.shape()[1] };
                let mut c = vec![0.0; shape[0] * shape[1]];
                gemm(shape[0], k, shape[1], a.data(), *trans_a, b.data(), *trans_b, &mut c, false);
                Tensor::new(shape, c)?
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let is_mean = matches!(node.op, Op::Mean { .. });
                let x = self.val(*x);
                let (outer, len, inner) = match axis {
                    None => (1, x.len(), 1),
                    Some(a) => split_axis(x.shape(), *a),
                };
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if is_mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                Tensor::new(shape, out)?
            }
            Op::L2Normalize(x) => {
                let x = self.val(*x);
                let last = *x.shape().last().expect("checked at build");
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(last) {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.iter_mut().for_each(|v| *v /= n);
                }
                Tensor::new(shape, out)?
            }
            Op::Softmax { x, axis } => {
                let x = self.val(*x);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let mut out = x.data().to_vec();
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + j;
                        let max = (0..len).map(|l| out[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for l in 0..len {
                            let e = (out[idx(l)] - max).exp();
                            out[idx(l)] = e;
                            total += e;
                        }
                        for l in 0..len {
                            out[idx(l)] /= total;
                        }
                    }
                }
                Tensor::new(shape, out)?
            }
            Op::Concat { xs, axis } => {
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let mut out = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    for x in xs {
                        let x = self.val(*x);
                        let chunk = x.shape()[*axis] * inner;
                        out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                Tensor::new(shape, out)?
            }
            Op::PointAffine {
                z,
                maps,
                range_scaled,
            } => {
                let (z, maps) = (self.val(*z), self.val(*maps));
                let width = z.shape()[1];
                let mut out = z.data().to_vec();
                for (row, map) in out.chunks_mut(width).zip(maps.data().chunks(6)) {
                    point_affine_row(row, map, *range_scaled);
                }
                Tensor::new(shape, out)?
            }
        };
        Ok(out)
    }

    /// Sign pattern of every relu input from the last forward pass (`true`
    /// where strictly positive). Used to detect finite-difference steps that
    /// cross a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                if let Some(v) = self.value(x) {
                    pattern.extend(v.data().iter().map(|&x| x > 0.0));
                }
            }
        }
        pattern
    }

    /// Propagates `output_grads` back to every parameter (and gradient-tracking
    /// input). Requires a preceding [`Graph::forward`].
    pub fn backward(&self, output_grads: &[(&str, &Tensor)]) -> Result<Gradients> {
        if self.values.iter().any(Option::is_none) {
            return Err(Error::BackwardBeforeForward);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (name, g) in output_grads {
            let id = *self
                .outputs
                .get(*name)
                .ok_or_else(|| Error::shape(format!("unknown output `{name}`")))?;
            if g.shape() != self.nodes[id.0].shape.as_slice() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has shape {:?}, output is {:?}",
                    g.shape(),
                    self.nodes[id.0].shape
                )));
            }
            accumulate(&mut grads[id.0], (*g).clone());
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut params = ParamSet::new();
        for (name, id) in &self.params {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&self.nodes[id.0].shape));
            params.insert(name.clone(), g);
        }
        let mut inputs = BTreeMap::new();
        for (name, id) in &self.inputs {
            if self.nodes[id.0].requires_grad {
                let g = grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[id.0].shape));
                inputs.insert(name.clone(), g);
            }
        }
        Ok(Gradients { params, inputs })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (rows, inner, cols) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * inner];
                    gemm(rows, cols, inner, g.data(), false, wv.data(), true, &mut dx, false);
                    accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; inner * cols];
                    gemm(inner, rows, cols, xv.data(), true, g.data(), false, &mut dw, false);
                    accumulate(&mut grads[w.0], Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::from_vec(db));
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let xs = xv.shape();
                let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let o = wv.shape()[0];
                let p = node.shape[2] * node.shape[3];
                let mut gt = vec![0.0; o * batch * p];
                for oc in 0..o {
                    for bi in 0..batch {
                        gt[oc * batch * p + bi * p..oc * batch * p + (bi + 1) * p]
                            .copy_from_slice(&g.data()[(bi * o + oc) * p..(bi * o + oc + 1) * p]);
                    }
                }
                if self.wants(*b) {
                    let db = gt.chunks(batch * p).map(|r| r.iter().sum()).collect();
                    accumulate(&mut grads[b.0], Tensor::from_vec(db));
                }
                if self.wants(*w) {
                    let cols = im2col(xv.data(), batch, c, h, wd, *stride);
                    let mut dw = vec![0.0; o * c * 9];
                    gemm(o, batch * p, c * 9, &gt, false, &cols, true, &mut dw, false);
                    accumulate(&mut grads[w.0], Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; c * 9 * batch * p];
                    gemm(c * 9, o, batch * p, wv.data(), true, &gt, false, &mut dcols, false);
                    let mut dx = vec![0.0; xv.len()];
                    col2im(&dcols, batch, c, h, wd, *stride, &mut dx);
                    accumulate(&mut grads[x.0], Tensor::new(xs.to_vec(), dx)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                let dx = zip(g, xv, |g, v| if v > 0.0 { g } else { 0.0 });
                accumulate(&mut grads[x.0], dx);
            }
            Op::Log(x) => {
                let dx = zip(g, self.val(*x), |g, v| g / v);
                accumulate(&mut grads[x.0], dx);
            }
            Op::Exp(x) => {
                let y = self.values[i].as_ref().expect("forward ran");
                accumulate(&mut grads[x.0], zip(g, y, |g, y| g * y));
            }
            Op::Scale(x, f) => accumulate(&mut grads[x.0], map(g, |g| g * f)),
            Op::MeanPool(x) => {
                let xs = self.val(*x).shape();
                let hw = xs[2] * xs[3];
                let mut dx = Vec::with_capacity(numel(xs));
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                accumulate(&mut grads[x.0], Tensor::new(xs.to_vec(), dx)?);
            }
            Op::Flatten(x) | Op::Reshape(x) => {
                let xs = self.nodes[x.0].shape.clone();
                accumulate(&mut grads[x.0], g.clone().reshape(&xs)?);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], map(g, |v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], zip(g, self.val(*b), |g, v| g * v));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], zip(g, self.val(*a), |g, v| g * v));
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = if *trans_a { av.shape()[0] } else { av.shape()[1] };
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    if *trans_a {
                        gemm(k, n, m, bv.data(), *trans_b, g.data(), true, &mut da, false);
                    } else {
                        gemm(m, n, k, g.data(), false, bv.data(), !*trans_b, &mut da, false);
                    }
                    accumulate(&mut grads[a.0], Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        gemm(n, m, k, g.data(), true, av.data(), *trans_a, &mut db, false);
                    } else {
                        gemm(k, m, n, av.data(), !*trans_a, g.data(), false, &mut db, false);
                    }
                    accumulate(&mut grads[b.0], Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = self.nodes[x.0].shape.clone();
                let (outer, len, inner) = match axis {
                    None => (1, numel(&xs), 1),
                    Some(a) => split_axis(&xs, *a),
                };
                let factor = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; numel(&xs)];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&g.data()[o * inner..(o + 1) * inner]) {
                            *d = s * factor;
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(xs, dx)?);
            }
            Op::L2Normalize(x) => {
                let xv = self.val(*x);
                let y = self.values[i].as_ref().expect("forward ran");
                let last = *xv.shape().last().expect("checked");
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.len() / last {
                    let span = r * last..(r + 1) * last;
                    let xr = &xv.data()[span.clone()];
                    let yr = &y.data()[span.clone()];
                    let gr = &g.data()[span.clone()];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dx[span].iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) / norm;
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Softmax { x, axis } => {
                let y = self.values[i].as_ref().expect("forward ran");
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + j;
                        let dot: f64 = (0..len).map(|l| g.data()[idx(l)] * y.data()[idx(l)]).sum();
                        for l in 0..len {
                            dx[idx(l)] = y.data()[idx(l)] * (g.data()[idx(l)] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Concat { xs, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[axis + 1..]);
                let row = node.shape[*axis] * inner;
                let mut offset = 0;
                for x in xs {
                    let xs_shape = self.nodes[x.0].shape.clone();
                    let chunk = xs_shape[*axis] * inner;
                    if self.wants(*x) {
                        let mut dx = Vec::with_capacity(numel(&xs_shape));
                        for o in 0..outer {
                            dx.extend_from_slice(&g.data()[o * row + offset..o * row + offset + chunk]);
                        }
                        accumulate(&mut grads[x.0], Tensor::new(xs_shape, dx)?);
                    }
                    offset += chunk;
                }
            }
            Op::PointAffine { z, maps, .. } => {
                let width = node.shape[1];
                let maps = self.val(*maps);
                let mut dz = g.data().to_vec();
                for (row, map) in dz.chunks_mut(width).zip(maps.data().chunks(6)) {
                    point_affine_row_adjoint(row, map);
                }
                accumulate(&mut grads[z.0], Tensor::new(node.shape.clone(), dz)?);
            }
        }
        Ok(())
    }
}

fn is_identity_linear(map: &[f64]) -> bool {
    map[0] == 1.0 && map[1] == 0.0 && map[2] == 0.0 && map[3] == 1.0
}

/// In-place `p -> A (p - c) + c + s·o` on one flattened point set.
pub fn point_affine_row(row: &mut [f64], map: &[f64], range_scaled: bool) {
    let s = if range_scaled {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    } else {
        1.0
    };
    let (ox, oy) = (map[4] * s, map[5] * s);
    if is_identity_linear(map) {
        // No centering round trip, so the identity map is exact.
        if ox != 0.0 || oy != 0.0 {
            for pt in row.chunks_mut(2) {
                pt[0] += ox;
                pt[1] += oy;
            }
        }
        return;
    }
    let m = (row.len() / 2) as f64;
    let cx = row.iter().step_by(2).sum::<f64>() / m;
    let cy = row.iter().skip(1).step_by(2).sum::<f64>() / m;
    for pt in row.chunks_mut(2) {
        let (dx, dy) = (pt[0] - cx, pt[1] - cy);
        pt[0] = map[0] * dx + map[1] * dy + cx + ox;
        pt[1] = map[2] * dx + map[3] * dy + cy + oy;
    }
}

/// Adjoint of [`point_affine_row`] with respect to the points (offsets and
/// range are constants).
fn point_affine_row_adjoint(row: &mut [f64], map: &[f64]) {
    if is_identity_linear(map) {
        return;
    }
    let m = (row.len() / 2) as f64;
    // d/dp_k = Aᵀ g_k + (1/m) Σ_l (g_l - Aᵀ g_l)
    let mut mean_gx = 0.0;
    let mut mean_gy = 0.0;
    let mut mean_tx = 0.0;
    let mut mean_ty = 0.0;
    for pt in row.chunks_mut(2) {
        let (gx, gy) = (pt[0], pt[1]);
        let tx = map[0] * gx + map[2] * gy;
        let ty = map[1] * gx + map[3] * gy;
        mean_gx += gx;
        mean_gy += gy;
        mean_tx += tx;
        mean_ty += ty;
        pt[0] = tx;
        pt[1] = ty;
    }
    let cx = (mean_gx - mean_tx) / m;
    let cy = (mean_gy - mean_ty) / m;
    for pt in row.chunks_mut(2) {
        pt[0] += cx;
        pt[1] += cy;
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
