//! Reverse-mode automatic differentiation over a fixed, statically shaped
//! operation graph.
//!
//! A [`Graph`] is built once through [`GraphBuilder`] and never mutated
//! afterwards; the only dynamism is re-binding its leaves. Nodes are stored in
//! construction order, which is a topological order because every op can only
//! reference nodes that already exist. `backward` walks that order in reverse.
//!
//! The op set is deliberately small: affine maps, 2-D convolution (stride 1,
//! zero padding), relu, 2x2 max-pooling, flatten, elementwise add/mul/scale,
//! fused softmax-cross-entropy, and sum/mean reductions.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node inside the graph under construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Param,
}

/// Which leaves `backward` should return gradients for.
#[derive(Debug, Clone)]
pub enum LeafSelector {
    All,
    Params,
    Inputs,
    Names(Vec<String>),
}

impl LeafSelector {
    fn selects(&self, name: &str, kind: LeafKind) -> bool {
        match self {
            LeafSelector::All => true,
            LeafSelector::Params => kind == LeafKind::Param,
            LeafSelector::Inputs => kind == LeafKind::Input,
            LeafSelector::Names(names) => names.iter().any(|n| n == name),
        }
    }
}

pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String, kind: LeafKind },
    Affine { x: usize, w: usize, b: usize },
    Conv2d { x: usize, w: usize, b: usize, pad: usize },
    Relu(usize),
    MaxPool2(usize),
    Flatten(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    SoftmaxXent { logits: usize, targets: usize },
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf { .. } => vec![],
            Op::Affine { x, w, b } | Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::Relu(a) | Op::MaxPool2(a) | Op::Flatten(a) | Op::Scale(a, _) => vec![a],
            Op::Sum(a) | Op::Mean(a) => vec![a],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::SoftmaxXent { logits, targets } => vec![logits, targets],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Values cached by forward for use in backward.
#[derive(Debug, Clone)]
enum Aux {
    None,
    Argmax(Vec<usize>),
    Softmax { probs: Vec<f64>, lse: Vec<f64> },
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn leaf(&mut self, name: &str, shape: &[usize], kind: LeafKind) -> Result<NodeId> {
        let taken = self
            .nodes
            .iter()
            .any(|n| matches!(&n.op, Op::Leaf { name: existing, .. } if existing == name));
        if taken {
            return Err(Error::InvalidConfig(format!("duplicate leaf name `{name}`")));
        }
        Ok(self.push(
            Op::Leaf {
                name: name.to_string(),
                kind,
            },
            shape.to_vec(),
        ))
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, LeafKind::Input)
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, LeafKind::Param)
    }

    /// `x[n, i] · w[i, o] + b[o]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] {
            return Err(Error::shape("affine weight", &[xs.get(1).copied().unwrap_or(0), 0], ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("affine bias", &[ws[1]], bs));
        }
        let shape = vec![xs[0], ws[1]];
        Ok(self.push(Op::Affine { x: x.0, w: w.0, b: b.0 }, shape))
    }

    /// Stride-1 convolution of `x[n, c, h, w]` with `w[o, c, kh, kw]`, zero padding `pad`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
            return Err(Error::shape("conv2d weight", &[0, xs.get(1).copied().unwrap_or(0), 0, 0], ws));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d bias", &[ws[0]], bs));
        }
        let (h, wd) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if h < ws[2] || wd < ws[3] {
            return Err(Error::shape("conv2d kernel larger than input", xs, ws));
        }
        let shape = vec![xs[0], ws[0], h - ws[2] + 1, wd - ws[3] + 1];
        Ok(self.push(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                pad,
            },
            shape,
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a.0), shape)
    }

    /// 2x2 max-pooling with stride 2 over the trailing two axes; odd edges are dropped.
    pub fn max_pool2(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("max_pool2 input", &[0, 0, 2, 2], s));
        }
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
        Ok(self.push(Op::MaxPool2(a.0), shape))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        let n = s.first().copied().unwrap_or(1);
        let rest = s.iter().skip(1).product();
        self.push(Op::Flatten(a.0), vec![n, rest])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add(a.0, b.0), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul(a.0, b.0), shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a.0, factor), shape)
    }

    /// Per-row cross-entropy `-Σ_k t[n,k] · log softmax(z[n])_k`, output shape `[n]`.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.same_shape("softmax_xent", logits, targets)?;
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(Error::shape("softmax_xent logits", &[0, 0], s));
        }
        let shape = vec![s[0]];
        Ok(self.push(
            Op::SoftmaxXent {
                logits: logits.0,
                targets: targets.0,
            },
            shape,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a.0), vec![])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a.0), vec![])
    }

    fn same_shape(&self, ctx: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(ctx, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Freezes the graph with `root` as its output node.
    pub fn build(self, root: NodeId) -> Graph {
        let n = self.nodes.len();
        Graph {
            nodes: self.nodes,
            root: root.0,
            values: vec![None; n],
            aux: vec![Aux::None; n],
            evaluated: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    root: usize,
    values: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
    evaluated: bool,
}

impl Graph {
    /// Leaf names, kinds and declared shapes in construction order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, LeafKind, &[usize])> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Leaf { name, kind } => Some((name.as_str(), *kind, n.shape.as_slice())),
            _ => None,
        })
    }

    pub fn root_shape(&self) -> &[usize] {
        &self.nodes[self.root].shape
    }

    /// Cached forward value of `id`, available after `forward`.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Evaluates the graph. Every leaf must appear in `bindings` with its declared shape.
    pub fn forward(&mut self, bindings: &[(&str, &Tensor)]) -> Result<Tensor> {
        self.evaluated = false;
        for (name, _) in bindings {
            if !self.leaves().any(|(n, _, _)| n == *name) {
                return Err(Error::UnknownLeaf((*name).to_string()));
            }
        }
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Leaf { name, .. } => {
                    let t = bindings
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| *t)
                        .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    if t.shape() != self.nodes[i].shape.as_slice() {
                        return Err(Error::shape(format!("binding `{name}`"), &self.nodes[i].shape, t.shape()));
                    }
                    t.clone()
                }
                op => {
                    let op = op.clone();
                    let (value, aux) = self.eval(i, &op);
                    self.aux[i] = aux;
                    value
                }
            };
            self.values[i] = Some(value);
        }
        self.evaluated = true;
        Ok(self.values[self.root].clone().expect("root evaluated"))
    }

    fn val(&self, i: usize) -> &Tensor {
        self.values[i].as_ref().expect("inputs evaluated before use")
    }

    fn eval(&self, i: usize, op: &Op) -> (Tensor, Aux) {
        let shape = self.nodes[i].shape.clone();
        match *op {
            Op::Leaf { .. } => unreachable!("leaves are bound, not evaluated"),
            Op::Affine { x, w, b } => {
                let (x, w, b) = (self.val(x), self.val(w), self.val(b));
                let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                let mut out = vec![0.0; n * dout];
                for r in 0..n {
                    let row = &mut out[r * dout..(r + 1) * dout];
                    row.copy_from_slice(b.data());
                    for k in 0..din {
                        let xv = x.data()[r * din + k];
                        if xv != 0.0 {
                            let wrow = &w.data()[k * dout..(k + 1) * dout];
                            for (o, wv) in row.iter_mut().zip(wrow) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
                (tensor(shape, out), Aux::None)
            }
            Op::Conv2d { x, w, b, pad } => {
                let out = conv2d_forward(self.val(x), self.val(w), self.val(b), pad, &shape);
                (tensor(shape, out), Aux::None)
            }
            Op::Relu(a) => (self.val(a).map(|v| if v > 0.0 { v } else { 0.0 }), Aux::None),
            Op::MaxPool2(a) => {
                let (out, arg) = max_pool2_forward(self.val(a), &shape);
                (tensor(shape, out), Aux::Argmax(arg))
            }
            Op::Flatten(a) => (tensor(shape, self.val(a).data().to_vec()), Aux::None),
            Op::Add(a, b) => {
                let out = zip_with(self.val(a), self.val(b), |p, q| p + q);
                (tensor(shape, out), Aux::None)
            }
            Op::Mul(a, b) => {
                let out = zip_with(self.val(a), self.val(b), |p, q| p * q);
                (tensor(shape, out), Aux::None)
            }
            Op::Scale(a, f) => (self.val(a).map(|v| v * f), Aux::None),
            Op::SoftmaxXent { logits, targets } => {
                let (z, t) = (self.val(logits), self.val(targets));
                let (n, k) = (z.shape()[0], z.shape()[1]);
                let mut probs = vec![0.0; n * k];
                let mut lse = vec![0.0; n];
                let mut out = vec![0.0; n];
                for r in 0..n {
                    let zr = &z.data()[r * k..(r + 1) * k];
                    let tr = &t.data()[r * k..(r + 1) * k];
                    let m = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = zr.iter().map(|v| (v - m).exp()).sum();
                    let l = m + s.ln();
                    lse[r] = l;
                    for c in 0..k {
                        probs[r * k + c] = (zr[c] - l).exp();
                    }
                    out[r] = zr.iter().zip(tr).map(|(zv, tv)| tv * (l - zv)).sum();
                }
                (tensor(shape, out), Aux::Softmax { probs, lse })
            }
            Op::Sum(a) => (Tensor::scalar(self.val(a).sum()), Aux::None),
            Op::Mean(a) => {
                let v = self.val(a);
                (Tensor::scalar(v.sum() / v.len() as f64), Aux::None)
            }
        }
    }

    /// Propagates the gradient of the scalar root back to the selected leaves.
    pub fn backward(&mut self, wrt: &LeafSelector) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::BackwardBeforeForward);
        }
        let root_shape = &self.nodes[self.root].shape;
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape.clone()));
        }

        // A node needs a gradient only if some selected leaf feeds into it.
        let mut needs = vec![false; self.nodes.len()];
        for i in 0..self.nodes.len() {
            needs[i] = match &self.nodes[i].op {
                Op::Leaf { name, kind } => wrt.selects(name, *kind),
                op => op.inputs().iter().any(|&j| needs[j]),
            };
        }
        if let LeafSelector::Names(names) = wrt {
            for name in names {
                if !self.leaves().any(|(n, _, _)| n == name) {
                    return Err(Error::UnknownLeaf(name.clone()));
                }
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[self.root] = Some(vec![1.0]);
        for i in (0..=self.root).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf { .. } = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g, &needs, &mut grads);
        }

        let mut out = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name, kind } = &node.op {
                if wrt.selects(name, *kind) {
                    let data = grads[i]
                        .take()
                        .unwrap_or_else(|| vec![0.0; node.shape.iter().product()]);
                    out.insert(name.clone(), tensor(node.shape.clone(), data));
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, op: &Op, g: &[f64], needs: &[bool], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |j: usize, contrib: Vec<f64>| {
            if !needs[j] {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
                slot => *slot = Some(contrib),
            }
        };
        match *op {
            Op::Leaf { .. } => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.val(x), self.val(w));
                let (n, din, dout) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if needs[x] {
                    let mut gx = vec![0.0; n * din];
                    for r in 0..n {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let wrow = &wv.data()[k * dout..(k + 1) * dout];
                            gx[r * din + k] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    acc(x, gx);
                }
                if needs[w] {
                    let mut gw = vec![0.0; din * dout];
                    for r in 0..n {
                        let grow = &g[r * dout..(r + 1) * dout];
                        for k in 0..din {
                            let xk = xv.data()[r * din + k];
                            if xk != 0.0 {
                                let gwrow = &mut gw[k * dout..(k + 1) * dout];
                                for (o, gv) in gwrow.iter_mut().zip(grow) {
                                    *o += xk * gv;
                                }
                            }
                        }
                    }
                    acc(w, gw);
                }
                if needs[b] {
                    let mut gb = vec![0.0; dout];
                    for r in 0..n {
                        for (o, gv) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *o += gv;
                        }
                    }
                    acc(b, gb);
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let (gx, gw, gb) = conv2d_backward(
                    self.val(x),
                    self.val(w),
                    pad,
                    &self.nodes[i].shape,
                    g,
                    (needs[x], needs[w]),
                );
                if let Some(gx) = gx {
                    acc(x, gx);
                }
                if let Some(gw) = gw {
                    acc(w, gw);
                }
                if needs[b] {
                    acc(b, gb);
                }
            }
            Op::Relu(a) => {
                // Subgradient at 0 is 0.
                let gx = self
                    .val(a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(a, gx);
            }
            Op::MaxPool2(a) => {
                let Aux::Argmax(arg) = &self.aux[i] else {
                    unreachable!("max-pool caches argmax")
                };
                let mut gx = vec![0.0; self.val(a).len()];
                for (&src, gv) in arg.iter().zip(g) {
                    gx[src] += gv;
                }
                acc(a, gx);
            }
            Op::Flatten(a) => acc(a, g.to_vec()),
            Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(a).data(), self.val(b).data());
                acc(a, g.iter().zip(bv).map(|(gv, q)| gv * q).collect());
                acc(b, g.iter().zip(av).map(|(gv, p)| gv * p).collect());
            }
            Op::Scale(a, f) => acc(a, g.iter().map(|gv| gv * f).collect()),
            Op::SoftmaxXent { logits, targets } => {
                let Aux::Softmax { probs, lse } = &self.aux[i] else {
                    unreachable!("softmax_xent caches probabilities")
                };
                let (z, t) = (self.val(logits), self.val(targets));
                let (n, k) = (z.shape()[0], z.shape()[1]);
                if needs[logits] {
                    let mut gz = vec![0.0; n * k];
                    for r in 0..n {
                        let tr = &t.data()[r * k..(r + 1) * k];
                        let tsum: f64 = tr.iter().sum();
                        for c in 0..k {
                            gz[r * k + c] = g[r] * (probs[r * k + c] * tsum - tr[c]);
                        }
                    }
                    acc(logits, gz);
                }
                if needs[targets] {
                    let mut gt = vec![0.0; n * k];
                    for r in 0..n {
                        for c in 0..k {
                            gt[r * k + c] = g[r] * (lse[r] - z.data()[r * k + c]);
                        }
                    }
                    acc(targets, gt);
                }
            }
            Op::Sum(a) => acc(a, vec![g[0]; self.val(a).len()]),
            Op::Mean(a) => {
                let n = self.val(a).len();
                acc(a, vec![g[0] / n as f64; n]);
            }
        }
    }

    /// Fails if any cached forward value is NaN or infinite.
    pub fn check_health(&self) -> Result<()> {
        for (i, v) in self.values.iter().enumerate() {
            if let Some(t) = v {
                if !t.all_finite() {
                    return Err(Error::NonFinite(format!("node {i} ({:?})", self.nodes[i].op)));
                }
            }
        }
        Ok(())
    }

    /// Smallest distance of the last forward pass from a non-differentiable
    /// point: `|pre-activation|` at relu nodes and the gap between the two
    /// largest entries of each max-pool window. `+inf` if neither op occurs.
    pub fn min_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Relu(a) => {
                    if let Some(v) = &self.values[a] {
                        margin = v.data().iter().fold(margin, |m, x| m.min(x.abs()));
                    }
                }
                Op::MaxPool2(a) => {
                    if let (Some(v), Aux::Argmax(_)) = (&self.values[a], &self.aux[i]) {
                        margin = margin.min(max_pool2_margin(v));
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op output matches declared shape")
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect()
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize, out_shape: &[usize]) -> Vec<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [oc, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * oc * oh * ow];
    for s in 0..n {
        for o in 0..oc {
            let plane = &mut out[(s * oc + o) * oh * ow..(s * oc + o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = b.data()[o]);
            for ci in 0..c {
                let xin = &xd[(s * c + ci) * h * wd..(s * c + ci + 1) * h * wd];
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdat[((o * c + ci) * kh + ki) * kw + kj];
                        for i in 0..oh {
                            let r = i + ki;
                            if r < pad || r - pad >= h {
                                continue;
                            }
                            let xrow = &xin[(r - pad) * wd..(r - pad + 1) * wd];
                            let orow = &mut plane[i * ow..(i + 1) * ow];
                            for (j, ov) in orow.iter_mut().enumerate() {
                                let col = j + kj;
                                if col >= pad && col - pad < wd {
                                    *ov += wv * xrow[col - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>);

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    pad: usize,
    out_shape: &[usize],
    g: &[f64],
    (need_x, need_w): (bool, bool),
) -> ConvGrads {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [oc, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let (xd, wdat) = (x.data(), w.data());
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let mut gb = vec![0.0; oc];
    for s in 0..n {
        for o in 0..oc {
            let gplane = &g[(s * oc + o) * oh * ow..(s * oc + o + 1) * oh * ow];
            gb[o] += gplane.iter().sum::<f64>();
            for ci in 0..c {
                let base = (s * c + ci) * h * wd;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let widx = ((o * c + ci) * kh + ki) * kw + kj;
                        let wv = wdat[widx];
                        let mut wacc = 0.0;
                        for i in 0..oh {
                            let r = i + ki;
                            if r < pad || r - pad >= h {
                                continue;
                            }
                            for j in 0..ow {
                                let col = j + kj;
                                if col < pad || col - pad >= wd {
                                    continue;
                                }
                                let xi = base + (r - pad) * wd + (col - pad);
                                let gv = gplane[i * ow + j];
                                wacc += gv * xd[xi];
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += gv * wv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn max_pool2_forward(x: &Tensor, out_shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let [h, w] = [x.shape()[2], x.shape()[3]];
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let planes = out_shape[0] * out_shape[1];
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    // Strict comparison: ties go to the first window element.
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn max_pool2_margin(x: &Tensor) -> f64 {
    let [h, w] = [x.shape()[2], x.shape()[3]];
    let planes = x.shape()[0] * x.shape()[1];
    let mut margin = f64::INFINITY;
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let mut vals = [0.0; 4];
                for (slot, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    vals[slot] = x.data()[base + (2 * i + di) * w + 2 * j + dj];
                }
                vals.sort_by(|a, b| b.total_cmp(a));
                margin = margin.min(vals[0] - vals[1]);
            }
        }
    }
    margin
}

/// Gradients whose magnitudes are both below this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Largest relative disagreement between `backward` and central differences
/// over every coordinate of every leaf.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
pub fn finite_diff_check(graph: &mut Graph, bindings: &[(&str, &Tensor)], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be > 0, got {step}")));
    }
    graph.forward(bindings)?;
    let analytic = graph.backward(&LeafSelector::All)?;

    let mut owned: Vec<(String, Tensor)> = bindings
        .iter()
        .map(|(n, t)| ((*n).to_string(), (*t).clone()))
        .collect();
    let mut worst: f64 = 0.0;
    for li in 0..owned.len() {
        let name = owned[li].0.clone();
        let Some(grad) = analytic.get(&name) else { continue };
        for c in 0..owned[li].1.len() {
            let orig = owned[li].1.data()[c];
            owned[li].1.data_mut()[c] = orig + step;
            let plus = eval_scalar(graph, &owned)?;
            owned[li].1.data_mut()[c] = orig - step;
            let minus = eval_scalar(graph, &owned)?;
            owned[li].1.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[c];
            let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    // Leave the graph holding the unperturbed forward pass.
    graph.forward(bindings)?;
    Ok(worst)
}

fn eval_scalar(graph: &mut Graph, owned: &[(String, Tensor)]) -> Result<f64> {
    let b: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    Ok(graph.forward(&b)?.item())
}
