//! Tape of tensor-valued nodes with reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value. Nodes are
//! immutable once recorded; [`Graph::backward`] walks the tape in reverse and
//! returns a [`Gradients`] table. Nodes that do not depend on a trainable leaf
//! are skipped entirely, so frozen sub-networks never receive gradients.

use crate::error::{LgError, Result};
use crate::geometry::BBox;
use crate::loss_metrics::weighted_sigmoid_ce_weighted;

use super::kernels;
use super::tensor::{ConvSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        spec: ConvSpec,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    GlobalAvgPool(NodeId),
    RoiMaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Stack(Vec<NodeId>),
    /// Constant left factor times a node: `lhs[r,n] * rhs[n,m]`.
    ConstMatMul {
        lhs: Tensor,
        rhs: NodeId,
    },
    /// `out[i] = sum_k w[i,k] * x[i,k] + b[i]`.
    RowDot {
        w: NodeId,
        x: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    DotConst(NodeId, Tensor),
    WeightedSigmoidCe {
        logits: NodeId,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient table produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(LgError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Result<NodeId> {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        spec: ConvSpec,
    ) -> Result<NodeId> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(kernels),
            self.value(bias),
            &spec,
        )?;
        let tracked = self.tracked(&[input, kernels, bias]);
        self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                spec,
            },
            tracked,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.max(0.0));
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Relu(x), tracked, "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(sigmoid);
        let tracked = self.tracked(&[x]);
        self.push(out, Op::Sigmoid(x), tracked, "sigmoid")
    }

    /// `w * x + b` for a vector `x[n]`, matrix `w[m,n]` and vector `b[m]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        wv.expect_rank(2, "affine")?;
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        if xv.len() != n || bv.len() != m {
            return Err(LgError::shape(
                "affine",
                format!(
                    "x has {} entries, W is {}x{}, b has {}",
                    xv.len(),
                    m,
                    n,
                    bv.len()
                ),
            ));
        }
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wv.data()[i * n..(i + 1) * n];
                row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>() + bv.data()[i]
            })
            .collect();
        let tracked = self.tracked(&[x, w, b]);
        self.push(Tensor::vector(out), Op::Affine { x, w, b }, tracked, "affine")
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        xv.expect_rank(3, "global_avg_pool")?;
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if h == 0 || w == 0 {
            return Err(LgError::shape("global_avg_pool", "empty spatial extent"));
        }
        let n = (h * w) as f64;
        let out: Vec<f64> = (0..c)
            .map(|ch| xv.channel(ch).iter().sum::<f64>() / n)
            .collect();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::vector(out), Op::GlobalAvgPool(x), tracked, "global_avg_pool")
    }

    pub fn roi_max_pool(
        &mut self,
        x: NodeId,
        bbox: &BBox,
        out_h: usize,
        out_w: usize,
        image_w: usize,
        image_h: usize,
    ) -> Result<NodeId> {
        let (out, argmax) =
            kernels::roi_max_pool_forward(self.value(x), bbox, out_h, out_w, image_w, image_h)?;
        let tracked = self.tracked(&[x]);
        self.push(
            out,
            Op::RoiMaxPool { input: x, argmax },
            tracked,
            "roi_max_pool",
        )
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let Some(first) = rows.first() else {
            return Err(LgError::shape("stack", "no rows"));
        };
        let k = self.value(*first).len();
        let mut data = Vec::with_capacity(rows.len() * k);
        for r in rows {
            let v = self.value(*r);
            if v.len() != k {
                return Err(LgError::shape(
                    "stack",
                    format!("row lengths differ: {} vs {}", k, v.len()),
                ));
            }
            data.extend_from_slice(v.data());
        }
        let tracked = self.tracked(rows);
        let out = Tensor::matrix(rows.len(), k, data)?;
        self.push(out, Op::Stack(rows.to_vec()), tracked, "stack")
    }

    /// `lhs * rhs` where `lhs` is a constant matrix.
    pub fn const_matmul(&mut self, lhs: Tensor, rhs: NodeId) -> Result<NodeId> {
        lhs.expect_rank(2, "const_matmul")?;
        let rv = self.value(rhs);
        rv.expect_rank(2, "const_matmul")?;
        let (r, n) = (lhs.shape()[0], lhs.shape()[1]);
        let m = rv.shape()[1];
        if rv.shape()[0] != n {
            return Err(LgError::shape(
                "const_matmul",
                format!("{:?} x {:?}", lhs.shape(), rv.shape()),
            ));
        }
        let mut out = vec![0.0; r * m];
        for i in 0..r {
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..n {
                let a = lhs.data()[i * n + j];
                if a == 0.0 {
                    continue;
                }
                let rrow = &rv.data()[j * m..(j + 1) * m];
                for (o, x) in orow.iter_mut().zip(rrow) {
                    *o += a * x;
                }
            }
        }
        let tracked = self.tracked(&[rhs]);
        let out = Tensor::matrix(r, m, out)?;
        self.push(out, Op::ConstMatMul { lhs, rhs }, tracked, "const_matmul")
    }

    /// Per-row inner product plus bias: `out[i] = w[i,:] . x[i,:] + b[i]`.
    pub fn row_dot(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (wv, xv, bv) = (self.value(w), self.value(x), self.value(b));
        wv.expect_rank(2, "row_dot")?;
        if wv.shape() != xv.shape() || bv.len() != wv.shape()[0] {
            return Err(LgError::shape(
                "row_dot",
                format!("w {:?}, x {:?}, b {:?}", wv.shape(), xv.shape(), bv.shape()),
            ));
        }
        let (r, k) = (wv.shape()[0], wv.shape()[1]);
        let out: Vec<f64> = (0..r)
            .map(|i| {
                let a = &wv.data()[i * k..(i + 1) * k];
                let c = &xv.data()[i * k..(i + 1) * k];
                a.iter().zip(c).map(|(p, q)| p * q).sum::<f64>() + bv.data()[i]
            })
            .collect();
        let tracked = self.tracked(&[w, x, b]);
        self.push(Tensor::vector(out), Op::RowDot { w, x, b }, tracked, "row_dot")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(LgError::shape(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        self.push(out, Op::Add(a, b), tracked, "add")
    }

    pub fn add_const(&mut self, a: NodeId, c: &Tensor) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(LgError::shape(
                "add_const",
                format!("{:?} vs {:?}", av.shape(), c.shape()),
            ));
        }
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a]);
        self.push(out, Op::AddConst(a), tracked, "add_const")
    }

    pub fn scale(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        let out = self.value(a).scale(alpha);
        let tracked = self.tracked(&[a]);
        self.push(out, Op::Scale(a, alpha), tracked, "scale")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked, "sum")
    }

    /// `sum_i a[i] * c[i]` for a constant `c` of the same length.
    pub fn dot_const(&mut self, a: NodeId, c: &Tensor) -> Result<NodeId> {
        let av = self.value(a);
        if av.len() != c.len() {
            return Err(LgError::shape(
                "dot_const",
                format!("{} vs {} entries", av.len(), c.len()),
            ));
        }
        let s = av.data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::DotConst(a, c.clone()), tracked, "dot_const")
    }

    /// Mean over entries of the positive-weighted sigmoid cross entropy.
    /// `pos_weights[i]` multiplies the positive term of entry `i`.
    pub fn weighted_sigmoid_ce(
        &mut self,
        logits: NodeId,
        labels: &[f64],
        pos_weights: &[f64],
    ) -> Result<NodeId> {
        let z = self.value(logits);
        if z.len() != labels.len() || z.len() != pos_weights.len() {
            return Err(LgError::shape(
                "weighted_sigmoid_ce",
                format!(
                    "{} logits, {} labels, {} weights",
                    z.len(),
                    labels.len(),
                    pos_weights.len()
                ),
            ));
        }
        let (loss, grad) = weighted_sigmoid_ce_weighted(z.data(), labels, pos_weights);
        let tracked = self.tracked(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::WeightedSigmoidCe { logits, grad },
            tracked,
            "weighted_sigmoid_ce",
        )
    }

    /// Reverse sweep from `root`, seeded with ones (so a non-scalar root is
    /// differentiated through the sum of its entries).
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].tracked {
            grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
        if !self.nodes[id.0].tracked {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                spec,
            } => {
                let want = [
                    self.is_tracked(*input),
                    self.is_tracked(*kernels),
                    self.is_tracked(*bias),
                ];
                let (gx, gw, gb) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernels),
                    self.value(*bias),
                    spec,
                    g,
                    want,
                )
                .expect("shapes validated in forward");
                if let Some(gx) = gx {
                    self.accumulate(grads, *input, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *kernels, gw);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gi)| gi * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, n) = (wv.shape()[0], wv.shape()[1]);
                if self.is_tracked(*x) {
                    let mut dx = vec![0.0; n];
                    for i in 0..m {
                        let row = &wv.data()[i * n..(i + 1) * n];
                        for (d, wij) in dx.iter_mut().zip(row) {
                            *d += g[i] * wij;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.is_tracked(*w) {
                    let mut dw = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dw[i * n + j] = g[i] * xv.data()[j];
                        }
                    }
                    self.accumulate(grads, *w, dw);
                }
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (c, plane) = (xv.shape()[0], xv.shape()[1] * xv.shape()[2]);
                let inv = 1.0 / plane as f64;
                let mut d = Vec::with_capacity(c * plane);
                for gc in g.iter().take(c) {
                    d.extend(std::iter::repeat(gc * inv).take(plane));
                }
                self.accumulate(grads, *x, d);
            }
            Op::RoiMaxPool { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (&src, &gi) in argmax.iter().zip(g) {
                    d[src] += gi;
                }
                self.accumulate(grads, *input, d);
            }
            Op::Stack(rows) => {
                let k = node.value.shape()[1];
                for (r, id) in rows.iter().enumerate() {
                    self.accumulate(grads, *id, g[r * k..(r + 1) * k].to_vec());
                }
            }
            Op::ConstMatMul { lhs, rhs } => {
                let (r, n) = (lhs.shape()[0], lhs.shape()[1]);
                let m = node.value.shape()[1];
                let mut d = vec![0.0; n * m];
                for i in 0..r {
                    let grow = &g[i * m..(i + 1) * m];
                    for j in 0..n {
                        let a = lhs.data()[i * n + j];
                        if a == 0.0 {
                            continue;
                        }
                        for (dd, gg) in d[j * m..(j + 1) * m].iter_mut().zip(grow) {
                            *dd += a * gg;
                        }
                    }
                }
                self.accumulate(grads, *rhs, d);
            }
            Op::RowDot { w, x, b } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let k = wv.shape()[1];
                let expand = |src: &Tensor| -> Vec<f64> {
                    src.data()
                        .iter()
                        .enumerate()
                        .map(|(idx, v)| g[idx / k] * v)
                        .collect()
                };
                if self.is_tracked(*w) {
                    self.accumulate(grads, *w, expand(xv));
                }
                if self.is_tracked(*x) {
                    self.accumulate(grads, *x, expand(wv));
                }
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Scale(a, alpha) => self.accumulate(grads, *a, g.iter().map(|v| v * alpha).collect()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::DotConst(a, c) => {
                self.accumulate(grads, *a, c.data().iter().map(|v| v * g[0]).collect());
            }
            Op::WeightedSigmoidCe { logits, grad } => {
                self.accumulate(grads, *logits, grad.iter().map(|v| v * g[0]).collect());
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
