//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied to its variables. Leaves are
//! either parameters (gradients wanted) or constants (treated as fixed, which
//! is how stop-gradient is expressed). [`Tape::backward`] walks the record in
//! reverse and returns gradients for parameter leaves only.

use super::ops::{self, ConvGeom, COSINE_EPS};
use super::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<Vec<f64>>,
    },
    Relu(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    ChannelMean(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        positions: Vec<usize>,
    },
    CosineRows {
        x: Var,
        targets: Tensor,
    },
    MeanRows(Var),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    LinComb(Vec<(Var, f64)>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
    Mse {
        x: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<&'static str>,
}

/// Gradients of one backward pass, indexed by parameter [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First primitive whose output contained NaN or ±∞, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    /// Error naming the first non-finite primitive, if one was recorded.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(name) => Err(Error::NonFinite(name.to_string())),
            None => Ok(()),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push("param", t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push("constant", t, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let keep = self.needs(w);
        let (out, cols) =
            ops::conv2d_forward(self.value(x), self.value(w), self.value(b), &geom, keep);
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push("conv2d", out, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.needs(x);
        self.push("relu", out, Op::Relu(x), rg)
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::bilinear_upsample(self.value(x), factor)?;
        let rg = self.needs(x);
        Ok(self.push("bilinear_upsample", out, Op::Upsample { x, factor }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        let rg = self.needs(x);
        Ok(self.push("softmax", out, Op::Softmax { x, axis }, rg))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let out = ops::channel_mean(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push("channel_mean", out, Op::ChannelMean(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push("add", out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push("mul", out, Op::Mul(a, b), rg))
    }

    /// `a ⊙ m + c`.
    pub fn mul_add(&mut self, a: Var, m: Var, c: Var) -> Result<Var> {
        let prod = self.mul(a, m)?;
        self.add(prod, c)
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.needs(x);
        self.push("affine", out, Op::Affine { x, scale }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.needs(x);
        Ok(self.push("reshape", out, Op::Reshape(x), rg))
    }

    /// Gathers channel vectors of a `B×C×P×Q` map into an `N×C` matrix.
    /// Each position is the flat index `b·P·Q + i` of a spatial cell.
    pub fn gather_rows(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let [b, c, p, q] = match *t.shape() {
            [b, c, p, q] => [b, c, p, q],
            _ => contract!("gather_rows expects B×C×P×Q, got {:?}", t.shape()),
        };
        if positions.is_empty() {
            contract!("gather_rows with no positions");
        }
        let pq = p * q;
        let mut out = Vec::with_capacity(positions.len() * c);
        for &pos in positions {
            if pos >= b * pq {
                contract!("gather position {pos} out of range for {b}×{pq} cells");
            }
            let (bi, i) = (pos / pq, pos % pq);
            out.extend((0..c).map(|ci| t.data()[(bi * c + ci) * pq + i]));
        }
        let out = Tensor::from_parts(vec![positions.len(), c], out);
        let rg = self.needs(x);
        let positions = positions.to_vec();
        Ok(self.push("gather_rows", out, Op::GatherRows { x, positions }, rg))
    }

    /// Row-wise cosine between `x` (N×C) and constant `targets` (N×C).
    /// Rows where either norm is below [`COSINE_EPS`] yield 0 and no gradient.
    pub fn cosine_rows(&mut self, x: Var, targets: Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape() != targets.shape() {
            contract!(
                "cosine_rows shapes {:?} vs {:?}",
                t.shape(),
                targets.shape()
            );
        }
        let c = t.shape()[1];
        let out: Vec<f64> = t
            .data()
            .chunks_exact(c)
            .zip(targets.data().chunks_exact(c))
            .map(|(a, b)| ops::cosine_unchecked(a, b))
            .collect();
        let out = Tensor::from_parts(vec![out.len()], out);
        let rg = self.needs(x);
        Ok(self.push("cosine_rows", out, Op::CosineRows { x, targets }, rg))
    }

    /// Mean over the last axis of an `R×K` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            contract!("mean_rows expects a matrix, got {:?}", t.shape());
        }
        let k = t.shape()[1];
        let out: Vec<f64> = t
            .data()
            .chunks_exact(k)
            .map(|r| r.iter().sum::<f64>() / k as f64)
            .collect();
        let out = Tensor::from_parts(vec![out.len()], out);
        let rg = self.needs(x);
        Ok(self.push("mean_rows", out, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// `Σ wᵢ xᵢ` over all elements of `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.numel() {
            contract!("weighted_sum: {} weights for {} elements", weights.len(), t.numel());
        }
        let s = t.data().iter().zip(&weights).map(|(a, w)| a * w).sum();
        let rg = self.needs(x);
        Ok(self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// `Σ cᵢ sᵢ` over one-element variables.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            s += c * self.value(v).item()?;
        }
        let rg = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push("lincomb", Tensor::scalar(s), Op::LinComb(terms.to_vec()), rg))
    }

    /// `Σₚ wₚ · (−log softmax(logits)[targetₚ])` over the pixels of a
    /// `B×Z×H×W` logit map; `targets` and `weights` are indexed `b·H·W + j`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let [b, z, h, w] = match *t.shape() {
            [b, z, h, w] => [b, z, h, w],
            _ => contract!("cross_entropy expects B×Z×H×W logits, got {:?}", t.shape()),
        };
        let hw = h * w;
        if targets.len() != b * hw || weights.len() != b * hw {
            contract!("cross_entropy: {} targets / {} weights for {} pixels", targets.len(), weights.len(), b * hw);
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= z) {
            contract!("label {bad} out of range for {z} classes");
        }
        let probs = ops::softmax(t, 1)?;
        let x = t.data();
        let mut loss = 0.0;
        for bi in 0..b {
            for j in 0..hw {
                let wgt = weights[bi * hw + j];
                if wgt == 0.0 {
                    continue;
                }
                let at = |k: usize| x[(bi * z + k) * hw + j];
                let max = (0..z).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..z).map(|k| (at(k) - max).exp()).sum::<f64>().ln();
                loss += wgt * (lse - at(targets[bi * hw + j]));
            }
        }
        let rg = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        };
        Ok(self.push("cross_entropy", Tensor::scalar(loss), op, rg))
    }

    /// Mean squared difference against a constant target of the same shape.
    pub fn mse(&mut self, x: Var, target: Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != target.shape() {
            contract!("mse shapes {:?} vs {:?}", t.shape(), target.shape());
        }
        let n = t.numel() as f64;
        let s = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.needs(x);
        Ok(self.push("mse", Tensor::scalar(s), Op::Mse { x, target }, rg))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            contract!("backward from non-scalar of shape {:?}", self.value(loss).shape());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.backprop(&node.op, &node.value, &dy, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) if n.requires_grad => {
                    Some(Tensor::from_parts(n.value.shape().to_vec(), g))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn backprop(&self, op: &Op, out: &Tensor, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let batch = self.value(*x).shape()[0];
                let (kp, n, cout) = (geom.patch_len(), geom.out_len(), geom.out_channels);
                let in_len = geom.in_channels * geom.in_h * geom.in_w;
                self.accumulate(grads, *b, |g| {
                    for bi in 0..batch {
                        for (co, gb) in g.iter_mut().enumerate() {
                            *gb += dy[(bi * cout + co) * n..][..n].iter().sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *w, |g| {
                    for bi in 0..batch {
                        let dyb = &dy[bi * cout * n..][..cout * n];
                        ops::gemm(cout, n, kp, dyb, false, &cols[bi], true, 1.0, g);
                    }
                });
                let wv = self.value(*w).data();
                self.accumulate(grads, *x, |g| {
                    let mut dcols = vec![0.0; kp * n];
                    for bi in 0..batch {
                        let dyb = &dy[bi * cout * n..][..cout * n];
                        ops::gemm(kp, cout, n, wv, true, dyb, false, 0.0, &mut dcols);
                        geom.col2im(&dcols, &mut g[bi * in_len..][..in_len]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |g| {
                    for ((gi, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        if v > 0.0 {
                            *gi += d;
                        }
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let shape = self.value(*x).shape();
                let (h, w) = (shape[2], shape[3]);
                let planes = shape[0] * shape[1];
                let ty = ops::interp_table(h, *factor);
                let tx = ops::interp_table(w, *factor);
                let ow = w * factor;
                self.accumulate(grads, *x, |g| {
                    for plane in 0..planes {
                        let src = &dy[plane * ty.len() * ow..][..ty.len() * ow];
                        let dst = &mut g[plane * h * w..][..h * w];
                        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                let d = src[oy * ow + ox];
                                dst[y0 * w + x0] += d * wy0 * wx0;
                                dst[y0 * w + x1] += d * wy0 * wx1;
                                dst[y1 * w + x0] += d * wy1 * wx0;
                                dst[y1 * w + x1] += d * wy1 * wx1;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = out.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let p = out.data();
                self.accumulate(grads, *x, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|k| dy[base + k * inner] * p[base + k * inner])
                                .sum();
                            for k in 0..len {
                                let at = base + k * inner;
                                g[at] += p[at] * (dy[at] - dot);
                            }
                        }
                    }
                });
            }
            Op::ChannelMean(x) => {
                let shape = self.value(*x).shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let inv = 1.0 / c as f64;
                self.accumulate(grads, *x, |g| {
                    for (bi, chunk) in g.chunks_exact_mut(c * hw).enumerate() {
                        let d = &dy[bi * hw..][..hw];
                        for plane in chunk.chunks_exact_mut(hw) {
                            for (gi, &di) in plane.iter_mut().zip(d) {
                                *gi += di * inv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |g| {
                        g.iter_mut().zip(dy).for_each(|(gi, &d)| *gi += d)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *gi += d * o;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *gi += d * o;
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, |g| {
                    g.iter_mut().zip(dy).for_each(|(gi, &d)| *gi += scale * d)
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |g| {
                    g.iter_mut().zip(dy).for_each(|(gi, &d)| *gi += d)
                });
            }
            Op::GatherRows { x, positions } => {
                let shape = self.value(*x).shape();
                let (c, pq) = (shape[1], shape[2] * shape[3]);
                self.accumulate(grads, *x, |g| {
                    for (r, &pos) in positions.iter().enumerate() {
                        let (bi, i) = (pos / pq, pos % pq);
                        for ci in 0..c {
                            g[(bi * c + ci) * pq + i] += dy[r * c + ci];
                        }
                    }
                });
            }
            Op::CosineRows { x, targets } => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                self.accumulate(grads, *x, |g| {
                    let rows = xv.data().chunks_exact(c).zip(targets.data().chunks_exact(c));
                    for (r, (a, t)) in rows.enumerate() {
                        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if na < COSINE_EPS || nt < COSINE_EPS {
                            continue;
                        }
                        let cos = a.iter().zip(t).map(|(p, q)| p * q).sum::<f64>() / (na * nt);
                        let d = dy[r];
                        for ci in 0..c {
                            g[r * c + ci] += d * (t[ci] / (na * nt) - cos * a[ci] / (na * na));
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let k = self.value(*x).shape()[1];
                let inv = 1.0 / k as f64;
                self.accumulate(grads, *x, |g| {
                    for (row, &d) in g.chunks_exact_mut(k).zip(dy) {
                        row.iter_mut().for_each(|gi| *gi += d * inv);
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |g| g.iter_mut().for_each(|gi| *gi += dy[0]));
            }
            Op::WeightedSum { x, weights } => {
                self.accumulate(grads, *x, |g| {
                    for (gi, w) in g.iter_mut().zip(weights) {
                        *gi += w * dy[0];
                    }
                });
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, |g| g[0] += c * dy[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let shape = probs.shape();
                let (z, hw) = (shape[1], shape[2] * shape[3]);
                let p = probs.data();
                self.accumulate(grads, *logits, |g| {
                    for (pix, (&y, &wgt)) in targets.iter().zip(weights).enumerate() {
                        if wgt == 0.0 {
                            continue;
                        }
                        let (bi, j) = (pix / hw, pix % hw);
                        for k in 0..z {
                            let at = (bi * z + k) * hw + j;
                            let onehot = if k == y { 1.0 } else { 0.0 };
                            g[at] += dy[0] * wgt * (p[at] - onehot);
                        }
                    }
                });
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x).data();
                let scale = 2.0 * dy[0] / xv.len() as f64;
                self.accumulate(grads, *x, |g| {
                    for ((gi, &a), &b) in g.iter_mut().zip(xv).zip(target.data()) {
                        *gi += scale * (a - b);
                    }
                });
            }
        }
    }
}
