//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] lives for one forward/backward pass. Every op eagerly computes
//! its value and records what it needs for the backward sweep.

use crate::conv::{col2im, gemm, im2col, ConvDims, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::{NnError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which statistics a normalization layer uses.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Per-batch mean and variance (training).
    Batch,
    /// Stored running statistics (inference).
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed by a training-mode normalization; `var` is unbiased.
#[derive(Clone, Debug)]
pub struct ObservedStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Const,
    Param(ParamId),
    Conv { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    Norm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Relu(Var),
    Add(Var, Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    SpatialMean(Var),
    Upsample2(Var),
    AvgPool2(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    SwapLast2(Var),
    Narrow { x: Var, start: usize },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse { pred: Var, target: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradients of every parameter leaf reached by the sweep.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NnError::Shape(msg.into()))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input that never receives a gradient, so backward can skip work for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Convolution over `[N, C, D, H, W]` with weight `[O, C, kd, kh, kw]`.
    pub fn conv(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
            return shape_err(format!("conv input {xs:?} incompatible with weight {ws:?}"));
        }
        let kernel = [ws[2], ws[3], ws[4]];
        let Some(output) = geom.output_extent([xs[2], xs[3], xs[4]], kernel) else {
            return shape_err(format!("conv input {xs:?} smaller than kernel {ws:?}"));
        };
        let dims = ConvDims { channels: xs[1], input: [xs[2], xs[3], xs[4]], kernel, output };
        let (n, o) = (xs[0], ws[0]);
        let (rows, positions) = (dims.rows(), dims.positions());
        let in_len = xs[1] * xs[2] * xs[3] * xs[4];
        let mut out = vec![0.0; n * o * positions];
        let pointwise = geom.is_pointwise(kernel);
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * positions] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let xs_n = &xv[s * in_len..(s + 1) * in_len];
                let b: &[f64] = if pointwise {
                    xs_n
                } else {
                    im2col(xs_n, &dims, &geom, &mut cols);
                    &cols
                };
                gemm(o, rows, positions, wv, false, b, false, 0.0, &mut out[s * o * positions..(s + 1) * o * positions]);
            }
        }
        if let Some(bias) = bias {
            let bv = self.value(bias).data();
            if bv.len() != o {
                return shape_err(format!("conv bias has {} entries for {o} outputs", bv.len()));
            }
            for s in 0..n {
                for (c, &bc) in bv.iter().enumerate() {
                    let off = (s * o + c) * positions;
                    out[off..off + positions].iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let value = Tensor::new(&[n, o, output[0], output[1], output[2]], out)?;
        Ok(self.push(value, Op::Conv { x, w, bias, geom }))
    }

    /// Channel normalization over `[N, C, ...]`, statistics pooled over all
    /// axes but the channel axis.
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<ObservedStats>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return shape_err(format!("norm needs [N, C, ...], got {xs:?}"));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let count = n * inner;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        if g.len() != c || b.len() != c {
            return shape_err("norm affine parameters do not match channel count");
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let (batch, observed) = match stats {
            NormStats::Batch => {
                if count < 2 {
                    return shape_err("batch statistics need at least two values per channel");
                }
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * inner;
                        s += xv[off..off + inner].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for i in 0..n {
                        let off = (i * c + ch) * inner;
                        ss += xv[off..off + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
                (true, Some(ObservedStats { mean: mean.clone(), var: unbiased }))
            }
            NormStats::Running { mean: rm, var: rv } => {
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
                (false, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                for j in off..off + inner {
                    let h = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        let var_out = self.push(value, Op::Norm { x, gamma, beta, xhat, inv_std, batch });
        Ok((var_out, observed))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(v.shape(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("add {:?} + {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// 2x2 max pooling with stride 2 over the last two (spatial) axes of a
    /// rank-5 tensor; depth is untouched.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 5 || xs[3] < 2 || xs[4] < 2 {
            return shape_err(format!("max_pool2 needs rank-5 with spatial >= 2, got {xs:?}"));
        }
        let (h, w) = (xs[3], xs[4]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = xs[0] * xs[1] * xs[2];
        let xv = self.value(x).data();
        let mut out = vec![0.0; planes * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[cand] > xv[best] {
                            best = cand;
                        }
                    }
                    let o = (p * ho + i) * wo + j;
                    out[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], xs[2], ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    /// 2x2 mean pooling with stride 2 over the spatial axes; odd trailing
    /// rows and columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 5 || xs[3] < 2 || xs[4] < 2 {
            return shape_err(format!("avg_pool2 needs rank-5 with spatial >= 2, got {xs:?}"));
        }
        let (h, w) = (xs[3], xs[4]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = xs[0] * xs[1] * xs[2];
        let xv = self.value(x).data();
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..ho {
                let (r0, r1) = (base + 2 * i * w, base + (2 * i + 1) * w);
                for j in 0..wo {
                    out[(p * ho + i) * wo + j] = 0.25 * (xv[r0 + 2 * j] + xv[r0 + 2 * j + 1] + xv[r1 + 2 * j] + xv[r1 + 2 * j + 1]);
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], xs[2], ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool2(x)))
    }

    /// Mean over the spatial axes: `[N, C, D, H, W] -> [N, C, D]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 5 {
            return shape_err(format!("spatial_mean needs rank 5, got {xs:?}"));
        }
        let area = xs[3] * xs[4];
        let data = self
            .value(x)
            .data()
            .chunks(area)
            .map(|c| c.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(&xs[..3], data)?;
        Ok(self.push(value, Op::SpatialMean(x)))
    }

    /// Nearest-neighbour x2 upsampling over the spatial axes of a rank-5 tensor.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 5 {
            return shape_err(format!("upsample2 needs rank 5, got {xs:?}"));
        }
        let (h, w) = (xs[3], xs[4]);
        let planes = xs[0] * xs[1] * xs[2];
        let xv = self.value(x).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for i in 0..2 * h {
                let src = &xv[p * h * w + (i / 2) * w..p * h * w + (i / 2 + 1) * w];
                let dst = &mut out[p * 4 * h * w + i * 2 * w..p * 4 * h * w + (i + 1) * 2 * w];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src[j / 2];
                }
            }
        }
        let value = Tensor::new(&[xs[0], xs[1], xs[2], 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2(x)))
    }

    /// `y = x w^T + b` for `x: [M, K]`, `w: [O, K]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear input {xs:?} incompatible with weight {ws:?}"));
        }
        let (m, k, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; m * o];
        gemm(m, k, o, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return shape_err("linear bias length mismatch");
            }
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, bb)| *v += bb);
            }
        }
        let value = Tensor::new(&[m, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `[A, B, C] -> [A, C, B]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return shape_err(format!("swap_last2 needs rank 3, got {xs:?}"));
        }
        let (a, b, c) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    out[(i * c + k) * b + j] = xv[(i * b + j) * c + k];
                }
            }
        }
        let value = Tensor::new(&[a, c, b], out)?;
        Ok(self.push(value, Op::SwapLast2(x)))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || start + len > xs[1] {
            return shape_err(format!("narrow {start}+{len} out of range for {xs:?}"));
        }
        let data = self
            .value(x)
            .data()
            .chunks(xs[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(&[xs[0], len], data)?;
        Ok(self.push(value, Op::Narrow { x, start }))
    }

    /// Mean cross-entropy of a softmax over axis 1 of `[N, K, ...]` logits.
    /// `labels` is ordered like the logits with the class axis removed.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() < 2 {
            return shape_err(format!("cross entropy needs [N, K, ...], got {ls:?}"));
        }
        let (n, k) = (ls[0], ls[1]);
        let inner: usize = ls[2..].iter().product();
        if labels.len() != n * inner {
            return shape_err(format!("{} labels for {} positions", labels.len(), n * inner));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return shape_err(format!("label {bad} out of range for {k} classes"));
        }
        let lv = self.value(logits).data();
        let probs = softmax_axis1(lv, n, k, inner);
        let mut loss = 0.0;
        for i in 0..n {
            for s in 0..inner {
                let label = labels[i * inner + s];
                let p = probs[(i * k + label) * inner + s];
                loss -= p.max(f64::MIN_POSITIVE).ln();
            }
        }
        loss /= (n * inner) as f64;
        let value = Tensor::scalar(loss);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return shape_err(format!("mse {:?} vs {:?}", pv.shape(), target.shape()));
        }
        let n = pv.numel() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let value = Tensor::scalar(loss);
        Ok(self.push(value, Op::Mse { pred, target: target.data().to_vec() }))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return shape_err("weighted_sum takes scalar terms");
            }
            total += w * t.item();
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return shape_err("backward root must be a scalar");
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(dy),
                Op::Const => {}
                Op::Param(id) => {
                    params.push((*id, Var(idx)));
                    grads[idx] = Some(dy);
                }
                Op::Conv { x, w, bias, geom } => {
                    self.conv_backward(*x, *w, *bias, geom, &dy, &mut grads)?;
                }
                Op::Norm { x, gamma, beta, xhat, inv_std, batch } => {
                    let xs = self.value(*x).shape();
                    let (n, c) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let count = (n * inner) as f64;
                    let g = self.value(*gamma).data();
                    let dyv = dy.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * inner;
                            for j in off..off + inner {
                                dgamma[ch] += dyv[j] * xhat[j];
                                dbeta[ch] += dyv[j];
                            }
                        }
                    }
                    let mut dx = vec![0.0; dyv.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * inner;
                            for j in off..off + inner {
                                dx[j] = if *batch {
                                    g[ch] * inv_std[ch] / count
                                        * (count * dyv[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    g[ch] * inv_std[ch] * dyv[j]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xs, dx)?);
                    accumulate(&mut grads, *gamma, Tensor::new(&[c], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(&[c], dbeta)?);
                }
                Op::Relu(x) => {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(dy.shape(), data)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::MaxPool { x, argmax } => {
                    let xs = self.value(*x).shape();
                    let mut dx = vec![0.0; xs.iter().product()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += dy.data()[o];
                    }
                    accumulate(&mut grads, *x, Tensor::new(xs, dx)?);
                }
                Op::SpatialMean(x) => {
                    let xs = self.value(*x).shape();
                    let area = xs[3] * xs[4];
                    let scale = 1.0 / area as f64;
                    let dx = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g * scale, area)).collect();
                    accumulate(&mut grads, *x, Tensor::new(xs, dx)?);
                }
                Op::AvgPool2(x) => {
                    let xs = self.value(*x).shape();
                    let (h, w) = (xs[3], xs[4]);
                    let (ho, wo) = (h / 2, w / 2);
                    let planes = xs[0] * xs[1] * xs[2];
                    let mut dx = vec![0.0; planes * h * w];
                    let dyv = dy.data();
                    for p in 0..planes {
                        for i in 0..2 * ho {
                            for j in 0..2 * wo {
                                dx[p * h * w + i * w + j] = 0.25 * dyv[(p * ho + i / 2) * wo + j / 2];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xs, dx)?);
                }
                Op::Upsample2(x) => {
                    let xs = self.value(*x).shape();
                    let (h, w) = (xs[3], xs[4]);
                    let planes = xs[0] * xs[1] * xs[2];
                    let mut dx = vec![0.0; planes * h * w];
                    let dyv = dy.data();
                    for p in 0..planes {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                dx[p * h * w + (i / 2) * w + j / 2] += dyv[p * 4 * h * w + i * 2 * w + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xs, dx)?);
                }
                Op::Linear { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let ws = self.value(*w).shape();
                    let (m, k, o) = (xs[0], xs[1], ws[0]);
                    let mut dx = vec![0.0; m * k];
                    gemm(m, o, k, dy.data(), false, self.value(*w).data(), false, 0.0, &mut dx);
                    let mut dw = vec![0.0; o * k];
                    gemm(o, m, k, dy.data(), true, self.value(*x).data(), false, 0.0, &mut dw);
                    accumulate(&mut grads, *x, Tensor::new(xs, dx)?);
                    accumulate(&mut grads, *w, Tensor::new(ws, dw)?);
                    if let Some(b) = b {
                        let mut db = vec![0.0; o];
                        for row in dy.data().chunks(o) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        accumulate(&mut grads, *b, Tensor::new(&[o], db)?);
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, dy.reshape(&shape)?);
                }
                Op::SwapLast2(x) => {
                    let xs = self.value(*x).shape();
                    let (a, b, c) = (xs[0], xs[1], xs[2]);
                    let mut dx = vec![0.0; a * b * c];
                    for i in 0..a {
                        for j in 0..b {
                            for k in 0..c {
                                dx[(i * b + j) * c + k] = dy.data()[(i * c + k) * b + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xs, dx)?);
                }
                Op::Narrow { x, start } => {
                    let xs = self.value(*x).shape();
                    let len = dy.dim(1);
                    let mut dx = vec![0.0; xs[0] * xs[1]];
                    for (r, row) in dy.data().chunks(len).enumerate() {
                        dx[r * xs[1] + start..r * xs[1] + start + len].copy_from_slice(row);
                    }
                    accumulate(&mut grads, *x, Tensor::new(xs, dx)?);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let ls = self.value(*logits).shape();
                    let (n, k) = (ls[0], ls[1]);
                    let inner: usize = ls[2..].iter().product();
                    let scale = dy.item() / (n * inner) as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for i in 0..n {
                        for s in 0..inner {
                            dl[(i * k + labels[i * inner + s]) * inner + s] -= scale;
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(ls, dl)?);
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let scale = 2.0 * dy.item() / pv.numel() as f64;
                    let dp = pv.data().iter().zip(target).map(|(p, t)| scale * (p - t)).collect();
                    accumulate(&mut grads, *pred, Tensor::new(pv.shape(), dp)?);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Tensor::scalar(w * dy.item()));
                    }
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let kernel = [ws[2], ws[3], ws[4]];
        let output = [dy.dim(2), dy.dim(3), dy.dim(4)];
        let dims = ConvDims { channels: xs[1], input: [xs[2], xs[3], xs[4]], kernel, output };
        let (n, o) = (xs[0], ws[0]);
        let (rows, positions) = (dims.rows(), dims.positions());
        let in_len = xs[1] * xs[2] * xs[3] * xs[4];
        let pointwise = geom.is_pointwise(kernel);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let dyv = dy.data();
        let mut dw = vec![0.0; o * rows];
        let want_dx = !matches!(self.nodes[x.0].op, Op::Const);
        let mut dx = vec![0.0; if want_dx { n * in_len } else { 0 }];
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * positions] };
        let mut dcols = vec![0.0; if want_dx { rows * positions } else { 0 }];
        for s in 0..n {
            let dy_n = &dyv[s * o * positions..(s + 1) * o * positions];
            let x_n = &xv[s * in_len..(s + 1) * in_len];
            let b: &[f64] = if pointwise {
                x_n
            } else {
                im2col(x_n, &dims, geom, &mut cols);
                &cols
            };
            // dW += dY_n [O, P] * cols^T [P, R]
            gemm(o, positions, rows, dy_n, false, b, true, 1.0, &mut dw);
            if !want_dx {
                continue;
            }
            if pointwise {
                // dX_n = W^T [R, O] * dY_n [O, P]
                gemm(rows, o, positions, wv, true, dy_n, false, 0.0, &mut dx[s * in_len..(s + 1) * in_len]);
            } else {
                gemm(rows, o, positions, wv, true, dy_n, false, 0.0, &mut dcols);
                col2im(&dcols, &dims, geom, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
        if want_dx {
            accumulate(grads, x, Tensor::new(xs, dx)?);
        }
        accumulate(grads, w, Tensor::new(ws, dw)?);
        if let Some(b) = bias {
            let mut db = vec![0.0; o];
            for s in 0..n {
                for (c, d) in db.iter_mut().enumerate() {
                    let off = (s * o + c) * positions;
                    *d += dyv[off..off + positions].iter().sum::<f64>();
                }
            }
            accumulate(grads, b, Tensor::new(&[o], db)?);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Softmax over axis 1 of a `[N, K, inner]` buffer.
pub fn softmax_axis1(logits: &[f64], n: usize, k: usize, inner: usize) -> Vec<f64> {
    let mut probs = vec![0.0; logits.len()];
    for i in 0..n {
        for s in 0..inner {
            let at = |c: usize| (i * k + c) * inner + s;
            let max = (0..k).map(|c| logits[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                let e = (logits[at(c)] - max).exp();
                probs[at(c)] = e;
                z += e;
            }
            for c in 0..k {
                probs[at(c)] /= z;
            }
        }
    }
    probs
}
