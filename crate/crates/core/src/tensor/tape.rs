use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::{Tensor, Var};
use super::kernels::{col2im, gemm, im2col, pool_out, ConvGeom};
use crate::error::{invalid, DafcError, Result};

/// Train/eval switch for layers whose behaviour differs between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    Upsample(Var, usize),
    Reshape(Var),
    Softmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout(Var, Vec<f64>),
    Sum(Var),
    WeightedSqDist {
        x: Var,
        d: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of primitive applications for reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is a topological order of the
/// computation graph, so the backward sweep is a single reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the tracked leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DafcError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn spatial(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(invalid(format!("{op} needs a tensor of rank >= 2, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((t.len() / (h * w), h, w))
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

    fn push(&mut self, mut value: Tensor, op: Op, tracked: bool) -> Var {
        let v = Var(self.nodes.len());
        value.set_node(Some(v));
        self.nodes.push(Node { value, op, tracked });
        v
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Registers a differentiable input (a parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers an input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DafcError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), tracked))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(a);
        self.push(out, Op::Scale(a, c), tracked)
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = *tx.shape().last().expect("rank >= 1");
        if tb.len() != n {
            return Err(DafcError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, c)| a + c))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(b);
        Ok(self.push(out, Op::AddBias(x, b), tracked))
    }

    /// Adds a per-channel bias to a `B x C x ...` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let s = tx.shape();
        if s.len() < 2 || tb.len() != s[1] {
            return Err(DafcError::ShapeMismatch {
                op: "add_channel_bias",
                left: s.to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (c, inner) = (s[1], s[2..].iter().product::<usize>());
        let mut data = tx.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bias = tb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let out = Tensor::new(s.to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(b);
        Ok(self.push(out, Op::AddChannelBias(x, b), tracked))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(x);
        self.push(out, Op::Relu(x), tracked)
    }

    /// 2-D cross-correlation (no kernel flip) with zero padding.
    ///
    /// `x` is `C x H x W` or `B x C x H x W`; `kernels` is `O x C x kH x kW`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernels));
        let (xs, ks) = (tx.shape(), tk.shape());
        let (batch, rank3) = match xs.len() {
            3 => (1, true),
            4 => (xs[0], false),
            _ => return Err(invalid(format!("conv2d input must be rank 3 or 4, got {xs:?}"))),
        };
        let off = xs.len() - 3;
        if ks.len() != 4 || ks[1] != xs[off] {
            return Err(DafcError::ShapeMismatch {
                op: "conv2d",
                left: xs.to_vec(),
                right: ks.to_vec(),
            });
        }
        let geom = ConvGeom::new(
            (xs[off], xs[off + 1], xs[off + 2]),
            (ks[2], ks[3]),
            stride,
            padding,
        )?;
        let o = ks[0];
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let in_len = geom.channels * geom.height * geom.width;
        let mut cols = vec![0.0; pl * ol];
        let mut out = vec![0.0; batch * o * ol];
        for b in 0..batch {
            im2col(&geom, &tx.data()[b * in_len..(b + 1) * in_len], &mut cols);
            gemm(o, pl, ol, tk.data(), false, &cols, false, 0.0, &mut out[b * o * ol..(b + 1) * o * ol]);
        }
        let shape = if rank3 {
            vec![o, geom.out_h(), geom.out_w()]
        } else {
            vec![batch, o, geom.out_h(), geom.out_w()]
        };
        let tracked = self.tracked(x) || self.tracked(kernels);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, k: kernels, geom }, tracked))
    }

    /// Window maximum over the last two axes. Ties resolve to the first
    /// maximal element in row-major order.
    pub fn maxpool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let (planes, h, w) = spatial("maxpool", t)?;
        let (oh, ow) = pool_out("maxpool", h, w, kernel, stride)?;
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let d = t.data();
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = t.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { x, argmax }, tracked))
    }

    /// Window mean over the last two axes.
    pub fn avgpool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let (planes, h, w) = spatial("avgpool", t)?;
        let (oh, ow) = pool_out("avgpool", h, w, kernel, stride)?;
        let norm = 1.0 / (kernel * kernel) as f64;
        let d = t.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        acc += d[row..row + kernel].iter().sum::<f64>();
                    }
                    out.push(acc * norm);
                }
            }
        }
        let mut shape = t.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::AvgPool { x, kernel, stride }, tracked))
    }

    /// Nearest-neighbour upsampling of the last two axes by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(invalid("upsample factor must be positive"));
        }
        let t = self.value(x);
        let (planes, h, w) = spatial("upsample", t)?;
        let (oh, ow) = (h * factor, w * factor);
        let d = t.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                let src = &d[p * h * w + (oy / factor) * w..p * h * w + (oy / factor + 1) * w];
                out.extend((0..ow).map(|ox| src[ox / factor]));
            }
        }
        let mut shape = t.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample(x, factor), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().expect("rank >= 1");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(x);
        self.push(out, Op::Softmax(x), tracked)
    }

    /// Per-channel normalization of a `B x C x ...` tensor followed by an affine map.
    ///
    /// Train mode standardizes with the (biased) batch statistics and folds them
    /// into the running estimates with the configured momentum; eval mode uses
    /// the running estimates unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        cfg: BatchNormConfig,
        mode: Mode,
    ) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape().to_vec();
        if s.len() < 2 {
            return Err(invalid(format!("batchnorm needs B x C x ..., got {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        for (name, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(invalid(format!("batchnorm {name} has {len} entries for {c} channels")));
            }
        }
        let train = mode == Mode::Train;
        if train && b < 2 {
            return Err(DafcError::BatchTooSmall(b));
        }
        let d = tx.data();
        let count = (b * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * inner;
                    mean[ch] += d[off..off + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * inner;
                    var[ch] += d[off..off + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..c {
                running_mean[ch] = (1.0 - cfg.momentum) * running_mean[ch] + cfg.momentum * mean[ch];
                running_var[ch] = (1.0 - cfg.momentum) * running_var[ch] + cfg.momentum * var[ch] * unbias;
            }
        } else {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        Ok(self.push(Tensor::new(s, out)?, op, tracked))
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`. Eval mode and
    /// `p == 0` return `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid(format!("dropout rate must be in [0, 1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Dropout(x, mask), tracked))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `sum_ij w_ij * ||x_i - d_j||^2` for rows `x_i` of `x` (`M x P`), rows
    /// `d_j` of `d` (`K x P`) and fixed weights `w` (`M x K`).
    pub fn weighted_sq_dist(&mut self, x: Var, d: Var, weights: &[f64]) -> Result<Var> {
        let (tx, td) = (self.value(x), self.value(d));
        let (m, p) = tx.rows_cols();
        let (k, pd) = td.rows_cols();
        if p != pd || weights.len() != m * k {
            return Err(DafcError::ShapeMismatch {
                op: "weighted_sq_dist",
                left: tx.shape().to_vec(),
                right: td.shape().to_vec(),
            });
        }
        let mut total = 0.0;
        for i in 0..m {
            let xi = tx.row(i);
            for j in 0..k {
                let w = weights[i * k + j];
                if w != 0.0 {
                    total += w * sq_dist(xi, td.row(j));
                }
            }
        }
        let tracked = self.tracked(x) || self.tracked(d);
        let op = Op::WeightedSqDist {
            x,
            d,
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total), op, tracked))
    }

    /// Reverse sweep from a scalar node. Returns gradients for every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(DafcError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        slots[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                slots[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            self.backprop_node(node, &g, &mut slots);
        }
        Ok(Gradients { slots })
    }

    fn slot<'a>(&self, slots: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(slots[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(da) = self.slot(slots, *a) {
                    gemm(m, n, k, g, false, tb.data(), true, 1.0, da);
                }
                if let Some(db) = self.slot(slots, *b) {
                    gemm(k, m, n, ta.data(), true, g, false, 1.0, db);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(slots, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(slots, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(d) = self.slot(slots, *b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.slot(slots, *a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * vb[i];
                    }
                }
                if let Some(d) = self.slot(slots, *b) {
                    for i in 0..g.len() {
                        d[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.slot(slots, *a) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(d) = self.slot(slots, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = self.slot(slots, *b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::AddChannelBias(x, b) => {
                if let Some(d) = self.slot(slots, *x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                let s = self.value(*x).shape();
                let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                if let Some(db) = self.slot(slots, *b) {
                    for (i, chunk) in g.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.slot(slots, *x) {
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Conv2d { x, k, geom } => self.backprop_conv(*x, *k, geom, g, slots),
            Op::MaxPool { x, argmax } => {
                if let Some(d) = self.slot(slots, *x) {
                    for (gi, &src) in g.iter().zip(argmax) {
                        d[src] += gi;
                    }
                }
            }
            Op::AvgPool { x, kernel, stride } => {
                let t = self.value(*x);
                let (planes, h, w) = spatial("avgpool", t).expect("checked in forward");
                let (oh, ow) = pool_out("avgpool", h, w, *kernel, *stride).expect("checked in forward");
                let norm = 1.0 / (kernel * kernel) as f64;
                if let Some(d) = self.slot(slots, *x) {
                    for p in 0..planes {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(p * oh + oy) * ow + ox] * norm;
                                for ky in 0..*kernel {
                                    let row = p * h * w + (oy * stride + ky) * w + ox * stride;
                                    d[row..row + kernel].iter_mut().for_each(|v| *v += gv);
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample(x, f) => {
                let t = self.value(*x);
                let (planes, h, w) = spatial("upsample", t).expect("checked in forward");
                let (oh, ow) = (h * f, w * f);
                if let Some(d) = self.slot(slots, *x) {
                    for p in 0..planes {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                d[p * h * w + (oy / f) * w + ox / f] += g[(p * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) | Op::Sum(x) => {
                let scalar = matches!(node.op, Op::Sum(_));
                if let Some(d) = self.slot(slots, *x) {
                    if scalar {
                        d.iter_mut().for_each(|v| *v += g[0]);
                    } else {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("rank >= 1");
                if let Some(d) = self.slot(slots, *x) {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..n {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => self.backprop_batchnorm(node, (*x, *gamma, *beta), xhat, inv_std, *train, g, slots),
            Op::Dropout(x, mask) => {
                if let Some(d) = self.slot(slots, *x) {
                    for i in 0..g.len() {
                        d[i] += g[i] * mask[i];
                    }
                }
            }
            Op::WeightedSqDist { x, d, weights } => {
                let (tx, td) = (self.value(*x), self.value(*d));
                let (m, p) = tx.rows_cols();
                let k = td.shape()[0];
                let g0 = g[0];
                if let Some(dx) = self.slot(slots, *x) {
                    for i in 0..m {
                        for j in 0..k {
                            let w = 2.0 * g0 * weights[i * k + j];
                            if w != 0.0 {
                                let (xi, dj) = (tx.row(i), td.row(j));
                                for c in 0..p {
                                    dx[i * p + c] += w * (xi[c] - dj[c]);
                                }
                            }
                        }
                    }
                }
                if let Some(dd) = self.slot(slots, *d) {
                    for i in 0..m {
                        for j in 0..k {
                            let w = 2.0 * g0 * weights[i * k + j];
                            if w != 0.0 {
                                let (xi, dj) = (tx.row(i), td.row(j));
                                for c in 0..p {
                                    dd[j * p + c] += w * (dj[c] - xi[c]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn backprop_conv(&self, x: Var, k: Var, geom: &ConvGeom, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let (tx, tk) = (self.value(x), self.value(k));
        let o = tk.shape()[0];
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let in_len = geom.channels * geom.height * geom.width;
        let batch = tx.len() / in_len;
        let mut cols = vec![0.0; pl * ol];
        if let Some(dk) = self.slot(slots, k) {
            for b in 0..batch {
                im2col(geom, &tx.data()[b * in_len..(b + 1) * in_len], &mut cols);
                gemm(o, ol, pl, &g[b * o * ol..(b + 1) * o * ol], false, &cols, true, 1.0, dk);
            }
        }
        if let Some(dx) = self.slot(slots, x) {
            for b in 0..batch {
                gemm(pl, o, ol, tk.data(), true, &g[b * o * ol..(b + 1) * o * ol], false, 0.0, &mut cols);
                col2im(geom, &cols, &mut dx[b * in_len..(b + 1) * in_len]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_batchnorm(
        &self,
        node: &Node,
        (x, gamma, beta): (Var, Var, Var),
        xhat: &[f64],
        inv_std: &[f64],
        train: bool,
        g: &[f64],
        slots: &mut [Option<Vec<f64>>],
    ) {
        let s = node.value.shape();
        let (b, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let count = (b * inner) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                for i in off..off + inner {
                    sum_g[ch] += g[i];
                    sum_gx[ch] += g[i] * xhat[i];
                }
            }
        }
        if let Some(d) = self.slot(slots, gamma) {
            d.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v);
        }
        if let Some(d) = self.slot(slots, beta) {
            d.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v);
        }
        let gam = self.value(gamma).data();
        if let Some(dx) = self.slot(slots, x) {
            for bi in 0..b {
                for ch in 0..c {
                    let off = (bi * c + ch) * inner;
                    let scale = gam[ch] * inv_std[ch];
                    for i in off..off + inner {
                        dx[i] += if train {
                            scale * (g[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
