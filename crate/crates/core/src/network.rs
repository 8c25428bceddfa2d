//! Encoder, mirrored decoder, cluster head and bottleneck centroids.
//!
//! The encoder is a stack of convolution blocks (conv, optional batch norm,
//! ReLU, optional pooling) followed by fully connected layers ending in a
//! linear bottleneck of width `d`. The decoder mirrors it: the dense layers in
//! reverse, a reshape, then each block in reverse as upsample and a
//! same-size convolution. The last decoder layer is linear. The cluster head is
//! a linear map followed by a softmax over `k` clusters.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{batches, BatchPlan};
use crate::error::{DafcError, Result};
use crate::rng::{self, Rng};
use crate::tensor::{BatchNormConfig, Mode, RmsProp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    None,
    Max,
    Avg,
}

/// One encoder block. Pooling uses `pool_size` as both window and stride.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub filter: usize,
    pub stride: usize,
    pub padding: usize,
    pub batch_norm: bool,
    pub pool: PoolKind,
    pub pool_size: usize,
}

impl ConvBlock {
    pub fn new(channels: usize, filter: usize, padding: usize) -> Self {
        Self {
            channels,
            filter,
            stride: 1,
            padding,
            batch_norm: true,
            pool: PoolKind::None,
            pool_size: 1,
        }
    }

    pub fn pooled(mut self, pool: PoolKind, size: usize) -> Self {
        self.pool = pool;
        self.pool_size = size;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// `C x H x W` of one sample.
    pub input_shape: [usize; 3],
    pub blocks: Vec<ConvBlock>,
    /// Widths of the hidden dense layers between the conv stack and the bottleneck.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub dropout: f64,
    pub clusters: usize,
}

impl ArchConfig {
    /// Two small conv blocks and a 16-wide bottleneck.
    pub fn tiny(input_shape: [usize; 3], clusters: usize) -> Self {
        let [_, h, w] = input_shape;
        let second = if h % 2 == 0 && w % 2 == 0 {
            ConvBlock::new(8, 3, 1).pooled(PoolKind::Max, 2)
        } else {
            ConvBlock::new(8, 3, 1)
        };
        Self {
            input_shape,
            blocks: vec![ConvBlock::new(8, 3, 1), second],
            hidden: vec![32],
            latent_dim: 16.max(clusters),
            dropout: 0.0,
            clusters,
        }
    }

    /// Conv-BN-ReLU-maxpool twice, one hidden dense layer with dropout, for
    /// 28x28 grayscale digits.
    pub fn reference(clusters: usize) -> Self {
        Self {
            input_shape: [1, 28, 28],
            blocks: vec![
                ConvBlock::new(16, 3, 1).pooled(PoolKind::Max, 2),
                ConvBlock::new(32, 3, 1).pooled(PoolKind::Max, 2),
            ],
            hidden: vec![128],
            latent_dim: 16.max(clusters),
            dropout: 0.5,
            clusters,
        }
    }

    /// A single linear layer each way, `d = C*H*W`: with identity weights the
    /// encoder and decoder pass data through unchanged.
    pub fn linear(input_shape: [usize; 3], clusters: usize) -> Self {
        Self {
            input_shape,
            blocks: Vec::new(),
            hidden: Vec::new(),
            latent_dim: input_shape.iter().product(),
            dropout: 0.0,
            clusters,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Shape after each encoder block, starting with the input.
    fn block_shapes(&self) -> Vec<[usize; 3]> {
        let mut shapes = vec![self.input_shape];
        let [_, mut h, mut w] = self.input_shape;
        for b in &self.blocks {
            h = (h + 2 * b.padding + 1).saturating_sub(b.filter);
            w = (w + 2 * b.padding + 1).saturating_sub(b.filter);
            if b.pool != PoolKind::None && b.pool_size > 0 {
                h /= b.pool_size;
                w /= b.pool_size;
            }
            shapes.push([b.channels, h, w]);
        }
        shapes
    }

    /// Returns every violated constraint in one error.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let [c, mut h, mut w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            bad.push(format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        if self.clusters < 2 {
            bad.push(format!("cluster count {} must be at least 2", self.clusters));
        }
        if self.latent_dim < self.clusters {
            bad.push(format!(
                "bottleneck width {} is smaller than the cluster count {}",
                self.latent_dim, self.clusters
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.hidden.contains(&0) {
            bad.push("hidden layer of width 0".to_string());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.filter == 0 {
                bad.push(format!("block {i}: channels and filter must be positive"));
                continue;
            }
            if b.stride != 1 {
                bad.push(format!("block {i}: stride {} unsupported, the mirrored decoder needs stride 1", b.stride));
            }
            if b.padding >= b.filter {
                bad.push(format!("block {i}: padding {} must be below filter {}", b.padding, b.filter));
                continue;
            }
            if h + 2 * b.padding < b.filter || w + 2 * b.padding < b.filter {
                bad.push(format!("block {i}: filter {} exceeds padded {h}x{w} input", b.filter));
                break;
            }
            h = h + 2 * b.padding + 1 - b.filter;
            w = w + 2 * b.padding + 1 - b.filter;
            if b.pool != PoolKind::None {
                let p = b.pool_size;
                if p == 0 || h % p != 0 || w % p != 0 {
                    bad.push(format!("block {i}: pool size {p} must divide the {h}x{w} feature map"));
                    break;
                }
                h /= p;
                w /= p;
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DafcError::InvalidConfig(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv { w: usize, b: Option<usize>, padding: usize },
    BatchNorm { gamma: usize, beta: usize, stat: usize },
    Relu,
    MaxPool(usize),
    AvgPool(usize),
    Upsample(usize),
    /// Per-sample target shape.
    Reshape(Vec<usize>),
    Dropout,
    Linear { w: usize, b: usize },
}

/// Running mean and variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// All learnable state of the network plus the bottleneck centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub cfg: ArchConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    stats: Vec<BnStats>,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    head: (usize, usize),
    /// `k x d`.
    pub centroids: Tensor,
    pub bn: BatchNormConfig,
}

struct Builder<'r> {
    names: Vec<String>,
    params: Vec<Tensor>,
    stats: Vec<BnStats>,
    rng: &'r mut Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive fan-in");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("consistent shape")
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, f: usize, padding: usize, bias: bool) -> Layer {
        let k = self.he(&[cout, cin, f, f], cin * f * f);
        let w = self.add(format!("{name}.w"), k);
        let b = bias.then(|| self.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Layer::Conv { w, b, padding }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Layer {
        let k = self.he(&[fin, fout], fin);
        let w = self.add(format!("{name}.w"), k);
        let b = self.add(format!("{name}.b"), Tensor::zeros(&[fout]));
        Layer::Linear { w, b }
    }

    fn batchnorm(&mut self, name: &str, c: usize) -> Layer {
        let gamma = self.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.stats.push(BnStats {
            name: name.to_string(),
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        Layer::BatchNorm {
            gamma,
            beta,
            stat: self.stats.len() - 1,
        }
    }
}

/// Initializes a network: He-scaled conv and dense weights, zero biases, unit
/// batch-norm scales, centroids drawn from a unit Gaussian.
pub fn build_model(cfg: &ArchConfig, rng: &mut Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let shapes = cfg.block_shapes();
    let mut b = Builder {
        names: Vec::new(),
        params: Vec::new(),
        stats: Vec::new(),
        rng,
    };

    let mut encoder = Vec::new();
    for (i, blk) in cfg.blocks.iter().enumerate() {
        let cin = shapes[i][0];
        encoder.push(b.conv(&format!("enc.conv{i}"), cin, blk.channels, blk.filter, blk.padding, !blk.batch_norm));
        if blk.batch_norm {
            encoder.push(b.batchnorm(&format!("enc.bn{i}"), blk.channels));
        }
        encoder.push(Layer::Relu);
        match blk.pool {
            PoolKind::None => {}
            PoolKind::Max => encoder.push(Layer::MaxPool(blk.pool_size)),
            PoolKind::Avg => encoder.push(Layer::AvgPool(blk.pool_size)),
        }
    }
    let last = *shapes.last().expect("input shape present");
    let flat: usize = last.iter().product();
    encoder.push(Layer::Reshape(vec![flat]));
    let mut width = flat;
    for (i, &hw) in cfg.hidden.iter().enumerate() {
        encoder.push(b.linear(&format!("enc.fc{i}"), width, hw));
        encoder.push(Layer::Relu);
        encoder.push(Layer::Dropout);
        width = hw;
    }
    encoder.push(b.linear("enc.out", width, cfg.latent_dim));

    let mut decoder = Vec::new();
    let mut width = cfg.latent_dim;
    for (i, &hw) in cfg.hidden.iter().enumerate().rev() {
        decoder.push(b.linear(&format!("dec.fc{i}"), width, hw));
        decoder.push(Layer::Relu);
        width = hw;
    }
    decoder.push(b.linear("dec.out", width, flat));
    if !cfg.blocks.is_empty() {
        decoder.push(Layer::Relu);
    }
    decoder.push(Layer::Reshape(last.to_vec()));
    for (i, blk) in cfg.blocks.iter().enumerate().rev() {
        match blk.pool {
            PoolKind::None => {}
            PoolKind::Max | PoolKind::Avg => decoder.push(Layer::Upsample(blk.pool_size)),
        }
        let cout = shapes[i][0];
        let pad = blk.filter - 1 - blk.padding;
        let inner = i > 0;
        let bn = inner && cfg.blocks[i - 1].batch_norm;
        decoder.push(b.conv(&format!("dec.conv{i}"), blk.channels, cout, blk.filter, pad, !bn));
        if bn {
            decoder.push(b.batchnorm(&format!("dec.bn{i}"), cout));
        }
        if inner {
            decoder.push(Layer::Relu);
        }
    }

    let head = match b.linear("head", cfg.latent_dim, cfg.clusters) {
        Layer::Linear { w, b } => (w, b),
        _ => unreachable!(),
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let centroid_data = (0..cfg.clusters * cfg.latent_dim).map(|_| normal.sample(b.rng)).collect();
    let centroids = Tensor::new(vec![cfg.clusters, cfg.latent_dim], centroid_data)?;

    Ok(ModelParams {
        cfg: cfg.clone(),
        names: b.names,
        params: b.params,
        stats: b.stats,
        encoder,
        decoder,
        head,
        centroids,
        bn: BatchNormConfig::default(),
    })
}

/// A tape plus the parameters bound to it so far.
#[derive(Debug, Default)]
pub struct Session {
    pub tape: Tape,
    bound: Vec<Option<Var>>,
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    fn bind(&mut self, params: &[Tensor], i: usize) -> Var {
        if self.bound.len() < params.len() {
            self.bound.resize(params.len(), None);
        }
        *self.bound[i].get_or_insert_with(|| self.tape.leaf(params[i].clone()))
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Differentiates `loss` and adds the result into the gradient slots of
    /// every parameter used on this tape.
    pub fn backward(&self, loss: Var, model: &mut ModelParams) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = v else { continue };
            match grads.get(*v) {
                Some(g) => model.params[i].accumulate_grad(g)?,
                None => log::warn!("parameter {} is detached from the loss", model.names[i]),
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    params: &[Tensor],
    layers: &[Layer],
    stats: &mut [BnStats],
    bn: BatchNormConfig,
    dropout: f64,
    s: &mut Session,
    mut x: Var,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Conv { w, b, padding } => {
                let k = s.bind(params, *w);
                let y = s.tape.conv2d(x, k, 1, *padding)?;
                match b {
                    Some(b) => {
                        let b = s.bind(params, *b);
                        s.tape.add_channel_bias(y, b)?
                    }
                    None => y,
                }
            }
            Layer::BatchNorm { gamma, beta, stat } => {
                let (g, bt) = (s.bind(params, *gamma), s.bind(params, *beta));
                let st = &mut stats[*stat];
                s.tape.batchnorm(x, g, bt, &mut st.mean, &mut st.var, bn, mode)?
            }
            Layer::Relu => s.tape.relu(x),
            Layer::MaxPool(k) => s.tape.maxpool(x, *k, *k)?,
            Layer::AvgPool(k) => s.tape.avgpool(x, *k, *k)?,
            Layer::Upsample(k) => s.tape.upsample(x, *k)?,
            Layer::Reshape(shape) => {
                let mut full = vec![s.tape.shape(x)[0]];
                full.extend_from_slice(shape);
                s.tape.reshape(x, &full)?
            }
            Layer::Dropout => s.tape.dropout(x, dropout, mode, rng)?,
            Layer::Linear { w, b } => {
                let (w, b) = (s.bind(params, *w), s.bind(params, *b));
                let y = s.tape.matmul(x, w)?;
                s.tape.add_bias(y, b)?
            }
        };
    }
    Ok(x)
}

/// Rows per chunk for whole-dataset inference.
const INFER_CHUNK: usize = 512;

impl ModelParams {
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.stats
    }

    /// Number of trainable scalars (centroids and running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite) && self.centroids.is_finite()
    }

    /// Smallest pairwise distance between centroids.
    pub fn min_centroid_gap(&self) -> f64 {
        let k = self.centroids.shape()[0];
        let mut best = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                best = best.min(crate::tensor::sq_dist(self.centroids.row(a), self.centroids.row(b)).sqrt());
            }
        }
        best
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.cfg.input_shape;
        if shape.len() != 4 || shape[1..] != want {
            let mut right = vec![0];
            right.extend_from_slice(&want);
            return Err(DafcError::ShapeMismatch {
                op: "encode",
                left: shape.to_vec(),
                right,
            });
        }
        Ok(())
    }

    fn check_latent(&self, shape: &[usize], op: &'static str) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.cfg.latent_dim {
            return Err(DafcError::ShapeMismatch {
                op,
                left: shape.to_vec(),
                right: vec![0, self.cfg.latent_dim],
            });
        }
        Ok(())
    }

    /// Encodes `x` (`B x C x H x W`) on the session's tape. Train mode updates
    /// batch-norm running statistics.
    pub fn encode_on(&mut self, s: &mut Session, x: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        self.check_input(s.tape.shape(x))?;
        run(&self.params, &self.encoder, &mut self.stats, self.bn, self.cfg.dropout, s, x, mode, rng)
    }

    pub fn decode_on(&mut self, s: &mut Session, z: Var, mode: Mode, rng: &mut Rng) -> Result<Var> {
        self.check_latent(s.tape.shape(z), "decode")?;
        run(&self.params, &self.decoder, &mut self.stats, self.bn, self.cfg.dropout, s, z, mode, rng)
    }

    /// Soft labels `B x k`: linear map then softmax.
    pub fn head_on(&self, s: &mut Session, z: Var) -> Result<Var> {
        self.check_latent(s.tape.shape(z), "cluster_head")?;
        let (w, b) = (s.bind(&self.params, self.head.0), s.bind(&self.params, self.head.1));
        let logits = s.tape.matmul(z, w)?;
        let logits = s.tape.add_bias(logits, b)?;
        Ok(s.tape.softmax(logits))
    }

    /// Eval-mode pass through `layers` without touching the running statistics.
    fn infer(&self, decoder: bool, x: &Tensor) -> Result<Tensor> {
        let mut stats = self.stats.clone();
        let layers = if decoder { &self.decoder } else { &self.encoder };
        let mut rng = rng::seeded(0);
        let mut s = Session::new();
        let v = s.input(x.clone());
        let out = run(&self.params, layers, &mut stats, self.bn, self.cfg.dropout, &mut s, v, Mode::Eval, &mut rng)?;
        Ok(s.tape.value(out).detached())
    }

    pub fn encode(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let mut s = Session::new();
        let v = s.input(x.clone());
        let z = self.encode_on(&mut s, v, mode, rng)?;
        Ok(s.value(z).detached())
    }

    pub fn decode(&mut self, z: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let mut s = Session::new();
        let v = s.input(z.clone());
        let x = self.decode_on(&mut s, v, mode, rng)?;
        Ok(s.value(x).detached())
    }

    pub fn cluster_head(&self, z: &Tensor) -> Result<Tensor> {
        let mut s = Session::new();
        let v = s.input(z.clone());
        let y = self.head_on(&mut s, v)?;
        Ok(s.value(y).detached())
    }

    /// Eval-mode bottleneck codes for any number of samples.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let n = x.shape()[0];
        let mut data = Vec::with_capacity(n * self.cfg.latent_dim);
        for start in (0..n).step_by(INFER_CHUNK) {
            let idx: Vec<usize> = (start..(start + INFER_CHUNK).min(n)).collect();
            data.extend(self.infer(false, &x.select_rows(&idx))?.into_data());
        }
        Tensor::new(vec![n, self.cfg.latent_dim], data)
    }

    /// Eval-mode reconstruction of bottleneck codes.
    pub fn reconstruct(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z.shape(), "decode")?;
        self.infer(true, z)
    }

    /// Decoded centroids flattened to `k x (C*H*W)`.
    pub fn decoded_centroids(&self) -> Result<Tensor> {
        let k = self.cfg.clusters;
        self.reconstruct(&self.centroids)?.reshape(&[k, self.cfg.input_len()])
    }

    /// Points the head at the centroids so its softmax is the posterior of an
    /// isotropic Gaussian mixture with per-dimension variance `variance`:
    /// logit_j = (c_j . z - |c_j|^2 / 2) / variance.
    pub fn init_head_from_centroids(&mut self, variance: f64) -> Result<()> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(DafcError::InvalidArgument(format!("head variance must be positive, got {variance}")));
        }
        let (k, d) = (self.cfg.clusters, self.cfg.latent_dim);
        let c = self.centroids.clone();
        let w = &mut self.params[self.head.0];
        for j in 0..k {
            for i in 0..d {
                w.data_mut()[i * k + j] = c.row(j)[i] / variance;
            }
        }
        let b = &mut self.params[self.head.1];
        for j in 0..k {
            b.data_mut()[j] = -0.5 * c.row(j).iter().map(|v| v * v).sum::<f64>() / variance;
        }
        Ok(())
    }
}

/// Settings for autoencoder pretraining.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Batch schedule that never yields a single-sample batch (batch norm needs two).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    let plan = BatchPlan {
        batch_size: batch_size.min(n),
        seed,
        epoch,
        drop_last: false,
    };
    let mut out = batches(n, &plan)?;
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
    }
    Ok(out)
}

/// Fits encoder and decoder to minimize the mean per-sample squared
/// reconstruction error. Returns the mean loss of each epoch.
pub fn pretrain_autoencoder(
    model: &mut ModelParams,
    data: &Tensor,
    cfg: &PretrainConfig,
    opt: &mut RmsProp,
) -> Result<Vec<f64>> {
    if data.rank() == 0 || data.shape()[0] == 0 {
        return Err(DafcError::InvalidArgument("cannot pretrain on an empty dataset".into()));
    }
    if cfg.epochs == 0 {
        return Err(DafcError::InvalidArgument("pretraining needs at least one epoch".into()));
    }
    model.check_input(data.shape())?;
    let n = data.shape()[0];
    let mut dropout_rng = rng::stream(cfg.seed, rng::stream::DROPOUT);
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for idx in epoch_batches(n, cfg.batch_size, cfg.seed, epoch as u64)? {
            let b = idx.len();
            let mut s = Session::new();
            let x = s.input(data.select_rows(&idx));
            let z = model.encode_on(&mut s, x, Mode::Train, &mut dropout_rng)?;
            let xh = model.decode_on(&mut s, z, Mode::Train, &mut dropout_rng)?;
            let diff = s.tape.sub(xh, x)?;
            let sq = s.tape.square(diff)?;
            let sum = s.tape.sum(sq);
            let loss = s.tape.scale(sum, 1.0 / b as f64);
            let value = s.value(loss).data()[0];
            if !value.is_finite() {
                return Err(DafcError::TrainingDiverged {
                    epoch,
                    batch: seen / cfg.batch_size.max(1),
                    term: "pretraining reconstruction loss".into(),
                });
            }
            s.backward(loss, model)?;
            opt.step(model.params_mut().iter_mut())?;
            model.zero_grad();
            total += value * b as f64;
            seen += b;
        }
        trajectory.push(total / seen as f64);
    }
    Ok(trajectory)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DAFC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| DafcError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DafcError::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| DafcError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product::<usize>();
        let data = self
            .take(n.checked_mul(8).ok_or_else(|| DafcError::Checkpoint("tensor too large".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| DafcError::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

/// Writes the model and any extra named tensors to a single file.
pub fn save_checkpoint(path: &Path, model: &ModelParams, extras: &[(&str, &Tensor)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
    let cfg = serde_json::to_vec(&model.cfg)?;
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    for (name, t) in model.names.iter().zip(&model.params) {
        put_tensor(&mut out, name, t)?;
    }
    for st in &model.stats {
        let c = st.mean.len();
        put_tensor(&mut out, &format!("{}.running_mean", st.name), &Tensor::new(vec![c], st.mean.clone())?)?;
        put_tensor(&mut out, &format!("{}.running_var", st.name), &Tensor::new(vec![c], st.var.clone())?)?;
    }
    put_tensor(&mut out, "centroids", &model.centroids)?;
    for (name, t) in extras {
        put_tensor(&mut out, name, t)?;
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Reads a checkpoint back. Tensors that are not part of the model are
/// returned by name.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, BTreeMap<String, Tensor>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(DafcError::Checkpoint("missing DAFC magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(DafcError::Checkpoint(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = r.u32()?;
    let cfg: ArchConfig = serde_json::from_slice(r.take(len)?)?;
    let mut model = build_model(&cfg, &mut rng::seeded(0))?;
    let mut tensors = BTreeMap::new();
    while r.at < bytes.len() {
        let (name, t) = r.tensor()?;
        tensors.insert(name, t);
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| DafcError::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(DafcError::Checkpoint(format!(
                "{name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for i in 0..model.params.len() {
        let shape = model.params[i].shape().to_vec();
        model.params[i] = take(&model.names[i], &shape)?;
    }
    for st in &mut model.stats {
        let c = st.mean.len();
        st.mean = take(&format!("{}.running_mean", st.name), &[c])?.into_data();
        st.var = take(&format!("{}.running_var", st.name), &[c])?.into_data();
    }
    let shape = model.centroids.shape().to_vec();
    model.centroids = take("centroids", &shape)?;
    Ok((model, tensors))
}
