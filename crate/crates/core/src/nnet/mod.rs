//! Residual CNN classifier with from-scratch forward and backward
//! passes, plus the Adam training protocol.
//!
//! Topology: one 3x3 stride-2 stem convolution (batch norm, ReLU), `n_blocks`
//! residual blocks of two 3x3 convolutions each with an identity skip
//! (1x1 projection when shape changes, stride-2 downsampling on every
//! second block), then batch norm, global average pooling, and a dense
//! softmax head over two classes.

mod adam;
mod layers;
mod train;

pub use adam::{adam_step, AdamState, TrainConfig};
pub use layers::BN_EPS;
pub use train::{
    ensemble_train, kfold_cv, percentile, predict_samples, train, EpochLog, KfoldReport,
    TrainOutcome,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::detector::Scorer;
use crate::error::{Error, Result};
use crate::signal::Spectrogram;
use layers::*;

/// Momentum of the running batch-norm statistics.
const BN_MOMENTUM: f64 = 0.1;

/// Network topology description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    /// Number of residual blocks.
    pub n_blocks: usize,
    /// Channel count per stage; stage s covers blocks 2s and 2s+1.
    pub channels: Vec<usize>,
    /// Input spectrogram shape (time, frequency).
    pub input_shape: (usize, usize),
    pub n_classes: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl NetConfig {
    /// Full-scale configuration: eight residual blocks.
    pub fn paper(seed: u64) -> Self {
        Self {
            n_blocks: 8,
            channels: vec![16, 32, 64, 128],
            input_shape: (94, 129),
            n_classes: 2,
            seed,
        }
    }

    /// Desk-scale configuration for tests and synthetic runs.
    pub fn tiny(seed: u64) -> Self {
        Self {
            n_blocks: 2,
            channels: vec![4],
            input_shape: (94, 129),
            n_classes: 2,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::InvalidArgument("need at least one block".into()));
        }
        let stages = self.n_blocks.div_ceil(2);
        if self.channels.len() != stages {
            return Err(Error::InvalidArgument(format!(
                "{} blocks need {} per-stage channel counts, got {}",
                self.n_blocks,
                stages,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::InvalidArgument("channel counts must be > 0".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        if self.input_shape.0 == 0 || self.input_shape.1 == 0 {
            return Err(Error::InvalidArgument("empty input shape".into()));
        }
        Ok(())
    }

    /// (in_channels, out_channels, stride) of block `i`.
    fn block_plan(&self, i: usize) -> (usize, usize, usize) {
        let stage = i / 2;
        let c_out = self.channels[stage];
        let c_in = if i == 0 {
            self.channels[0]
        } else {
            self.channels[(i - 1) / 2]
        };
        // Stride-2 downsampling on every second block.
        let stride = if i % 2 == 1 { 2 } else { 1 };
        (c_in, c_out, stride)
    }
}

/// Inference/training mode; train mode uses batch statistics in the
/// batch-norm layers and requires a batch of at least two samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct Conv {
    w: Array4<f64>,
    b: Array1<f64>,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        Self {
            w: Array4::from_shape_fn((c_out, c_in, k, k), |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
            b: Array1::zeros(c_out),
            stride,
            pad,
        }
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
}

impl BatchNorm {
    fn init(c: usize) -> Self {
        Self {
            gamma: Array1::ones(c),
            beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
        }
    }

    fn stats_for(&self, x: &Array4<f64>, mode: Mode) -> BnStats {
        match mode {
            Mode::Train => bn_batch_stats(x),
            Mode::Eval => BnStats {
                mean: self.running_mean.clone(),
                var: self.running_var.clone(),
            },
        }
    }

    fn update_running(&mut self, stats: &BnStats) {
        self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + &stats.mean * BN_MOMENTUM;
        self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + &stats.var * BN_MOMENTUM;
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    /// 1x1 projection on the skip path when the shape changes.
    proj: Option<(Conv, BatchNorm)>,
}

/// The residual network: configuration plus all parameters.
#[derive(Debug, Clone)]
pub struct ResNet {
    pub cfg: NetConfig,
    stem: Conv,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
    head_bn: BatchNorm,
    fc_w: Array2<f64>,
    fc_b: Array1<f64>,
}

/// Initialize a network: He fan-in scaled weights, unit batch-norm
/// scale, zero shifts and biases. Deterministic given the config seed.
pub fn init_model(cfg: &NetConfig) -> Result<ResNet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stem = Conv::init(&mut rng, cfg.channels[0], 1, 3, 2, 1);
    let stem_bn = BatchNorm::init(cfg.channels[0]);
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let (c_in, c_out, stride) = cfg.block_plan(i);
        let conv1 = Conv::init(&mut rng, c_out, c_in, 3, stride, 1);
        let bn1 = BatchNorm::init(c_out);
        let conv2 = Conv::init(&mut rng, c_out, c_out, 3, 1, 1);
        let bn2 = BatchNorm::init(c_out);
        let proj = if c_in != c_out || stride != 1 {
            Some((
                Conv::init(&mut rng, c_out, c_in, 1, stride, 0),
                BatchNorm::init(c_out),
            ))
        } else {
            None
        };
        blocks.push(Block {
            conv1,
            bn1,
            conv2,
            bn2,
            proj,
        });
    }
    let c_last = *cfg.channels.last().unwrap();
    let head_bn = BatchNorm::init(c_last);
    let std = (2.0 / c_last as f64).sqrt();
    let fc_w = Array2::from_shape_fn((cfg.n_classes, c_last), |_| {
        std * rng.sample::<f64, _>(StandardNormal)
    });
    let fc_b = Array1::zeros(cfg.n_classes);
    Ok(ResNet {
        cfg: cfg.clone(),
        stem,
        stem_bn,
        blocks,
        head_bn,
        fc_w,
        fc_b,
    })
}

struct BlockCache {
    input: Array4<f64>,
    c1: Array4<f64>,
    bn1_stats: BnStats,
    h1: Array4<f64>,
    c2: Array4<f64>,
    bn2_stats: BnStats,
    proj_out: Option<Array4<f64>>,
    proj_stats: Option<BnStats>,
    sum: Array4<f64>,
}

/// Intermediate activations retained for the backward pass.
pub struct ForwardCache {
    x: Array4<f64>,
    stem_out: Array4<f64>,
    stem_stats: BnStats,
    stem_h: Array4<f64>,
    blocks: Vec<BlockCache>,
    head_in: Array4<f64>,
    head_stats: BnStats,
    pooled: Array2<f64>,
    logits: Array2<f64>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }
}

impl ResNet {
    /// Forward pass. Returns per-class probabilities (rows sum to 1)
    /// and the cache needed for a backward pass. Pure: running
    /// statistics are not touched (see [`ResNet::update_running_stats`]).
    pub fn forward(&self, x: &Array4<f64>, mode: Mode) -> Result<(Array2<f64>, ForwardCache)> {
        let (b, c, h, w) = x.dim();
        if c != 1 || (h, w) != self.cfg.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "expected (B, 1, {}, {}), got ({b}, {c}, {h}, {w})",
                self.cfg.input_shape.0, self.cfg.input_shape.1
            )));
        }
        if b == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if mode == Mode::Train && b < 2 {
            return Err(Error::InvalidArgument(
                "train mode needs a batch of at least 2 for batch-norm statistics".into(),
            ));
        }

        let stem_out = conv_forward(x, &self.stem.w, &self.stem.b, self.stem.stride, self.stem.pad);
        let stem_stats = self.stem_bn.stats_for(&stem_out, mode);
        let stem_h = bn_forward(&stem_out, &self.stem_bn.gamma, &self.stem_bn.beta, &stem_stats);
        let mut activation = relu(&stem_h);

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let input = activation;
            let c1 = conv_forward(&input, &block.conv1.w, &block.conv1.b, block.conv1.stride, block.conv1.pad);
            let bn1_stats = block.bn1.stats_for(&c1, mode);
            let h1 = bn_forward(&c1, &block.bn1.gamma, &block.bn1.beta, &bn1_stats);
            let r1 = relu(&h1);
            let c2 = conv_forward(&r1, &block.conv2.w, &block.conv2.b, block.conv2.stride, block.conv2.pad);
            let bn2_stats = block.bn2.stats_for(&c2, mode);
            let main = bn_forward(&c2, &block.bn2.gamma, &block.bn2.beta, &bn2_stats);

            let (skip, proj_out, proj_stats) = match &block.proj {
                Some((conv, bn)) => {
                    let p = conv_forward(&input, &conv.w, &conv.b, conv.stride, conv.pad);
                    let stats = bn.stats_for(&p, mode);
                    let s = bn_forward(&p, &bn.gamma, &bn.beta, &stats);
                    (s, Some(p), Some(stats))
                }
                None => (input.clone(), None, None),
            };
            let sum = &main + &skip;
            activation = relu(&sum);
            block_caches.push(BlockCache {
                input,
                c1,
                bn1_stats,
                h1,
                c2,
                bn2_stats,
                proj_out,
                proj_stats,
                sum,
            });
        }

        let head_in = activation;
        let head_stats = self.head_bn.stats_for(&head_in, mode);
        let head_out = bn_forward(&head_in, &self.head_bn.gamma, &self.head_bn.beta, &head_stats);
        let pooled = global_avg_pool(&head_out);
        let logits = dense_forward(&pooled, &self.fc_w, &self.fc_b);
        let probs = softmax(&logits);

        Ok((
            probs,
            ForwardCache {
                x: x.clone(),
                stem_out,
                stem_stats,
                stem_h,
                blocks: block_caches,
                head_in,
                head_stats,
                pooled,
                logits,
            },
        ))
    }

    /// Fold the batch statistics of a training forward pass into the
    /// running estimates used by eval mode.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        self.stem_bn.update_running(&cache.stem_stats);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.bn1.update_running(&bc.bn1_stats);
            block.bn2.update_running(&bc.bn2_stats);
            if let (Some((_, bn)), Some(stats)) = (&mut block.proj, &bc.proj_stats) {
                bn.update_running(stats);
            }
        }
        self.head_bn.update_running(&cache.head_stats);
    }

    /// Mean cross-entropy loss and gradients of every parameter, from a
    /// train-mode forward cache.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, Gradients)> {
        if labels.len() != cache.logits.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a batch of {}",
                labels.len(),
                cache.logits.nrows()
            )));
        }
        if labels.iter().any(|&l| l >= self.cfg.n_classes) {
            return Err(Error::InvalidArgument("label out of range".into()));
        }
        let (loss, _, dlogits) = softmax_cross_entropy(&cache.logits, labels);

        let mut grads = Gradients::zeros_like(self);

        let (dpooled, dfc_w, dfc_b) = dense_backward(&cache.pooled, &self.fc_w, &dlogits);
        grads.fc_w = dfc_w;
        grads.fc_b = dfc_b;

        let head_shape = cache.head_in.dim();
        let dhead_out = global_avg_pool_backward(head_shape, &dpooled);
        let (mut dact, dg, db) =
            bn_backward(&cache.head_in, &self.head_bn.gamma, &cache.head_stats, &dhead_out);
        grads.head_bn = (dg, db);

        for (i, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            // dact is the gradient w.r.t. relu(sum).
            let dsum = relu_backward(&bc.sum, &dact);

            // Main branch: bn2 <- conv2 <- relu <- bn1 <- conv1.
            let (dc2, dg2, db2) =
                bn_backward(&bc.c2, &block.bn2.gamma, &bc.bn2_stats, &dsum);
            let r1 = relu(&bc.h1);
            let (dr1, dw2, dbias2) =
                conv_backward(&r1, &block.conv2.w, block.conv2.stride, block.conv2.pad, &dc2);
            let dh1 = relu_backward(&bc.h1, &dr1);
            let (dc1, dg1, db1) = bn_backward(&bc.c1, &block.bn1.gamma, &bc.bn1_stats, &dh1);
            let (dinput_main, dw1, dbias1) = conv_backward(
                &bc.input,
                &block.conv1.w,
                block.conv1.stride,
                block.conv1.pad,
                &dc1,
            );

            // Skip branch.
            let dinput_skip = match (&block.proj, &bc.proj_out, &bc.proj_stats) {
                (Some((conv, bn)), Some(proj_out), Some(stats)) => {
                    let (dp, dgp, dbp) = bn_backward(proj_out, &bn.gamma, stats, &dsum);
                    let (dinput, dwp, dbiasp) =
                        conv_backward(&bc.input, &conv.w, conv.stride, conv.pad, &dp);
                    grads.blocks[i].proj = Some((dwp, dbiasp, dgp, dbp));
                    dinput
                }
                _ => dsum.clone(),
            };

            grads.blocks[i].conv1 = (dw1, dbias1);
            grads.blocks[i].bn1 = (dg1, db1);
            grads.blocks[i].conv2 = (dw2, dbias2);
            grads.blocks[i].bn2 = (dg2, db2);
            dact = &dinput_main + &dinput_skip;
        }

        let dstem_h = relu_backward(&cache.stem_h, &dact);
        let (dstem_out, dgs, dbs) =
            bn_backward(&cache.stem_out, &self.stem_bn.gamma, &cache.stem_stats, &dstem_h);
        grads.stem_bn = (dgs, dbs);
        let (_, dw_stem, db_stem) = conv_backward(
            &cache.x,
            &self.stem.w,
            self.stem.stride,
            self.stem.pad,
            &dstem_out,
        );
        grads.stem = (dw_stem, db_stem);

        Ok((loss, grads))
    }

    /// Trainable parameters flattened in declaration order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit_params(&mut |s| out.extend_from_slice(s));
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |s| n += s.len());
        n
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        Ok(())
    }

    fn visit_params(&self, f: &mut impl FnMut(&[f64])) {
        f(self.stem.w.as_slice().unwrap());
        f(self.stem.b.as_slice().unwrap());
        f(self.stem_bn.gamma.as_slice().unwrap());
        f(self.stem_bn.beta.as_slice().unwrap());
        for block in &self.blocks {
            f(block.conv1.w.as_slice().unwrap());
            f(block.conv1.b.as_slice().unwrap());
            f(block.bn1.gamma.as_slice().unwrap());
            f(block.bn1.beta.as_slice().unwrap());
            f(block.conv2.w.as_slice().unwrap());
            f(block.conv2.b.as_slice().unwrap());
            f(block.bn2.gamma.as_slice().unwrap());
            f(block.bn2.beta.as_slice().unwrap());
            if let Some((conv, bn)) = &block.proj {
                f(conv.w.as_slice().unwrap());
                f(conv.b.as_slice().unwrap());
                f(bn.gamma.as_slice().unwrap());
                f(bn.beta.as_slice().unwrap());
            }
        }
        f(self.head_bn.gamma.as_slice().unwrap());
        f(self.head_bn.beta.as_slice().unwrap());
        f(self.fc_w.as_slice().unwrap());
        f(self.fc_b.as_slice().unwrap());
    }

    fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        f(self.stem.w.as_slice_mut().unwrap());
        f(self.stem.b.as_slice_mut().unwrap());
        f(self.stem_bn.gamma.as_slice_mut().unwrap());
        f(self.stem_bn.beta.as_slice_mut().unwrap());
        for block in &mut self.blocks {
            f(block.conv1.w.as_slice_mut().unwrap());
            f(block.conv1.b.as_slice_mut().unwrap());
            f(block.bn1.gamma.as_slice_mut().unwrap());
            f(block.bn1.beta.as_slice_mut().unwrap());
            f(block.conv2.w.as_slice_mut().unwrap());
            f(block.conv2.b.as_slice_mut().unwrap());
            f(block.bn2.gamma.as_slice_mut().unwrap());
            f(block.bn2.beta.as_slice_mut().unwrap());
            if let Some((conv, bn)) = &mut block.proj {
                f(conv.w.as_slice_mut().unwrap());
                f(conv.b.as_slice_mut().unwrap());
                f(bn.gamma.as_slice_mut().unwrap());
                f(bn.beta.as_slice_mut().unwrap());
            }
        }
        f(self.head_bn.gamma.as_slice_mut().unwrap());
        f(self.head_bn.beta.as_slice_mut().unwrap());
        f(self.fc_w.as_slice_mut().unwrap());
        f(self.fc_b.as_slice_mut().unwrap());
    }

    /// Every tensor including running statistics, in declaration order
    /// (the persistence layout).
    fn visit_all_tensors(&self, f: &mut impl FnMut(&[f64])) {
        let bn = |bn: &BatchNorm, f: &mut dyn FnMut(&[f64])| {
            f(bn.gamma.as_slice().unwrap());
            f(bn.beta.as_slice().unwrap());
            f(bn.running_mean.as_slice().unwrap());
            f(bn.running_var.as_slice().unwrap());
        };
        f(self.stem.w.as_slice().unwrap());
        f(self.stem.b.as_slice().unwrap());
        bn(&self.stem_bn, f);
        for block in &self.blocks {
            f(block.conv1.w.as_slice().unwrap());
            f(block.conv1.b.as_slice().unwrap());
            bn(&block.bn1, f);
            f(block.conv2.w.as_slice().unwrap());
            f(block.conv2.b.as_slice().unwrap());
            bn(&block.bn2, f);
            if let Some((conv, bnp)) = &block.proj {
                f(conv.w.as_slice().unwrap());
                f(conv.b.as_slice().unwrap());
                bn(bnp, f);
            }
        }
        bn(&self.head_bn, f);
        f(self.fc_w.as_slice().unwrap());
        f(self.fc_b.as_slice().unwrap());
    }

    fn visit_all_tensors_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        fn bn(b: &mut BatchNorm, f: &mut impl FnMut(&mut [f64])) {
            f(b.gamma.as_slice_mut().unwrap());
            f(b.beta.as_slice_mut().unwrap());
            f(b.running_mean.as_slice_mut().unwrap());
            f(b.running_var.as_slice_mut().unwrap());
        }
        f(self.stem.w.as_slice_mut().unwrap());
        f(self.stem.b.as_slice_mut().unwrap());
        bn(&mut self.stem_bn, f);
        for block in &mut self.blocks {
            f(block.conv1.w.as_slice_mut().unwrap());
            f(block.conv1.b.as_slice_mut().unwrap());
            bn(&mut block.bn1, f);
            f(block.conv2.w.as_slice_mut().unwrap());
            f(block.conv2.b.as_slice_mut().unwrap());
            bn(&mut block.bn2, f);
            if let Some((conv, bnp)) = &mut block.proj {
                f(conv.w.as_slice_mut().unwrap());
                f(conv.b.as_slice_mut().unwrap());
                bn(bnp, f);
            }
        }
        bn(&mut self.head_bn, f);
        f(self.fc_w.as_slice_mut().unwrap());
        f(self.fc_b.as_slice_mut().unwrap());
    }

    /// Persist as flat binary: magic "RNET", config block, then every
    /// tensor in declaration order as little-endian f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(b"RNET").map_err(io_err)?;
        w.write_all(&(self.cfg.n_blocks as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&(self.cfg.channels.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &c in &self.cfg.channels {
            w.write_all(&(c as u32).to_le_bytes()).map_err(io_err)?;
        }
        w.write_all(&(self.cfg.input_shape.0 as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&(self.cfg.input_shape.1 as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&(self.cfg.n_classes as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&self.cfg.seed.to_le_bytes()).map_err(io_err)?;
        let mut result = Ok(());
        self.visit_all_tensors(&mut |s| {
            if result.is_ok() {
                for &v in s {
                    if let Err(e) = w.write_all(&(v as f32).to_le_bytes()) {
                        result = Err(Error::io(path, e));
                        break;
                    }
                }
            }
        });
        result?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ResNet> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |detail: &str| Error::MalformedModel {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != b"RNET" {
            return Err(bad("bad magic, expected RNET"));
        }
        let mut b4 = [0u8; 4];
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
            r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
            Ok(u32::from_le_bytes(b4))
        };
        let n_blocks = read_u32(&mut r)? as usize;
        let n_stages = read_u32(&mut r)? as usize;
        if n_stages > 64 {
            return Err(bad("implausible stage count"));
        }
        let mut channels = Vec::with_capacity(n_stages);
        for _ in 0..n_stages {
            channels.push(read_u32(&mut r)? as usize);
        }
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        let n_classes = read_u32(&mut r)? as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
        let seed = u64::from_le_bytes(b8);
        let cfg = NetConfig {
            n_blocks,
            channels,
            input_shape: (h, w),
            n_classes,
            seed,
        };
        cfg.validate().map_err(|e| Error::MalformedModel {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut net = init_model(&cfg)?;
        let mut result = Ok(());
        let mut buf = [0u8; 4];
        net.visit_all_tensors_mut(&mut |s| {
            if result.is_ok() {
                for v in s.iter_mut() {
                    match r.read_exact(&mut buf) {
                        Ok(()) => *v = f32::from_le_bytes(buf) as f64,
                        Err(e) => {
                            result = Err(Error::io(path, e));
                            break;
                        }
                    }
                }
            }
        });
        result?;
        Ok(net)
    }

    /// Positive-class probabilities of a batch in eval mode.
    pub fn predict(&self, batch: &Array4<f64>) -> Result<Vec<f64>> {
        let (probs, _) = self.forward(batch, Mode::Eval)?;
        Ok(probs.column(1).to_vec())
    }
}

/// Gradients mirroring the parameter tensors of a [`ResNet`].
pub struct Gradients {
    stem: (Array4<f64>, Array1<f64>),
    stem_bn: (Array1<f64>, Array1<f64>),
    blocks: Vec<BlockGrads>,
    head_bn: (Array1<f64>, Array1<f64>),
    fc_w: Array2<f64>,
    fc_b: Array1<f64>,
}

/// Projection-path gradients: conv weight, conv bias, bn scale, bn shift.
type ProjGrads = (Array4<f64>, Array1<f64>, Array1<f64>, Array1<f64>);

struct BlockGrads {
    conv1: (Array4<f64>, Array1<f64>),
    bn1: (Array1<f64>, Array1<f64>),
    conv2: (Array4<f64>, Array1<f64>),
    bn2: (Array1<f64>, Array1<f64>),
    proj: Option<ProjGrads>,
}

impl Gradients {
    fn zeros_like(net: &ResNet) -> Self {
        Gradients {
            stem: (Array4::zeros(net.stem.w.dim()), Array1::zeros(net.stem.b.len())),
            stem_bn: (
                Array1::zeros(net.stem_bn.gamma.len()),
                Array1::zeros(net.stem_bn.beta.len()),
            ),
            blocks: net
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    conv1: (Array4::zeros(b.conv1.w.dim()), Array1::zeros(b.conv1.b.len())),
                    bn1: (
                        Array1::zeros(b.bn1.gamma.len()),
                        Array1::zeros(b.bn1.beta.len()),
                    ),
                    conv2: (Array4::zeros(b.conv2.w.dim()), Array1::zeros(b.conv2.b.len())),
                    bn2: (
                        Array1::zeros(b.bn2.gamma.len()),
                        Array1::zeros(b.bn2.beta.len()),
                    ),
                    proj: None,
                })
                .collect(),
            head_bn: (
                Array1::zeros(net.head_bn.gamma.len()),
                Array1::zeros(net.head_bn.beta.len()),
            ),
            fc_w: Array2::zeros(net.fc_w.dim()),
            fc_b: Array1::zeros(net.fc_b.len()),
        }
    }

    /// Flatten in the same declaration order as [`ResNet::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let push4 = |out: &mut Vec<f64>, a: &Array4<f64>| out.extend_from_slice(a.as_slice().unwrap());
        let push1 = |out: &mut Vec<f64>, a: &Array1<f64>| out.extend_from_slice(a.as_slice().unwrap());
        push4(&mut out, &self.stem.0);
        push1(&mut out, &self.stem.1);
        push1(&mut out, &self.stem_bn.0);
        push1(&mut out, &self.stem_bn.1);
        for b in &self.blocks {
            push4(&mut out, &b.conv1.0);
            push1(&mut out, &b.conv1.1);
            push1(&mut out, &b.bn1.0);
            push1(&mut out, &b.bn1.1);
            push4(&mut out, &b.conv2.0);
            push1(&mut out, &b.conv2.1);
            push1(&mut out, &b.bn2.0);
            push1(&mut out, &b.bn2.1);
            if let Some((w, bias, g, beta)) = &b.proj {
                push4(&mut out, w);
                push1(&mut out, bias);
                push1(&mut out, g);
                push1(&mut out, beta);
            }
        }
        push1(&mut out, &self.head_bn.0);
        push1(&mut out, &self.head_bn.1);
        out.extend_from_slice(self.fc_w.as_slice().unwrap());
        push1(&mut out, &self.fc_b);
        out
    }
}

impl Scorer for ResNet {
    fn score(&self, spec: &Spectrogram) -> Result<f64> {
        let (t, f) = spec.values.dim();
        if (t, f) != self.cfg.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram {t}x{f}, network expects {}x{}",
                self.cfg.input_shape.0, self.cfg.input_shape.1
            )));
        }
        let mut x = Array4::zeros((1, 1, t, f));
        x.index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), 0)
            .assign(&spec.values);
        Ok(self.predict(&x)?[0])
    }
}

/// Assemble a batch tensor from spectrogram-bearing samples.
pub fn batch_from_samples(
    samples: &[&crate::eval::LabeledSample],
    input_shape: (usize, usize),
) -> Result<(Array4<f64>, Vec<usize>)> {
    let (h, w) = input_shape;
    let mut x = Array4::zeros((samples.len(), 1, h, w));
    let mut labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.spectrogram.values.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "sample {i} has shape {:?}, expected ({h}, {w})",
                s.spectrogram.values.dim()
            )));
        }
        x.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&s.spectrogram.values);
        labels.push(usize::from(s.label));
    }
    Ok((x, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn tiny_cfg(seed: u64) -> NetConfig {
        NetConfig {
            n_blocks: 2,
            channels: vec![4],
            input_shape: (8, 8),
            n_classes: 2,
            seed,
        }
    }

    fn randn_batch(rng: &mut ChaCha8Rng, b: usize, shape: (usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn((b, 1, shape.0, shape.1), |_| {
            rng.sample::<f64, _>(StandardNormal)
        })
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_cfg(42);
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());

        let c = init_model(&tiny_cfg(43)).unwrap();
        assert_ne!(a.params_flat(), c.params_flat());
    }

    /// Independent shape-walker: parameter count from the architecture
    /// formulas alone.
    fn expected_param_count(cfg: &NetConfig) -> usize {
        let conv = |c_out: usize, c_in: usize, k: usize| c_out * c_in * k * k + c_out;
        let bn = |c: usize| 2 * c;
        let mut n = conv(cfg.channels[0], 1, 3) + bn(cfg.channels[0]);
        for i in 0..cfg.n_blocks {
            let stage = i / 2;
            let c_out = cfg.channels[stage];
            let c_in = if i == 0 {
                cfg.channels[0]
            } else {
                cfg.channels[(i - 1) / 2]
            };
            let stride = if i % 2 == 1 { 2 } else { 1 };
            n += conv(c_out, c_in, 3) + bn(c_out);
            n += conv(c_out, c_out, 3) + bn(c_out);
            if c_in != c_out || stride != 1 {
                n += conv(c_out, c_in, 1) + bn(c_out);
            }
        }
        let c_last = *cfg.channels.last().unwrap();
        n + bn(c_last) + (cfg.n_classes * c_last + cfg.n_classes)
    }

    #[test]
    fn param_count_matches_shape_walker() {
        for cfg in [
            tiny_cfg(1),
            NetConfig::tiny(2),
            NetConfig::paper(3),
            NetConfig {
                n_blocks: 3,
                channels: vec![4, 8],
                input_shape: (16, 16),
                n_classes: 2,
                seed: 4,
            },
        ] {
            let net = init_model(&cfg).unwrap();
            assert_eq!(net.n_params(), expected_param_count(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn forward_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = init_model(&tiny_cfg(5)).unwrap();
        let x = randn_batch(&mut rng, 6, (8, 8));
        for mode in [Mode::Train, Mode::Eval] {
            let (probs, _) = net.forward(&x, mode).unwrap();
            for row in probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn eval_scores_independent_of_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = init_model(&tiny_cfg(6)).unwrap();
        let x = randn_batch(&mut rng, 32, (8, 8));
        let (probs, _) = net.forward(&x, Mode::Eval).unwrap();
        for bi in [0usize, 7, 31] {
            let mut single = Array4::zeros((1, 1, 8, 8));
            single
                .index_axis_mut(Axis(0), 0)
                .assign(&x.index_axis(Axis(0), bi));
            let (p1, _) = net.forward(&single, Mode::Eval).unwrap();
            assert!((p1[[0, 1]] - probs[[bi, 1]]).abs() < 1e-6);
        }
    }

    #[test]
    fn fresh_net_near_half_on_zero_input() {
        // Symmetry of initialization: over seeds, zero input scores
        // close to (0.5, 0.5).
        for seed in 0..10 {
            let net = init_model(&tiny_cfg(seed)).unwrap();
            let x = Array4::zeros((1, 1, 8, 8));
            let (probs, _) = net.forward(&x, Mode::Eval).unwrap();
            assert!(
                (probs[[0, 1]] - 0.5).abs() < 0.1,
                "seed {seed}: {}",
                probs[[0, 1]]
            );
        }
    }

    #[test]
    fn forward_rejects_bad_batches() {
        let net = init_model(&tiny_cfg(7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x1 = randn_batch(&mut rng, 1, (8, 8));
        assert!(net.forward(&x1, Mode::Train).is_err());
        assert!(net.forward(&x1, Mode::Eval).is_ok());
        let wrong = randn_batch(&mut rng, 2, (9, 8));
        assert!(matches!(
            net.forward(&wrong, Mode::Train),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// Full-network gradient check: every parameter of a tiny net
    /// against central finite differences (acceptance criterion 2 runs
    /// the same check from the acceptance suite).
    #[test]
    fn full_gradient_check_tiny_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut net = init_model(&tiny_cfg(8)).unwrap();
        let x = randn_batch(&mut rng, 4, (8, 8));
        let labels = vec![0usize, 1, 1, 0];

        let (_, cache) = net.forward(&x, Mode::Train).unwrap();
        let (_, grads) = net.backward(&cache, &labels).unwrap();
        let analytic = grads.flat();
        let mut params = net.params_flat();
        assert_eq!(analytic.len(), params.len());

        // Central differences at h = 1e-6; a parameter that lands on a
        // ReLU kink is retried at a smaller step (a kink artifact
        // shrinks with h, a genuine analytic error does not).
        let mut numeric_at = |params: &mut Vec<f64>, i: usize, h: f64| -> f64 {
            let orig = params[i];
            params[i] = orig + h;
            net.set_params_flat(params).unwrap();
            let (_, c_plus) = net.forward(&x, Mode::Train).unwrap();
            let (lp, _, _) = softmax_cross_entropy(c_plus.logits(), &labels);
            params[i] = orig - h;
            net.set_params_flat(params).unwrap();
            let (_, c_minus) = net.forward(&x, Mode::Train).unwrap();
            let (lm, _, _) = softmax_cross_entropy(c_minus.logits(), &labels);
            params[i] = orig;
            (lp - lm) / (2.0 * h)
        };
        let mut worst = 0.0f64;
        for i in 0..params.len() {
            let scale = params[i].abs().max(1.0);
            let rel_err = |a: f64, n: f64| {
                let denom = a.abs().max(n.abs());
                if (a - n).abs() <= 1e-8 {
                    0.0
                } else {
                    (a - n).abs() / denom
                }
            };
            let mut err = rel_err(analytic[i], numeric_at(&mut params, i, 1e-6 * scale));
            if err >= 1e-3 {
                err = rel_err(analytic[i], numeric_at(&mut params, i, 1e-7 * scale));
            }
            worst = worst.max(err);
        }
        net.set_params_flat(&params).unwrap();
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn gradient_vanishes_at_perfect_prediction() {
        // Saturate the head so predictions are one-hot: gradients of the
        // loss approach zero.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut net = init_model(&tiny_cfg(9)).unwrap();
        let x = randn_batch(&mut rng, 2, (8, 8));
        // Find current predictions, then declare them to be the labels
        // and push the head bias hard in that direction.
        let (probs, _) = net.forward(&x, Mode::Train).unwrap();
        let labels: Vec<usize> = probs
            .rows()
            .into_iter()
            .map(|r| if r[1] >= r[0] { 1usize } else { 0 })
            .collect();
        // Scaling the dense head multiplies every logit, saturating the
        // softmax at the currently predicted (= target) classes.
        net.fc_w.mapv_inplace(|v| v * 1e6);
        net.fc_b.mapv_inplace(|v| v * 1e6);
        let (loss, cache) = {
            let (_, cache) = net.forward(&x, Mode::Train).unwrap();
            let (loss, _, _) = softmax_cross_entropy(cache.logits(), &labels);
            (loss, cache)
        };
        assert!(loss < 1e-7, "loss {loss}");
        let (_, grads) = net.backward(&cache, &labels).unwrap();
        let gnorm = grads.flat().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(gnorm < 1e-6, "gradient norm {gnorm}");
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = init_model(&tiny_cfg(10)).unwrap();
        let x = randn_batch(&mut rng, 3, (8, 8));
        let labels = vec![0usize, 1, 0];
        let mut xx = Array4::zeros((6, 1, 8, 8));
        for i in 0..3 {
            xx.index_axis_mut(Axis(0), i).assign(&x.index_axis(Axis(0), i));
            xx.index_axis_mut(Axis(0), i + 3)
                .assign(&x.index_axis(Axis(0), i));
        }
        let labels2 = vec![0usize, 1, 0, 0, 1, 0];
        let (_, c1) = net.forward(&x, Mode::Train).unwrap();
        let (l1, g1) = net.backward(&c1, &labels).unwrap();
        let (_, c2) = net.forward(&xx, Mode::Train).unwrap();
        let (l2, g2) = net.backward(&c2, &labels2).unwrap();
        assert!((l1 - l2).abs() < 1e-10);
        for (a, b) in g1.flat().iter().zip(g2.flat().iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    /// Zeroing the residual branches reduces the net to the skip path;
    /// outputs stay valid probabilities.
    #[test]
    fn zeroed_residual_branches_still_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut net = init_model(&tiny_cfg(11)).unwrap();
        for block in &mut net.blocks {
            block.conv2.w.fill(0.0);
            block.conv2.b.fill(0.0);
            block.bn2.beta.fill(0.0);
            // With conv2 zeroed, bn2 output is beta = 0: main branch
            // contributes nothing.
        }
        let x = randn_batch(&mut rng, 4, (8, 8));
        let (probs, _) = net.forward(&x, Mode::Eval).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let net = init_model(&NetConfig {
            n_blocks: 2,
            channels: vec![3],
            input_shape: (8, 8),
            n_classes: 2,
            seed: 17,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rnet");
        net.save(&path).unwrap();
        let back = ResNet::load(&path).unwrap();
        assert_eq!(back.cfg, net.cfg);
        let x = randn_batch(&mut rng, 2, (8, 8));
        let (pa, _) = net.forward(&x, Mode::Eval).unwrap();
        let (pb, _) = back.forward(&x, Mode::Eval).unwrap();
        for (a, b) in pa.iter().zip(pb.iter()) {
            // f32 storage rounds the parameters.
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn config_validation() {
        assert!(init_model(&NetConfig {
            n_blocks: 0,
            channels: vec![],
            input_shape: (8, 8),
            n_classes: 2,
            seed: 0,
        })
        .is_err());
        assert!(init_model(&NetConfig {
            n_blocks: 4,
            channels: vec![4],
            input_shape: (8, 8),
            n_classes: 2,
            seed: 0,
        })
        .is_err());
    }
}
