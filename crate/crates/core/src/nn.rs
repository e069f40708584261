//! Layer building blocks shared by the localization backbone and the patch encoder.

use diffcore::{BatchNormMode, BatchStats, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::BackboneConfig;
use crate::error::Result;

/// Momentum of the running normalization statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A pending update of one normalization layer's running statistics.
#[derive(Debug, Clone)]
pub struct RunningStatsUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

/// One forward pass: the tape, read-only parameters and the pass mode.
pub struct Session<'s, T: Real> {
    pub tape: Tape<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    updates: Vec<RunningStatsUpdate<T>>,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        Ok(self.tape.param(self.store, id)?)
    }

    /// Running-statistics updates gathered by training-mode normalization layers.
    pub fn take_updates(&mut self) -> Vec<RunningStatsUpdate<T>> {
        std::mem::take(&mut self.updates)
    }
}

/// Folds batch statistics into the stored running estimates (unbiased variance).
pub fn apply_running_stats<T: Real>(store: &mut ParamStore<T>, updates: &[RunningStatsUpdate<T>]) {
    let m = T::from_f64(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        let n = u.stats.count as f64;
        let unbias = T::from_f64(n / (n - 1.0).max(1.0));
        for (r, &b) in store.value_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.value_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_>) -> Result<R>) -> Result<R> {
        let prefix = if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut child = Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut child)
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_owned()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn param(&mut self, leaf: &str, value: Tensor<f32>) -> Result<ParamId> {
        let name = self.name(leaf);
        Ok(self.store.insert(name, value)?)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor<f32>) -> Result<ParamId> {
        let name = self.name(leaf);
        Ok(self.store.insert_buffer(name, value)?)
    }

    /// Zero-mean normal weights with standard deviation `sqrt(gain / fan_in)`.
    pub fn fan_in_normal(&mut self, leaf: &str, shape: &[usize], fan_in: usize, gain: f64) -> Result<ParamId> {
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng) as f32).collect();
        self.param(leaf, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound) as f32)
            .collect();
        self.param(leaf, Tensor::new(shape.to_vec(), data)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Bias-free convolution with Kaiming fan-in initialization.
    pub fn new(b: &mut Builder<'_>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Self> {
        let weight = b.fan_in_normal("weight", &[c_out, c_in, kernel, kernel], c_in * kernel * kernel, 2.0)?;
        Ok(Self {
            weight,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight)?;
        Ok(s.tape.conv2d(x, w, self.stride, self.pad)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder<'_>, channels: usize, gamma_init: f32) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", Tensor::full([channels], gamma_init))?,
            beta: b.param("beta", Tensor::zeros([channels]))?,
            running_mean: b.buffer("running_mean", Tensor::zeros([channels]))?,
            running_var: b.buffer("running_var", Tensor::full([channels], 1.0))?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma)?;
        let b = s.param(self.beta)?;
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.tape.batch_norm2d(x, g, b, BatchNormMode::Train)?;
                if let Some(stats) = stats {
                    s.updates.push(RunningStatsUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store;
                let mode = BatchNormMode::Eval {
                    mean: store.value(self.running_mean).data(),
                    var: store.value(self.running_var).data(),
                };
                Ok(s.tape.batch_norm2d(x, g, b, mode)?.0)
            }
        }
    }
}

/// conv-norm-relu, conv-norm, identity (or projected) shortcut, relu.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    pub fn new(b: &mut Builder<'_>, c_in: usize, c_out: usize, stride: usize, zero_init: bool) -> Result<Self> {
        let conv1 = b.scoped("conv1", |b| Conv2d::new(b, c_in, c_out, 3, stride))?;
        let bn1 = b.scoped("bn1", |b| BatchNorm2d::new(b, c_out, 1.0))?;
        let conv2 = b.scoped("conv2", |b| Conv2d::new(b, c_out, c_out, 3, 1))?;
        let bn2 = b.scoped("bn2", |b| BatchNorm2d::new(b, c_out, if zero_init { 0.0 } else { 1.0 }))?;
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                b.scoped("shortcut.conv", |b| Conv2d::new(b, c_in, c_out, 1, stride))?,
                b.scoped("shortcut.bn", |b| BatchNorm2d::new(b, c_out, 1.0))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = s.tape.relu(h)?;
        let h = self.conv2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let p = conv.forward(s, x)?;
                bn.forward(s, p)?
            }
            None => x,
        };
        let y = s.tape.add(h, skip)?;
        Ok(s.tape.relu(y)?)
    }
}

/// Stem convolution followed by residual stages, with no pooling or classifier.
#[derive(Debug, Clone)]
pub struct ResidualTrunk {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    downsample: usize,
    out_channels: usize,
}

impl ResidualTrunk {
    pub fn new(b: &mut Builder<'_>, cfg: &BackboneConfig, in_channels: usize) -> Result<Self> {
        let stem = b.scoped("stem.conv", |b| {
            Conv2d::new(b, in_channels, cfg.stem_width, cfg.stem_kernel, cfg.stem_stride)
        })?;
        let stem_bn = b.scoped("stem.bn", |b| BatchNorm2d::new(b, cfg.stem_width, 1.0))?;
        let mut blocks = Vec::new();
        let mut c_in = cfg.stem_width;
        for (si, &width) in cfg.widths.iter().enumerate() {
            for bi in 0..cfg.blocks_per_stage {
                let stride = match (si, bi) {
                    (0, 0) => cfg.first_stage_stride,
                    (_, 0) => 2,
                    _ => 1,
                };
                let block = b.scoped(&format!("stage{si}.block{bi}"), |b| {
                    BasicBlock::new(b, c_in, width, stride, cfg.zero_init_residual)
                })?;
                blocks.push(block);
                c_in = width;
            }
        }
        Ok(Self {
            stem,
            stem_bn,
            blocks,
            downsample: cfg.downsample(),
            out_channels: cfg.out_channels(),
        })
    }

    pub fn downsample(&self) -> usize {
        self.downsample
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.stem.forward(s, x)?;
        let h = self.stem_bn.forward(s, h)?;
        let mut h = s.tape.relu(h)?;
        for block in &self.blocks {
            h = block.forward(s, h)?;
        }
        Ok(h)
    }
}
