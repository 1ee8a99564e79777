//! Residual 2D classifier with the ResNet-18 layout and a width multiplier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{check_input, BatchNorm, Binder, Builder, Conv, ConvShape, Dense, NetPass, ParamStore};
use crate::augment::splitmix64;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoDNetConfig {
    pub num_classes: usize,
    /// Fraction of the canonical stage widths 64/128/256/512.
    #[serde(default = "one")]
    pub width_multiplier: f64,
    #[serde(default = "canonical_blocks")]
    pub blocks_per_stage: Vec<usize>,
    #[serde(default = "three")]
    pub input_channels: usize,
}

fn one() -> f64 {
    1.0
}

fn three() -> usize {
    3
}

fn canonical_blocks() -> Vec<usize> {
    vec![2, 2, 2, 2]
}

impl TwoDNetConfig {
    pub fn new(num_classes: usize, width_multiplier: f64) -> Self {
        Self { num_classes, width_multiplier, blocks_per_stage: canonical_blocks(), input_channels: 3 }
    }

    /// Stage widths `round(64 m * 2^i)`.
    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.blocks_per_stage.len())
            .map(|i| (64.0 * self.width_multiplier * (1u64 << i) as f64).round() as usize)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if !self.width_multiplier.is_finite() || self.width_multiplier * 64.0 < 4.0 {
            return Err(Error::Config(format!(
                "2D width multiplier {} gives fewer than 4 stem channels",
                self.width_multiplier
            )));
        }
        if self.blocks_per_stage.is_empty() || self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("every 2D stage needs at least one block".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("2D input channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

/// Stem (7x7 stride-2 conv, batch norm, ReLU, 3x3 stride-2 max pool), residual
/// stages of basic blocks, global average pooling and a dense head.
#[derive(Clone, Debug)]
pub struct TwoDNet {
    cfg: TwoDNetConfig,
    store: ParamStore,
    stem: (Conv, BatchNorm),
    blocks: Vec<Block>,
    head: Dense,
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> ConvShape {
    ConvShape { in_ch, out_ch, kernel, stride, padding, bias: false, volumetric: false }
}

impl TwoDNet {
    pub fn new(cfg: TwoDNetConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(init_seed ^ 0x2d));
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let widths = cfg.stage_widths();
        let stem = (
            b.conv("two_d.stem.conv", conv(cfg.input_channels, widths[0], 7, 2, 3)),
            b.batch_norm("two_d.stem.bn", widths[0]),
        );
        let mut blocks = Vec::new();
        let mut in_ch = widths[0];
        for (stage, (&width, &count)) in widths.iter().zip(&cfg.blocks_per_stage).enumerate() {
            for i in 0..count {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let name = format!("two_d.layer{}.{i}", stage + 1);
                let conv1 = b.conv(&format!("{name}.conv1"), conv(in_ch, width, 3, stride, 1));
                let bn1 = b.batch_norm(&format!("{name}.bn1"), width);
                let conv2 = b.conv(&format!("{name}.conv2"), conv(width, width, 3, 1, 1));
                let bn2 = b.batch_norm(&format!("{name}.bn2"), width);
                let shortcut = (stride != 1 || in_ch != width).then(|| {
                    (
                        b.conv(&format!("{name}.downsample.conv"), conv(in_ch, width, 1, stride, 0)),
                        b.batch_norm(&format!("{name}.downsample.bn"), width),
                    )
                });
                blocks.push(Block { conv1, bn1, conv2, bn2, shortcut });
                in_ch = width;
            }
        }
        let head = b.dense("two_d.fc", in_ch, cfg.num_classes);
        Ok(Self { cfg, store, stem, blocks, head })
    }

    pub fn config(&self) -> &TwoDNetConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Trainable scalars in the final dense layer.
    pub fn head_parameters(&self) -> usize {
        let widths = self.cfg.stage_widths();
        (widths[widths.len() - 1] + 1) * self.cfg.num_classes
    }

    /// Forward pass over `[N, C, H, W]` images already on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<NetPass> {
        check_input(tape.value(x), 4, self.cfg.input_channels, "2D network")?;
        let mut bind = Binder::new(&self.store, training);
        let h = bind.conv(tape, &self.stem.0, x)?;
        let h = bind.batch_norm(tape, &self.stem.1, h)?;
        let h = tape.relu(h);
        let mut h = tape.max_pool2d(h, 3, 2, 1)?;
        for block in &self.blocks {
            let y = bind.conv(tape, &block.conv1, h)?;
            let y = bind.batch_norm(tape, &block.bn1, y)?;
            let y = tape.relu(y);
            let y = bind.conv(tape, &block.conv2, y)?;
            let y = bind.batch_norm(tape, &block.bn2, y)?;
            let skip = match &block.shortcut {
                Some((c, bn)) => {
                    let s = bind.conv(tape, c, h)?;
                    bind.batch_norm(tape, bn, s)?
                }
                None => h,
            };
            let y = tape.add(y, skip)?;
            h = tape.relu(y);
        }
        let h = tape.global_avg_pool(h)?;
        let h = tape.flatten(h)?;
        let logits = bind.dense(tape, &self.head, h)?;
        Ok(bind.finish(logits))
    }

    /// Eval-mode logits `[N, K]`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let pass = self.forward(&mut tape, x, false)?;
        Ok(tape.value(pass.logits).detached())
    }
}
