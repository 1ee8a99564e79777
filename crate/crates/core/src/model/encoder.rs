//! Volumetric encoder: three 3x3x3 conv/BN/ReLU stages, pooling and a
//! two-layer dense head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{check_input, BatchNorm, Binder, Builder, Conv, ConvShape, Dense, NetPass, ParamStore};
use crate::augment::splitmix64;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Canonical convolution widths and hidden dense width at multiplier 1.
const CONV_WIDTHS: [usize; 3] = [64, 128, 256];
const HIDDEN: usize = 512;
const POOL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreeDNetConfig {
    pub num_classes: usize,
    #[serde(default = "one")]
    pub width_multiplier: f64,
    /// Hidden dense width; `None` scales the canonical 512 by the multiplier.
    #[serde(default)]
    pub hidden_width: Option<usize>,
}

fn one() -> f64 {
    1.0
}

fn scaled(width: usize, m: f64) -> usize {
    (width as f64 * m).round() as usize
}

impl ThreeDNetConfig {
    pub fn new(num_classes: usize, width_multiplier: f64) -> Self {
        Self { num_classes, width_multiplier, hidden_width: None }
    }

    pub fn conv_widths(&self) -> [usize; 3] {
        CONV_WIDTHS.map(|w| scaled(w, self.width_multiplier))
    }

    pub fn hidden(&self) -> usize {
        self.hidden_width.unwrap_or_else(|| scaled(HIDDEN, self.width_multiplier))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if !self.width_multiplier.is_finite() || self.conv_widths()[0] == 0 || self.hidden() == 0 {
            return Err(Error::Config(format!(
                "3D width multiplier {} leaves a layer without channels",
                self.width_multiplier
            )));
        }
        Ok(())
    }
}

/// One entry of the encoder's layer listing. Channel counts and kernel
/// sizes are absent where a layer has none.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Layer {
    pub kind: &'static str,
    pub in_channels: Option<usize>,
    pub out_channels: Option<usize>,
    pub kernel: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ThreeDNet {
    cfg: ThreeDNetConfig,
    store: ParamStore,
    convs: Vec<(Conv, BatchNorm)>,
    fc1: Dense,
    fc2: Dense,
}

impl ThreeDNet {
    pub fn new(cfg: ThreeDNetConfig, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(init_seed ^ 0x3d));
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let mut in_ch = 3;
        let mut convs = Vec::new();
        for (i, &w) in cfg.conv_widths().iter().enumerate() {
            let shape = ConvShape { in_ch, out_ch: w, kernel: 3, stride: 1, padding: 1, bias: true, volumetric: true };
            let c = b.conv(&format!("three_d.conv{}", i + 1), shape);
            let bn = b.batch_norm(&format!("three_d.bn{}", i + 1), w);
            convs.push((c, bn));
            in_ch = w;
        }
        let fc1 = b.dense("three_d.fc1", in_ch, cfg.hidden());
        let fc2 = b.dense("three_d.fc2", cfg.hidden(), cfg.num_classes);
        Ok(Self { cfg, store, convs, fc1, fc2 })
    }

    pub fn config(&self) -> &ThreeDNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// The forward-pass layer sequence, with channel counts and kernel sizes
    /// read from the stored parameter shapes.
    pub fn layers(&self) -> Vec<Layer> {
        let layer = |kind, i, o, k| Layer { kind, in_channels: i, out_channels: o, kernel: k };
        let shape = |id| self.store.value(id).shape().to_vec();
        let mut out = Vec::new();
        for (c, bn) in &self.convs {
            let w = shape(c.weight());
            out.push(layer("conv3d", Some(w[1]), Some(w[0]), Some(w[2])));
            out.push(layer("batch_norm", None, Some(shape(bn.gamma())[0]), None));
            out.push(layer("relu", None, None, None));
        }
        out.push(layer("avg_pool3d", None, None, Some(POOL)));
        out.push(layer("adaptive_avg_pool3d", None, None, Some(1)));
        let w = shape(self.fc1.weight());
        out.push(layer("dense", Some(w[1]), Some(w[0]), None));
        out.push(layer("relu", None, None, None));
        let w = shape(self.fc2.weight());
        out.push(layer("dense", Some(w[1]), Some(w[0]), None));
        out
    }

    /// Trainable scalars in the final dense layer.
    pub fn head_parameters(&self) -> usize {
        (self.cfg.hidden() + 1) * self.cfg.num_classes
    }

    /// Forward pass over `[N, 3, D, H, W]` volumes; every spatial extent must
    /// be at least the pooling window of 3.
    pub fn forward(&self, tape: &mut Tape, x: Var, training: bool) -> Result<NetPass> {
        check_input(tape.value(x), 5, 3, "3D encoder")?;
        let mut bind = Binder::new(&self.store, training);
        let mut h = x;
        for (c, bn) in &self.convs {
            h = bind.conv(tape, c, h)?;
            h = bind.batch_norm(tape, bn, h)?;
            h = tape.relu(h);
        }
        let h = tape.avg_pool(h, POOL)?;
        let h = tape.global_avg_pool(h)?;
        let h = tape.flatten(h)?;
        let h = bind.dense(tape, &self.fc1, h)?;
        let h = tape.relu(h);
        let logits = bind.dense(tape, &self.fc2, h)?;
        Ok(bind.finish(logits))
    }

    /// Eval-mode logits `[N, K]`.
    pub fn logits(&self, volumes: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(volumes);
        let pass = self.forward(&mut tape, x, false)?;
        Ok(tape.value(pass.logits).detached())
    }
}
