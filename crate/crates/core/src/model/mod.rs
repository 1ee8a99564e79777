//! The 2D residual classifier, the 3D encoder and their weighted combination.

pub mod checkpoint;
mod encoder;
mod params;
mod resnet;

use std::path::Path;

pub use encoder::{Layer, ThreeDNet, ThreeDNetConfig};
pub use params::{commit_stats, NetPass, Param, ParamId, ParamStore, StatsUpdate, BN_EPS, BN_MOMENTUM};
pub use resnet::{TwoDNet, TwoDNetConfig};

use crate::augment::Volume;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Stacks equally sized images into an `[N, C, H, W]` tensor.
pub fn image_batch<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let images: Vec<&Image> = images.into_iter().collect();
    let Some(first) = images.first() else {
        return Err(Error::Dimension("empty image batch".into()));
    };
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in &images {
        if img.dims() != (c, h, w) {
            return Err(Error::Dimension(format!("image {:?} in a batch of {:?}", img.dims(), (c, h, w))));
        }
        data.extend_from_slice(img.pixels());
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Stacks equally sized volumes into an `[N, C, D, H, W]` tensor.
pub fn volume_batch(volumes: &[Volume]) -> Result<Tensor> {
    let Some(first) = volumes.first() else {
        return Err(Error::Dimension("empty volume batch".into()));
    };
    let dims = |v: &Volume| (v.channels(), v.depth(), v.height(), v.width());
    let (c, d, h, w) = dims(first);
    let mut data = Vec::with_capacity(volumes.len() * c * d * h * w);
    for v in volumes {
        if dims(v) != (c, d, h, w) {
            return Err(Error::Dimension(format!("volume {:?} in a batch of {:?}", dims(v), (c, d, h, w))));
        }
        data.extend(v.to_cdhw());
    }
    Tensor::new(vec![volumes.len(), c, d, h, w], data)
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let [n, k] = logits.shape()[..] else {
        return Err(Error::Dimension(format!("softmax expects [N, K], got {:?}", logits.shape())));
    };
    let mut out = vec![0.0; n * k];
    for (row, o) in logits.data().chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        crate::autodiff::softmax_row(row, o);
    }
    Tensor::new(vec![n, k], out)
}

/// `alpha * o2d + beta * o3d`, elementwise.
pub fn combine_logits(o2d: &Tensor, o3d: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    if o2d.shape() != o3d.shape() {
        return Err(Error::Dimension(format!("logit shapes {:?} and {:?} differ", o2d.shape(), o3d.shape())));
    }
    let data = o2d.data().iter().zip(o3d.data()).map(|(a, b)| alpha * a + beta * b).collect();
    Tensor::new(o2d.shape().to_vec(), data)
}

/// Logits and probabilities of both branches plus the combined logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridOutput {
    pub o2d: Tensor,
    pub o3d: Tensor,
    pub oh: Tensor,
    pub s2d: Tensor,
    pub s3d: Tensor,
}

/// Tape handles from one hybrid forward pass.
#[derive(Debug)]
pub struct HybridPass {
    pub two_d: NetPass,
    pub three_d: NetPass,
    /// Combined logits, assembled from the values of `o2d` and `o3d`.
    pub oh: Tensor,
}

impl HybridPass {
    pub fn o2d(&self) -> Var {
        self.two_d.logits
    }

    pub fn o3d(&self) -> Var {
        self.three_d.logits
    }

    pub fn output(&self, tape: &Tape) -> Result<HybridOutput> {
        let o2d = tape.value(self.o2d()).detached();
        let o3d = tape.value(self.o3d()).detached();
        Ok(HybridOutput { s2d: softmax_rows(&o2d)?, s3d: softmax_rows(&o3d)?, oh: self.oh.clone(), o2d, o3d })
    }
}

/// A 2D network and a 3D encoder whose logits are blended as
/// `alpha * o2d + beta * o3d`.
#[derive(Clone, Debug)]
pub struct HybridModel {
    pub two_d: TwoDNet,
    pub three_d: ThreeDNet,
    alpha: f64,
    beta: f64,
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0 && (alpha + beta).is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("hybrid weights must be non-negative and not both zero, got {alpha}, {beta}")))
    }
}

impl HybridModel {
    pub fn new(two_d: TwoDNet, three_d: ThreeDNet, alpha: f64, beta: f64) -> Result<Self> {
        check_weights(alpha, beta)?;
        if two_d.num_classes() != three_d.config().num_classes {
            return Err(Error::Config(format!(
                "2D network has {} classes, 3D encoder has {}",
                two_d.num_classes(),
                three_d.config().num_classes
            )));
        }
        Ok(Self { two_d, three_d, alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn set_weights(&mut self, alpha: f64, beta: f64) -> Result<()> {
        check_weights(alpha, beta)?;
        self.alpha = alpha;
        self.beta = beta;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.two_d.num_classes()
    }

    /// Runs both branches; `images[i]` and `volumes[i]` must come from the
    /// same sample.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor, volumes: &Tensor, training: bool) -> Result<HybridPass> {
        if images.shape()[0] != volumes.shape()[0] {
            return Err(Error::Dimension(format!(
                "{} images but {} volumes in a hybrid batch",
                images.shape()[0],
                volumes.shape()[0]
            )));
        }
        let x2 = tape.constant(images);
        let x3 = tape.constant(volumes);
        let two_d = self.two_d.forward(tape, x2, training)?;
        let three_d = self.three_d.forward(tape, x3, training)?;
        let oh = combine_logits(tape.value(two_d.logits), tape.value(three_d.logits), self.alpha, self.beta)?;
        Ok(HybridPass { two_d, three_d, oh })
    }

    /// Eval-mode outputs.
    pub fn predict(&self, images: &Tensor, volumes: &Tensor) -> Result<HybridOutput> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, images, volumes, false)?;
        pass.output(&tape)
    }

    pub fn num_trainable(&self) -> usize {
        self.two_d.params().num_trainable() + self.three_d.params().num_trainable()
    }

    /// Saves both branches into one checkpoint.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &[self.two_d.params(), self.three_d.params()])
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        checkpoint::load(path, &mut [self.two_d.params_mut(), self.three_d.params_mut()])
    }
}

impl TwoDNet {
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &[self.params()])
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        checkpoint::load(path, &mut [self.params_mut()])
    }
}

impl ThreeDNet {
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &[self.params()])
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        checkpoint::load(path, &mut [self.params_mut()])
    }
}
