use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Classification loss applied to each head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    MulticlassCe,
    /// Binary cross-entropy; only valid for two classes.
    BinaryCe,
}

/// Which softmax, if any, the consistency term treats as a fixed target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopGrad {
    #[default]
    None,
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

/// Loss node and the values of its components for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l2d: f64,
    pub l3d: f64,
    pub mse: f64,
    pub total_value: f64,
}

pub fn classification_loss(tape: &mut Tape, logits: Var, targets: &[usize], mode: LossMode) -> Result<Var> {
    match mode {
        LossMode::MulticlassCe => tape.cross_entropy(logits, targets),
        LossMode::BinaryCe => tape.binary_cross_entropy(logits, targets),
    }
}

/// `l2d + l3d + lambda * mse(softmax(o2d), softmax(o3d))`, each term a
/// batch mean.
pub fn combined_loss(
    tape: &mut Tape,
    o2d: Var,
    o3d: Var,
    targets: &[usize],
    lambda: f64,
    mode: LossMode,
    stop_grad: StopGrad,
) -> Result<LossTerms> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("consistency weight must be finite and >= 0, got {lambda}")));
    }
    let l2d = classification_loss(tape, o2d, targets, mode)?;
    let l3d = classification_loss(tape, o3d, targets, mode)?;
    let a = if stop_grad == StopGrad::TwoD { tape.detach(o2d) } else { o2d };
    let b = if stop_grad == StopGrad::ThreeD { tape.detach(o3d) } else { o3d };
    let s2d = tape.softmax(a)?;
    let s3d = tape.softmax(b)?;
    let mse = tape.mse(s2d, s3d)?;
    let heads = tape.add(l2d, l3d)?;
    let weighted = tape.scale(mse, lambda);
    let total = tape.add(heads, weighted)?;
    Ok(LossTerms {
        total,
        l2d: tape.value(l2d).item()?,
        l3d: tape.value(l3d).item()?,
        mse: tape.value(mse).item()?,
        total_value: tape.value(total).item()?,
    })
}
