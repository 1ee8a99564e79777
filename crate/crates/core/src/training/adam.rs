use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};

/// One bias-corrected Adam update of `theta` in place. `t` is the step
/// number after incrementing (first step is 1).
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
) {
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam moments keyed by parameter name, plus the shared step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: HashMap::new() }
    }
}

/// Gradients for some parameters of one store.
pub type GradGroup<'a> = (&'a mut ParamStore, Vec<(ParamId, Vec<f64>)>);

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one step to every parameter in `groups`. A non-finite
    /// gradient aborts before anything is modified.
    pub fn step(&mut self, lr: f64, groups: &mut [GradGroup<'_>]) -> Result<()> {
        for (store, grads) in groups.iter() {
            for (id, g) in grads {
                let p = store.get(*id);
                if g.len() != p.value.numel() {
                    return Err(Error::Dimension(format!(
                        "gradient of {} has {} entries, parameter has {}",
                        p.name,
                        g.len(),
                        p.value.numel()
                    )));
                }
                if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(format!("{} (value {bad})", p.name)));
                }
            }
        }
        self.t += 1;
        let coeffs = (self.beta1, self.beta2, self.eps);
        for (store, grads) in groups.iter_mut() {
            for (id, g) in grads.iter() {
                let name = store.get(*id).name.clone();
                let n = g.len();
                let mo = self.moments.entry(name).or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
                adam_update(store.value_mut(*id).data_mut(), g, &mut mo.m, &mut mo.v, self.t, lr, coeffs);
            }
        }
        Ok(())
    }
}
