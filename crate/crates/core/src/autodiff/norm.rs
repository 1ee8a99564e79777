//! Batch normalization over `[N, C, ...]` layouts.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which statistics normalize the input.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with externally held running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of a training-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the estimate folded into running statistics.
    pub var_unbiased: Vec<f64>,
}

impl BatchStats {
    /// Exponential moving average: `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&self, mean: &mut [f64], var: &mut [f64], momentum: f64) {
        for (r, b) in mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in var.iter_mut().zip(&self.var_unbiased) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

pub(crate) struct BatchNormSaved {
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
    channels: usize,
    spatial: usize,
}

impl Tape {
    /// Batch normalization for 2D (`[N,C,H,W]`) or 3D (`[N,C,D,H,W]`) layouts,
    /// differentiable in the input, `gamma` and `beta`.
    ///
    /// In training mode the batch statistics are returned so the caller can fold
    /// them into its running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension(format!("batch_norm on shape {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "batch_norm parameters {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let x = self.value(input).data();
        let count = n * spatial;
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateVariance);
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, plane) in x.chunks_exact(spatial).enumerate() {
                    mean[i % c] += plane.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for (i, plane) in x.chunks_exact(spatial).enumerate() {
                    let m = mean[i % c];
                    var[i % c] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
                let stats = BatchStats { mean: mean.clone(), var_unbiased: unbiased };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension(format!(
                        "running statistics of length {}/{} for {c} channels",
                        mean.len(),
                        var.len()
                    )));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (i, (plane, (xh, o))) in
            x.chunks_exact(spatial).zip(xhat.chunks_exact_mut(spatial).zip(out.chunks_exact_mut(spatial))).enumerate()
        {
            let ch = i % c;
            for ((v, xh), o) in plane.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *xh = (v - mean[ch]) * inv_std[ch];
                *o = g[ch] * *xh + b[ch];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.needs_grad(&[input, gamma, beta]);
        let saved =
            BatchNormSaved { input, gamma, beta, xhat, inv_std, batch_stats: stats.is_some(), channels: c, spatial };
        Ok((self.push(value, Op::BatchNorm(saved), rg), stats))
    }
}

pub(super) fn backward(sink: &mut GradSink<'_>, s: &BatchNormSaved, g: &[f64]) {
    let c = s.channels;
    let gamma = sink.value(s.gamma).data();
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    for (i, (gp, xp)) in g.chunks_exact(s.spatial).zip(s.xhat.chunks_exact(s.spatial)).enumerate() {
        let ch = i % c;
        dbeta[ch] += gp.iter().sum::<f64>();
        dgamma[ch] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
    }
    sink.add(s.input, || {
        let count = (g.len() / c) as f64;
        let mut dx = vec![0.0; g.len()];
        for (i, ((dp, gp), xp)) in dx
            .chunks_exact_mut(s.spatial)
            .zip(g.chunks_exact(s.spatial))
            .zip(s.xhat.chunks_exact(s.spatial))
            .enumerate()
        {
            let ch = i % c;
            let k = gamma[ch] * s.inv_std[ch];
            if s.batch_stats {
                let (sb, sg) = (dbeta[ch] / count, dgamma[ch] / count);
                for ((d, gi), xh) in dp.iter_mut().zip(gp).zip(xp) {
                    *d = k * (gi - sb - xh * sg);
                }
            } else {
                for (d, gi) in dp.iter_mut().zip(gp) {
                    *d = k * gi;
                }
            }
        }
        dx
    });
    sink.add(s.gamma, || dgamma);
    sink.add(s.beta, || dbeta);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_input_passes_through() {
        // [N=2, C=2, S=2]; both channels hold {1, -1, -1, 1}: mean 0, variance 1.
        let data = vec![1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0];
        let x = Tensor::new(vec![2, 2, 2], data.clone()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let g = tape.leaf(&Tensor::full(&[2], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[2]));
        let (y, stats) = tape.batch_norm(xv, g, b, BatchNormMode::Train, 1e-12).unwrap();
        assert_eq!(stats.unwrap().mean, vec![0.0, 0.0]);
        for (a, b) in tape.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = Tensor::new(vec![3, 1, 2, 2], (0..12).map(|v| v as f64 * 0.37).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let g = tape.leaf(&Tensor::zeros(&[1]));
        let b = tape.leaf(&Tensor::full(&[1], 5.0));
        let (y, _) = tape.batch_norm(xv, g, b, BatchNormMode::Train, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn single_value_per_channel_is_degenerate() {
        let mut tape = Tape::new();
        let xv = tape.constant(&Tensor::zeros(&[1, 4, 1, 1]));
        let g = tape.leaf(&Tensor::full(&[4], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[4]));
        assert!(matches!(tape.batch_norm(xv, g, b, BatchNormMode::Train, 1e-5), Err(Error::DegenerateVariance)));
        let (m, v) = (vec![0.0; 4], vec![1.0; 4]);
        assert!(tape.batch_norm(xv, g, b, BatchNormMode::Eval { mean: &m, var: &v }, 1e-5).is_ok());
    }

    #[test]
    fn running_update_is_ema() {
        let stats = BatchStats { mean: vec![1.0], var_unbiased: vec![3.0] };
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        stats.update_running(&mut m, &mut v, 0.1);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 1.2).abs() < 1e-15);
    }
}
