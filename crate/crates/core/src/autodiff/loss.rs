//! Softmax and the scalar losses. Every loss is a mean over the batch.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn rows(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [n, k] => Ok((*n, *k)),
        _ => Err(Error::Dimension(format!("{what} expects [N, K], got {shape:?}"))),
    }
}

/// Max-subtracted softmax of one row, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// `log(sum(exp(row)))` with max subtraction.
fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_targets(targets: &[usize], n: usize, k: usize) -> Result<()> {
    if targets.len() != n {
        return Err(Error::Dimension(format!("{} targets for a batch of {n}", targets.len())));
    }
    match targets.iter().find(|&&t| t >= k) {
        Some(&t) => Err(Error::Index { index: t, bound: k }),
        None => Ok(()),
    }
}

/// `softplus(z) = ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// Row-wise softmax of `[N, K]` logits, `K >= 2`.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let (n, k) = rows(self.shape(logits), "softmax")?;
        if k < 2 {
            return Err(Error::Dimension("softmax needs at least two classes".into()));
        }
        let mut out = vec![0.0; n * k];
        for (row, o) in self.value(logits).data().chunks_exact(k).zip(out.chunks_exact_mut(k)) {
            softmax_row(row, o);
        }
        let value = Tensor::new(vec![n, k], out)?;
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(value, Op::Softmax(logits), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = rows(self.shape(logits), "cross_entropy")?;
        check_targets(targets, n, k)?;
        let x = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for ((row, p), &t) in x.chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(targets) {
            softmax_row(row, p);
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Binary cross-entropy with logits, for `[N, 1]` logits or two-class
    /// `[N, 2]` logits (where the logit is `x1 - x0`). Targets are 0 or 1.
    ///
    /// On `[N, 2]` inputs this equals [`Tape::cross_entropy`] analytically.
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = rows(self.shape(logits), "binary_cross_entropy")?;
        if k > 2 {
            return Err(Error::Config(format!("binary cross-entropy used on a {k}-class output")));
        }
        check_targets(targets, n, 2)?;
        let x = self.value(logits).data();
        let mut sig = Vec::with_capacity(n);
        let mut total = 0.0;
        for (row, &t) in x.chunks_exact(k).zip(targets) {
            let z = if k == 2 { row[1] - row[0] } else { row[0] };
            total += softplus(z) - t as f64 * z;
            sig.push(sigmoid(z));
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(value, Op::BinaryCrossEntropy { logits, targets: targets.to_vec(), sigmoid: sig }, rg))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!("mse of shapes {:?} and {:?}", va.shape(), vb.shape())));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / va.numel() as f64);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), rg))
    }
}

pub(super) fn softmax_backward(sink: &mut GradSink<'_>, x: Var, out: &Tensor, g: &[f64]) {
    let k = out.shape()[1];
    sink.add(x, || {
        let mut dx = vec![0.0; g.len()];
        for ((d, s), gr) in dx.chunks_exact_mut(k).zip(out.data().chunks_exact(k)).zip(g.chunks_exact(k)) {
            let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((di, si), gi) in d.iter_mut().zip(s).zip(gr) {
                *di = si * (gi - dot);
            }
        }
        dx
    });
}

pub(super) fn cross_entropy_backward(sink: &mut GradSink<'_>, logits: Var, targets: &[usize], probs: &[f64], g: f64) {
    let n = targets.len();
    let k = probs.len() / n;
    sink.add(logits, || {
        let scale = g / n as f64;
        let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
        for (i, &t) in targets.iter().enumerate() {
            dx[i * k + t] -= scale;
        }
        dx
    });
}

pub(super) fn bce_backward(sink: &mut GradSink<'_>, logits: Var, targets: &[usize], sig: &[f64], g: f64) {
    let n = targets.len();
    let k = sink.value(logits).shape()[1];
    sink.add(logits, || {
        let scale = g / n as f64;
        let mut dx = vec![0.0; n * k];
        for (i, (&t, &s)) in targets.iter().zip(sig).enumerate() {
            let dz = (s - t as f64) * scale;
            if k == 2 {
                dx[i * 2] = -dz;
                dx[i * 2 + 1] = dz;
            } else {
                dx[i] = dz;
            }
        }
        dx
    });
}

pub(super) fn mse_backward(sink: &mut GradSink<'_>, a: Var, b: Var, g: f64) {
    let va = sink.value(a).data();
    let vb = sink.value(b).data();
    let scale = 2.0 * g / va.len() as f64;
    sink.add(a, || va.iter().zip(vb).map(|(x, y)| scale * (x - y)).collect());
    sink.add(b, || va.iter().zip(vb).map(|(x, y)| scale * (y - x)).collect());
}
