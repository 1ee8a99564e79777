//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during one forward pass.
//! [`Tape::backward`] consumes the tape, walks the recorded nodes in reverse
//! order exactly once and returns the gradients of every leaf.

mod conv;
pub(crate) mod gemm;
pub mod gradcheck;
mod loss;
mod norm;
mod pool;

pub use conv::ConvGeometry;
pub(crate) use loss::softmax_row;
pub use norm::{BatchNormMode, BatchStats};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    Reshape(Var),
    Relu(Var),
    Dense { input: Var, weight: Var, bias: Var },
    Conv { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    BatchNorm(norm::BatchNormSaved),
    AvgPool { input: Var, kernel: usize },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    BinaryCrossEntropy { logits: Var, targets: Vec<usize>, sigmoid: Vec<f64> },
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, so every node's inputs precede it.
/// A tape is single-use: build, call [`Tape::backward`] once, discard.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    track_kinks: bool,
    kinks: u64,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, if it was reached.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that fingerprints every ReLU sign pattern and max-pool switch,
    /// so finite-difference probes can detect when they cross a kink.
    pub fn with_kink_tracking() -> Self {
        Self { nodes: Vec::new(), track_kinks: true, kinks: 0xcbf2_9ce4_8422_2325 }
    }

    pub fn kink_fingerprint(&self) -> u64 {
        self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn fold_kinks(&mut self, bits: impl Iterator<Item = u64>) {
        if self.track_kinks {
            for b in bits {
                self.kinks = (self.kinks ^ b).wrapping_mul(FNV_PRIME);
            }
        }
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: &Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, true)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.push(value.detached(), Op::Constant, false)
    }

    /// Copies `var`'s value as a constant, cutting the gradient path.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.detached();
        self.push(value, Op::Constant, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!("add of shapes {:?} and {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `sum(x * weights)` for a fixed weight vector.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != weights.len() {
            return Err(Error::Dimension(format!("weighted_sum: {} weights for {} values", weights.len(), vx.numel())));
        }
        let s = vx.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).detached().reshape(shape.to_vec())?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Elementwise `max(0, x)`; the derivative at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data: Vec<f64> = vx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        if self.track_kinks {
            let signs: Vec<u64> = self.value(x).data().iter().map(|&v| u64::from(v > 0.0)).collect();
            self.fold_kinks(signs.into_iter());
        }
        let rg = self.needs_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Affine map `input · weightᵀ + bias` for `input [N, F]`, `weight [G, F]`, `bias [G]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(input), self.value(weight), self.value(bias));
        if vx.rank() != 2 || vw.rank() != 2 || vb.rank() != 1 {
            return Err(Error::Dimension(format!(
                "dense expects [N,F], [G,F], [G]; got {:?}, {:?}, {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let (n, f) = (vx.shape()[0], vx.shape()[1]);
        let g = vw.shape()[0];
        if vw.shape()[1] != f || vb.shape()[0] != g {
            return Err(Error::Dimension(format!(
                "dense feature mismatch: input {:?}, weight {:?}, bias {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let mut out = Vec::with_capacity(n * g);
        for _ in 0..n {
            out.extend_from_slice(vb.data());
        }
        gemm::gemm(
            1.0,
            gemm::MatRef { data: vx.data(), rows: n, cols: f, rs: f, cs: 1 },
            gemm::MatRef { data: vw.data(), rows: f, cols: g, rs: 1, cs: f },
            1.0,
            gemm::MatMut { data: &mut out, rows: n, cols: g, rs: g, cs: 1 },
        );
        let value = Tensor::new(vec![n, g], out)?;
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Dense { input, weight, bias }, rg))
    }

    /// Runs reverse accumulation from a scalar `loss` and returns leaf gradients.
    ///
    /// A tensor used more than once receives the sum of its per-use gradients.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!("backward from a non-scalar of shape {:?}", self.shape(loss))));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut leaf_grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut sink = GradSink { nodes: &nodes, grads: &mut grads };
            match &node.op {
                Op::Leaf => leaf_grads[idx] = Some(g),
                Op::Constant => {}
                Op::Add(a, b) => {
                    sink.add(*a, || g.clone());
                    sink.add(*b, || g.clone());
                }
                Op::Scale(x, f) => sink.add(*x, || g.iter().map(|v| v * f).collect()),
                Op::Sum(x) => {
                    let n = nodes[x.0].value.numel();
                    sink.add(*x, || vec![g[0]; n]);
                }
                Op::WeightedSum(x, w) => sink.add(*x, || w.iter().map(|v| v * g[0]).collect()),
                Op::Reshape(x) => sink.add(*x, || g.clone()),
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    sink.add(*x, || g.iter().zip(xv).map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 }).collect());
                }
                Op::Dense { input, weight, bias } => {
                    dense_backward(&mut sink, *input, *weight, *bias, &g);
                }
                Op::Conv { input, weight, bias, geom } => {
                    conv::backward(&mut sink, *input, *weight, *bias, geom, &g);
                }
                Op::BatchNorm(saved) => norm::backward(&mut sink, saved, &g),
                Op::AvgPool { input, kernel } => pool::avg_backward(&mut sink, *input, *kernel, &g),
                Op::MaxPool2d { input, argmax } => {
                    let n = nodes[input.0].value.numel();
                    sink.add(*input, || {
                        let mut dx = vec![0.0; n];
                        for (gi, &src) in g.iter().zip(argmax) {
                            dx[src] += gi;
                        }
                        dx
                    });
                }
                Op::GlobalAvgPool(x) => pool::global_avg_backward(&mut sink, *x, &g),
                Op::Softmax(x) => loss::softmax_backward(&mut sink, *x, &node.value, &g),
                Op::CrossEntropy { logits, targets, probs } => {
                    loss::cross_entropy_backward(&mut sink, *logits, targets, probs, g[0]);
                }
                Op::BinaryCrossEntropy { logits, targets, sigmoid } => {
                    loss::bce_backward(&mut sink, *logits, targets, sigmoid, g[0]);
                }
                Op::Mse(a, b) => loss::mse_backward(&mut sink, *a, *b, g[0]),
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Accumulates input gradients during the reverse sweep.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> GradSink<'a> {
    pub(crate) fn value(&self, var: Var) -> &'a Tensor {
        &self.nodes[var.0].value
    }

    pub(crate) fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Adds the gradient produced by `make` into `var`'s slot. `make` is only
    /// evaluated if `var` needs a gradient.
    pub(crate) fn add(&mut self, var: Var, make: impl FnOnce() -> Vec<f64>) {
        if !self.wants(var) {
            return;
        }
        let g = make();
        match &mut self.grads[var.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

fn dense_backward(sink: &mut GradSink<'_>, input: Var, weight: Var, bias: Var, g: &[f64]) {
    let vx = sink.value(input).data();
    let vw = sink.value(weight).data();
    let (n, f) = (sink.value(input).shape()[0], sink.value(input).shape()[1]);
    let gdim = sink.value(weight).shape()[0];
    sink.add(input, || {
        let mut dx = vec![0.0; n * f];
        gemm::gemm(
            1.0,
            gemm::MatRef { data: g, rows: n, cols: gdim, rs: gdim, cs: 1 },
            gemm::MatRef { data: vw, rows: gdim, cols: f, rs: f, cs: 1 },
            0.0,
            gemm::MatMut { data: &mut dx, rows: n, cols: f, rs: f, cs: 1 },
        );
        dx
    });
    sink.add(weight, || {
        let mut dw = vec![0.0; gdim * f];
        gemm::gemm(
            1.0,
            gemm::MatRef { data: g, rows: gdim, cols: n, rs: 1, cs: gdim },
            gemm::MatRef { data: vx, rows: n, cols: f, rs: f, cs: 1 },
            0.0,
            gemm::MatMut { data: &mut dw, rows: gdim, cols: f, rs: f, cs: 1 },
        );
        dw
    });
    sink.add(bias, || {
        let mut db = vec![0.0; gdim];
        for row in g.chunks_exact(gdim) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        db
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 7.0, -1.0]));
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_tensor_accumulates() {
        // loss = sum(x + x) => grad 2
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0; 3]);
    }

    #[test]
    fn relu_values_and_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_identity_and_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(&eye);
        let b = tape.leaf(&Tensor::zeros(&[3]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[1, 256], 0.1));
        let w = tape.leaf(&Tensor::full(&[512, 256], 0.01));
        let b = tape.leaf(&Tensor::zeros(&[512]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 512]);
        let bad = tape.leaf(&Tensor::zeros(&[512, 255]));
        assert!(matches!(tape.dense(x, bad, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let c = tape.detach(x);
        let y = tape.add(x, c).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0]);
        assert!(grads.get(c).is_none());
    }
}
