//! Average, max and global average pooling.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Splits `[N, C, spatial...]` into `(N*C, spatial dims)` for rank 4 or 5.
fn planes(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match shape {
        [n, c, h, w] => Ok((n * c, [1, *h, *w])),
        [n, c, d, h, w] => Ok((n * c, [*d, *h, *w])),
        _ => Err(Error::Dimension(format!("pooling expects rank 4 or 5, got {shape:?}"))),
    }
}

fn pooled_dims(dims: [usize; 3], kernel: usize, rank: usize) -> [usize; 3] {
    let kd = if rank == 5 { kernel } else { 1 };
    [dims[0] / kd, dims[1] / kernel, dims[2] / kernel]
}

impl Tape {
    /// Non-overlapping average pooling with window and stride `kernel` over
    /// every spatial axis (including depth for 5D inputs). Extents are floored.
    pub fn avg_pool(&mut self, input: Var, kernel: usize) -> Result<Var> {
        if kernel == 0 {
            return Err(Error::Parameter("pooling kernel must be positive".into()));
        }
        let shape = self.shape(input).to_vec();
        let rank = shape.len();
        let (count, dims) = planes(&shape)?;
        let spatial_in = &shape[2..];
        if spatial_in.iter().any(|&e| e < kernel) {
            return Err(Error::Dimension(format!("pooling kernel {kernel} exceeds spatial extents {spatial_in:?}")));
        }
        let out_dims = pooled_dims(dims, kernel, rank);
        let kd = if rank == 5 { kernel } else { 1 };
        let window = (kd * kernel * kernel) as f64;
        let x = self.value(input).data();
        let in_plane: usize = dims.iter().product();
        let out_plane: usize = out_dims.iter().product();
        let mut out = vec![0.0; count * out_plane];
        for p in 0..count {
            let src = &x[p * in_plane..(p + 1) * in_plane];
            let dst = &mut out[p * out_plane..(p + 1) * out_plane];
            for od in 0..out_dims[0] {
                for oh in 0..out_dims[1] {
                    for ow in 0..out_dims[2] {
                        let mut acc = 0.0;
                        for a in 0..kd {
                            for b in 0..kernel {
                                let row = ((od * kd + a) * dims[1] + oh * kernel + b) * dims[2];
                                acc += src[row + ow * kernel..row + (ow + 1) * kernel].iter().sum::<f64>();
                            }
                        }
                        dst[(od * out_dims[1] + oh) * out_dims[2] + ow] = acc / window;
                    }
                }
            }
        }
        let mut out_shape = shape[..2].to_vec();
        if rank == 5 {
            out_shape.push(out_dims[0]);
        }
        out_shape.extend_from_slice(&out_dims[1..]);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, Op::AvgPool { input, kernel }, rg))
    }

    /// 2D max pooling over `[N, C, H, W]` with implicit `-inf` padding.
    /// Ties resolve to the first maximal element in scan order.
    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Parameter("max pooling kernel and stride must be positive".into()));
        }
        let shape = self.shape(input).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::Dimension(format!("max_pool2d expects [N,C,H,W], got {shape:?}")));
        };
        if padding * 2 > kernel {
            return Err(Error::Parameter("max pooling padding must be at most half the kernel".into()));
        }
        let extent = |e: usize| (e + 2 * padding).checked_sub(kernel).map(|s| s / stride + 1);
        let (Some(oh), Some(ow)) = (extent(h), extent(w)) else {
            return Err(Error::Dimension(format!("max pooling kernel {kernel} exceeds {shape:?}")));
        };
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for a in 0..kernel {
                        let y = (i * stride + a) as isize - padding as isize;
                        if y < 0 || y as usize >= h {
                            continue;
                        }
                        for b in 0..kernel {
                            let xx = (j * stride + b) as isize - padding as isize;
                            if xx < 0 || xx as usize >= w {
                                continue;
                            }
                            let idx = base + y as usize * w + xx as usize;
                            if x[idx] > best {
                                best = x[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        let switches: Vec<u64> = argmax.iter().map(|&a| a as u64).collect();
        self.fold_kinks(switches.into_iter());
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Global mean over all spatial positions: `[N, C, ...] -> [N, C, 1, ...]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 3 {
            return Err(Error::Dimension(format!("global pooling expects spatial axes, got {shape:?}")));
        }
        let spatial: usize = shape[2..].iter().product();
        let out: Vec<f64> =
            self.value(input).data().chunks_exact(spatial).map(|p| p.iter().sum::<f64>() / spatial as f64).collect();
        let mut out_shape = shape[..2].to_vec();
        out_shape.extend(std::iter::repeat_n(1, shape.len() - 2));
        let value = Tensor::new(out_shape, out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }
}

pub(super) fn avg_backward(sink: &mut GradSink<'_>, input: Var, kernel: usize, g: &[f64]) {
    let shape = sink.value(input).shape().to_vec();
    sink.add(input, || {
        let rank = shape.len();
        let (count, dims) = planes(&shape).expect("validated in forward");
        let out_dims = pooled_dims(dims, kernel, rank);
        let kd = if rank == 5 { kernel } else { 1 };
        let share = 1.0 / (kd * kernel * kernel) as f64;
        let in_plane: usize = dims.iter().product();
        let out_plane: usize = out_dims.iter().product();
        let mut dx = vec![0.0; count * in_plane];
        for p in 0..count {
            let gp = &g[p * out_plane..(p + 1) * out_plane];
            let dp = &mut dx[p * in_plane..(p + 1) * in_plane];
            for od in 0..out_dims[0] {
                for oh in 0..out_dims[1] {
                    for ow in 0..out_dims[2] {
                        let v = gp[(od * out_dims[1] + oh) * out_dims[2] + ow] * share;
                        for a in 0..kd {
                            for b in 0..kernel {
                                let row = ((od * kd + a) * dims[1] + oh * kernel + b) * dims[2];
                                dp[row + ow * kernel..row + (ow + 1) * kernel].iter_mut().for_each(|d| *d += v);
                            }
                        }
                    }
                }
            }
        }
        dx
    });
}

pub(super) fn global_avg_backward(sink: &mut GradSink<'_>, input: Var, g: &[f64]) {
    let numel = sink.value(input).numel();
    sink.add(input, || {
        let spatial = numel / g.len();
        let mut dx = Vec::with_capacity(numel);
        for gi in g {
            dx.extend(std::iter::repeat_n(gi / spatial as f64, spatial));
        }
        dx
    });
}
