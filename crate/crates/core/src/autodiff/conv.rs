//! Zero-padded 2D/3D convolution via im2col and GEMM.
//!
//! A 2D convolution is handled as a 3D one with unit depth, unit depth
//! kernel and no depth padding.

use super::gemm::{gemm, MatMut, MatRef};
use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape bookkeeping for one convolution call. Spatial triples are `[d, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
    /// Rank of the user-facing tensors (4 or 5).
    pub rank: usize,
}

impl ConvGeometry {
    /// `floor((n + 2p - k) / s) + 1`, or `None` if the padded extent is smaller than the kernel.
    pub fn output_extent(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        (n + 2 * p).checked_sub(k).map(|span| span / s + 1)
    }

    fn columns(&self) -> usize {
        self.output.iter().product()
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn output_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.batch, self.out_channels];
        if self.rank == 5 {
            shape.push(self.output[0]);
        }
        shape.extend_from_slice(&self.output[1..]);
        shape
    }

    fn build(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let rank = input.len();
        if !(rank == 4 || rank == 5) || weight.len() != rank {
            return Err(Error::Dimension(format!(
                "convolution expects matching rank-4 or rank-5 input and weight, got {input:?} and {weight:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("convolution stride must be at least 1".into()));
        }
        if input[1] != weight[1] {
            return Err(Error::Dimension(format!("input has {} channels but weight expects {}", input[1], weight[1])));
        }
        let (spatial, kernel, strides, pads) = if rank == 4 {
            ([1, input[2], input[3]], [1, weight[2], weight[3]], [1, stride, stride], [0, padding, padding])
        } else {
            ([input[2], input[3], input[4]], [weight[2], weight[3], weight[4]], [stride; 3], [padding; 3])
        };
        let mut output = [0; 3];
        for i in 0..3 {
            output[i] = Self::output_extent(spatial[i], kernel[i], strides[i], pads[i]).ok_or_else(|| {
                Error::Dimension(format!("kernel {kernel:?} larger than padded input {spatial:?} (padding {padding})"))
            })?;
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            out_channels: weight[0],
            input: spatial,
            kernel,
            stride: strides,
            padding: pads,
            output,
            rank,
        })
    }
}

/// Output indices `o` in `[lo, hi)` for which `o*s + k - p` lands inside `[0, n)`.
fn valid_range(out: usize, n: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    let hi = if n + p > k { ((n + p - k - 1) / s + 1).min(out) } else { 0 };
    (lo.min(out), hi.max(lo.min(out)))
}

/// Output positions per im2col tile are chosen so a tile stays near this
/// many `f64`s, keeping it cache resident during the GEMM.
const TILE_ELEMS: usize = 1 << 17;

impl ConvGeometry {
    /// Output rows (flattened `(od, oh)` pairs) per tile.
    fn tile_rows(&self) -> usize {
        let [od, oh, ow] = self.output;
        (TILE_ELEMS / (self.patch() * ow)).clamp(1, od * oh)
    }
}

/// Unfolds output rows `r0..r1` (flattened `(od, oh)` index) of one sample
/// `[C, D, H, W]` into `col [K, T]` with `K = C*kd*kh*kw` and
/// `T = (r1 - r0) * Wo`.
fn im2col(x: &[f64], g: &ConvGeometry, r0: usize, r1: usize, col: &mut [f64]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [_, oh, ow] = g.output;
    let t = (r1 - r0) * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let (zw_lo, zw_hi) = valid_range(ow, w, e, sw, pw);
                    let dst = &mut col[row * t..(row + 1) * t];
                    row += 1;
                    for (r, out) in (r0..r1).zip(dst.chunks_exact_mut(ow)) {
                        let (id, ih) = ((r / oh) * sd + a, (r % oh) * sh + b);
                        if id < pd || id - pd >= d || ih < ph || ih - ph >= h || zw_lo == zw_hi {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &xc[((id - pd) * h + ih - ph) * w..((id - pd) * h + ih - ph + 1) * w];
                        out[..zw_lo].fill(0.0);
                        out[zw_hi..].fill(0.0);
                        if sw == 1 {
                            let from = zw_lo + e - pw;
                            out[zw_lo..zw_hi].copy_from_slice(&src[from..from + (zw_hi - zw_lo)]);
                        } else {
                            for zw in zw_lo..zw_hi {
                                out[zw] = src[zw * sw + e - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col [K, T]` back into one sample, accumulating.
fn col2im(col: &[f64], g: &ConvGeometry, r0: usize, r1: usize, x: &mut [f64]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [_, oh, ow] = g.output;
    let t = (r1 - r0) * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let (zw_lo, zw_hi) = valid_range(ow, w, e, sw, pw);
                    let src = &col[row * t..(row + 1) * t];
                    row += 1;
                    for (r, from) in (r0..r1).zip(src.chunks_exact(ow)) {
                        let (id, ih) = ((r / oh) * sd + a, (r % oh) * sh + b);
                        if id < pd || id - pd >= d || ih < ph || ih - ph >= h {
                            continue;
                        }
                        let dst = &mut xc[((id - pd) * h + ih - ph) * w..((id - pd) * h + ih - ph + 1) * w];
                        if sw == 1 {
                            let to = &mut dst[zw_lo + e - pw..zw_hi + e - pw];
                            for (d, f) in to.iter_mut().zip(&from[zw_lo..zw_hi]) {
                                *d += f;
                            }
                        } else {
                            for zw in zw_lo..zw_hi {
                                dst[zw * sw + e - pw] += from[zw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Tiles `(r0, r1)` covering all output rows.
fn tiles(g: &ConvGeometry) -> impl Iterator<Item = (usize, usize)> {
    let rows = g.output[0] * g.output[1];
    let step = g.tile_rows();
    (0..rows).step_by(step).map(move |r0| (r0, (r0 + step).min(rows)))
}

fn forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (s, k, o, ow) = (g.columns(), g.patch(), g.out_channels, g.output[2]);
    let in_stride = g.in_channels * g.input_volume();
    let mut out = vec![0.0; g.batch * o * s];
    let mut col = vec![0.0; k * g.tile_rows() * ow];
    for n in 0..g.batch {
        let xn = &x[n * in_stride..(n + 1) * in_stride];
        let out_n = &mut out[n * o * s..(n + 1) * o * s];
        if let Some(b) = bias {
            for (ch, plane) in out_n.chunks_exact_mut(s).enumerate() {
                plane.fill(b[ch]);
            }
        }
        for (r0, r1) in tiles(g) {
            let t = (r1 - r0) * ow;
            im2col(xn, g, r0, r1, &mut col);
            // out_n[:, tile] viewed as [T, O] = colᵀ [T, K] · weightᵀ [K, O]
            gemm(
                1.0,
                MatRef { data: &col, rows: t, cols: k, rs: 1, cs: t },
                MatRef { data: weight, rows: k, cols: o, rs: 1, cs: k },
                if bias.is_some() { 1.0 } else { 0.0 },
                MatMut { data: &mut out_n[r0 * ow..], rows: t, cols: o, rs: 1, cs: s },
            );
        }
    }
    out
}

pub(super) fn backward(
    sink: &mut GradSink<'_>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    g: &ConvGeometry,
    grad_out: &[f64],
) {
    let (s, k, o) = (g.columns(), g.patch(), g.out_channels);
    let x = sink.value(input).data();
    let w = sink.value(weight).data();
    let in_stride = g.in_channels * g.input_volume();

    if let Some(b) = bias {
        sink.add(b, || {
            let mut db = vec![0.0; o];
            for sample in grad_out.chunks_exact(o * s) {
                for (ch, plane) in sample.chunks_exact(s).enumerate() {
                    db[ch] += plane.iter().sum::<f64>();
                }
            }
            db
        });
    }

    let want_w = sink.wants(weight);
    let want_x = sink.wants(input);
    let mut dw = if want_w { vec![0.0; o * k] } else { Vec::new() };
    let mut dx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
    let ow = g.output[2];
    let mut col = vec![0.0; k * g.tile_rows() * ow];
    for n in 0..g.batch {
        let go_n = &grad_out[n * o * s..(n + 1) * o * s];
        for (r0, r1) in tiles(g) {
            let t = (r1 - r0) * ow;
            let go = &go_n[r0 * ow..];
            if want_w {
                im2col(&x[n * in_stride..(n + 1) * in_stride], g, r0, r1, &mut col);
                // dWᵀ [K, O] += col [K, T] · goᵀ [T, O]
                gemm(
                    1.0,
                    MatRef { data: &col, rows: k, cols: t, rs: t, cs: 1 },
                    MatRef { data: go, rows: t, cols: o, rs: 1, cs: s },
                    1.0,
                    MatMut { data: &mut dw, rows: k, cols: o, rs: 1, cs: k },
                );
            }
            if want_x {
                // dcolᵀ [T, K] = goᵀ [T, O] · W [O, K]
                gemm(
                    1.0,
                    MatRef { data: go, rows: t, cols: o, rs: 1, cs: s },
                    MatRef { data: w, rows: o, cols: k, rs: k, cs: 1 },
                    0.0,
                    MatMut { data: &mut col, rows: t, cols: k, rs: 1, cs: t },
                );
                col2im(&col, g, r0, r1, &mut dx[n * in_stride..(n + 1) * in_stride]);
            }
        }
    }
    if want_w {
        sink.add(weight, || dw);
    }
    if want_x {
        sink.add(input, || dx);
    }
}

impl Tape {
    /// 2D convolution: input `[N, C, H, W]`, weight `[O, C, kh, kw]`, bias `[O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        if self.value(input).rank() != 4 {
            return Err(Error::Dimension(format!("conv2d expects [N,C,H,W], got {:?}", self.shape(input))));
        }
        self.conv(input, weight, bias, stride, padding)
    }

    /// 3D convolution: input `[N, C, D, H, W]`, weight `[O, C, kd, kh, kw]`, bias `[O]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        if self.value(input).rank() != 5 {
            return Err(Error::Dimension(format!("conv3d expects [N,C,D,H,W], got {:?}", self.shape(input))));
        }
        self.conv(input, weight, bias, stride, padding)
    }

    fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::build(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::Dimension(format!(
                    "bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    geom.out_channels
                )));
            }
        }
        let out =
            forward(self.value(input).data(), self.value(weight).data(), bias.map(|b| self.value(b).data()), &geom);
        let value = Tensor::new(geom.output_shape(), out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs_grad(&deps);
        Ok(self.push(value, Op::Conv { input, weight, bias, geom }, rg))
    }
}
