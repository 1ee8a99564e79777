//! Pixel-level augmentation and perturbation kernels.
//!
//! Every kernel returns a new image with pixels in `[0, 1]`. Parameters are
//! validated by [`super::AugSpec::validate`]; the kernels themselves assume
//! valid input.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use super::Stream;
use crate::image::Image;

/// Normalized 1D Gaussian weights over `[-r, r]`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable convolution of one `h x w` plane with border replication.
pub(crate) fn blur_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] =
                kernel.iter().enumerate().map(|(k, wk)| wk * row[clampi(x as isize + k as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                kernel.iter().enumerate().map(|(k, wk)| wk * tmp[clampi(y as isize + k as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Bilinear sample of a plane at `(y, x)` with border replication.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    // Lerp form keeps constant regions exactly constant.
    let top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
    let bottom = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
    top + fy * (bottom - top)
}

/// Smoothed random displacement warp. Draw order: the x-displacement field,
/// then the y-displacement field, each row-major from `U[-1, 1)`.
pub fn elastic_deform(img: &Image, alpha: f64, sigma: f64, rng: &mut Stream) -> Image {
    let (c, h, w) = img.dims();
    let field = |rng: &mut Stream| {
        let raw: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        blur_plane(&raw, h, w, &gaussian_kernel(sigma))
    };
    let dx = field(rng);
    let dy = field(rng);
    if alpha == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for ch in 0..c {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                dst[i] = bilinear(src, h, w, y as f64 + alpha * dy[i], x as f64 + alpha * dx[i]);
            }
        }
    }
    out.clamp_unit();
    out
}

pub fn invert(img: &Image) -> Image {
    img.map(|v| 1.0 - v)
}

/// Unsharp masking against a 3x3 box blur (border pixels use themselves as
/// the blur). Written as `img + (factor - 1)(img - blurred)` so factor 1 is
/// an exact identity.
pub fn sharpness(img: &Image, factor: f64) -> Image {
    let (c, h, w) = img.dims();
    let mut out = img.clone();
    for ch in 0..c {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let centre = src[y * w + x];
                let mut offset = 0.0;
                for yy in y - 1..=y + 1 {
                    for xx in x - 1..=x + 1 {
                        offset += src[yy * w + xx] - centre;
                    }
                }
                let blurred = centre + offset / 9.0;
                dst[y * w + x] = centre + (factor - 1.0) * (centre - blurred);
            }
        }
    }
    out.clamp_unit();
    out
}

/// Sets `round(amount * H * W)` distinct positions to 0 or 1 in every channel.
pub fn salt_pepper(img: &Image, amount: f64, rng: &mut Stream) -> Image {
    let (c, h, w) = img.dims();
    let count = ((amount * (h * w) as f64).round() as usize).min(h * w);
    let mut out = img.clone();
    for pos in index::sample(rng, h * w, count).into_vec() {
        let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
        for ch in 0..c {
            out.plane_mut(ch)[pos] = v;
        }
    }
    out
}

pub fn brightness(img: &Image, delta: f64) -> Image {
    img.map(|v| (v + delta).clamp(0.0, 1.0))
}

/// Blend toward mid-gray: `(1 - p) * v + p / 2`.
pub fn contrast(img: &Image, p: f64) -> Image {
    img.map(|v| ((1.0 - p) * v + p * 0.5).clamp(0.0, 1.0))
}

/// Random brightness shift then contrast scaling about the image mean, both
/// drawn from `U[-strength, strength]` (brightness first).
pub fn color_jitter(img: &Image, strength: f64, rng: &mut Stream) -> Image {
    let b = strength * (2.0 * rng.random::<f64>() - 1.0);
    let c = strength * (2.0 * rng.random::<f64>() - 1.0);
    let shifted = brightness(img, b);
    let mean = shifted.mean();
    shifted.map(|v| (v + c * (v - mean)).clamp(0.0, 1.0))
}

pub fn gaussian_noise(img: &Image, sigma: f64, rng: &mut Stream) -> Image {
    let mut out = img.clone();
    for v in out.pixels_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v + sigma * z).clamp(0.0, 1.0);
    }
    out
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let (c, h, w) = img.dims();
    let kernel = gaussian_kernel(sigma);
    let mut out = img.clone();
    for ch in 0..c {
        let blurred = blur_plane(img.plane(ch), h, w, &kernel);
        out.plane_mut(ch).copy_from_slice(&blurred);
    }
    out.clamp_unit();
    out
}

/// Side of the square covering `area_fraction` of the shorter axis squared.
pub fn occlusion_side(h: usize, w: usize, area_fraction: f64) -> usize {
    let m = h.min(w);
    ((area_fraction.sqrt() * m as f64).round() as usize).min(m)
}

/// Zeroes a square block placed uniformly at random fully inside the image.
pub fn occlude(img: &Image, area_fraction: f64, rng: &mut Stream) -> Image {
    let (c, h, w) = img.dims();
    let side = occlusion_side(h, w, area_fraction);
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    let mut out = img.clone();
    for ch in 0..c {
        let plane = out.plane_mut(ch);
        for y in top..top + side {
            plane[y * w + left..y * w + left + side].fill(0.0);
        }
    }
    out
}
