//! Resizing and channel replication.

use crate::error::{Error, Result};
use crate::image::Image;

/// Source coordinate for output index `i` with half-pixel centres, clamped
/// to the valid range.
fn source(i: usize, in_len: usize, out_len: usize) -> f64 {
    let s = (i as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5;
    s.clamp(0.0, (in_len - 1) as f64)
}

/// Bilinear resize with half-pixel centres (no corner alignment).
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter(format!("cannot resize to {out_h}x{out_w}")));
    }
    let (c, h, w) = img.dims();
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| {
            let s = source(x, w, out_w);
            let x0 = s.floor() as usize;
            (x0, (x0 + 1).min(w - 1), s - x0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = img.plane(ch);
        for y in 0..out_h {
            let s = source(y, h, out_h);
            let y0 = s.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = s - y0 as f64;
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] + fx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
                let bottom = plane[y1 * w + x0] + fx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
                out.push((top + fy * (bottom - top)).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(c, out_h, out_w, out)
}

/// Copies a grayscale image into three identical channels; 3-channel input
/// is returned unchanged.
pub fn replicate_channels(img: &Image) -> Image {
    if img.channels() == 3 {
        return img.clone();
    }
    let mut px = Vec::with_capacity(3 * img.pixels().len());
    for _ in 0..3 {
        px.extend_from_slice(img.pixels());
    }
    Image::new(3, img.height(), img.width(), px).expect("three copies of a valid plane")
}
