//! Netpbm grayscale (PGM, `P2`/`P5`) and color (PPM, `P3`/`P6`) images.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

struct Header {
    binary: bool,
    channels: usize,
    width: usize,
    height: usize,
    maxval: u32,
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
            self.pos += 1;
        }
        (self.pos > start).then(|| std::str::from_utf8(&self.bytes[start..self.pos]).ok())?
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.token().and_then(|t| t.parse().ok()).ok_or_else(|| Error::Format(format!("bad or missing {what}")))
    }
}

fn header(c: &mut Cursor<'_>) -> Result<Header> {
    let (binary, channels) = match c.token() {
        Some("P2") => (false, 1),
        Some("P5") => (true, 1),
        Some("P3") => (false, 3),
        Some("P6") => (true, 3),
        other => return Err(Error::Format(format!("not a PGM/PPM file (magic {other:?})"))),
    };
    let width = c.number("width")? as usize;
    let height = c.number("height")? as usize;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("invalid header {width}x{height} maxval {maxval}")));
    }
    Ok(Header { binary, channels, width, height, maxval })
}

/// Decodes a PGM or PPM byte buffer, scaling samples by `1 / maxval`.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut c = Cursor { bytes, pos: 0 };
    let h = header(&mut c)?;
    let n = h.channels * h.width * h.height;
    let mut interleaved = Vec::with_capacity(n);
    if h.binary {
        // Exactly one whitespace byte separates the header from the raster.
        let start = c.pos + 1;
        let wide = h.maxval > 255;
        let need = n * if wide { 2 } else { 1 };
        let raster = bytes
            .get(start..start + need)
            .ok_or_else(|| Error::Format(format!("raster truncated: need {need} bytes")))?;
        if wide {
            interleaved.extend(raster.chunks_exact(2).map(|p| u16::from_be_bytes([p[0], p[1]]) as u32));
        } else {
            interleaved.extend(raster.iter().map(|&b| b as u32));
        }
    } else {
        for _ in 0..n {
            interleaved.push(c.number("sample")?);
        }
    }
    if let Some(&v) = interleaved.iter().find(|&&v| v > h.maxval) {
        return Err(Error::Format(format!("sample {v} exceeds maxval {}", h.maxval)));
    }
    let scale = 1.0 / h.maxval as f64;
    let plane = h.width * h.height;
    let mut pixels = vec![0.0; n];
    for (i, v) in interleaved.into_iter().enumerate() {
        let (pos, ch) = (i / h.channels, i % h.channels);
        pixels[ch * plane + pos] = v as f64 * scale;
    }
    Image::new(h.channels, h.height, h.width, pixels)
}

pub fn read(path: &Path) -> Result<Image> {
    decode(&fs::read(path)?)
}

/// Encodes as binary 8-bit PGM (1 channel) or PPM (3 channels).
pub fn encode(img: &Image) -> Vec<u8> {
    let (c, h, w) = img.dims();
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for pos in 0..plane {
        for ch in 0..c {
            let v = img.pixels()[ch * plane + pos];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(img))?;
    Ok(())
}

/// File extension matching [`encode`]'s output for `img`.
pub fn extension(img: &Image) -> &'static str {
    if img.channels() == 1 {
        "pgm"
    } else {
        "ppm"
    }
}
