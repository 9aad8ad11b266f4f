//! Binary PPM (P6, 8-bit) export and import for rendered images.
//!
//! Images are planar `[C × H × W]` vectors in `[0, 1]`; PPM stores them
//! interleaved. Only three-channel images with maxval 255 are written; the
//! reader accepts any maxval in `1..=255`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::world::ImageShape;

/// Dimension cap on read, so a hostile header cannot request a huge buffer.
const MAX_SIDE: usize = 1 << 14;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(format!("ppm: {}", msg.into()))
}

/// Quantize a planar image to 8 bits and wrap it in a P6 header.
pub fn encode_ppm(shape: ImageShape, image: &[f64]) -> Result<Vec<u8>> {
    let [c, h, w] = shape.dims();
    if c != 3 {
        return Err(Error::Invalid(format!("ppm needs 3 channels, got {c}")));
    }
    if image.len() != shape.numel() {
        return Err(Error::Shape(format!("image has {} values, shape needs {}", image.len(), shape.numel())));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ppm export".into()));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(image.len());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(to_byte(image[(ch * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

/// `round(clamp(v, 0, 1) · 255)`.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parse a P6 file into its shape and a planar image in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(ImageShape, Vec<f64>)> {
    let mut pos = 0;
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(corrupt("missing P6 magic"));
    }
    pos += 2;
    let w = header_field(bytes, &mut pos)?;
    let h = header_field(bytes, &mut pos)?;
    let maxval = header_field(bytes, &mut pos)?;
    if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
        return Err(corrupt(format!("unsupported size {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(corrupt(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(corrupt("missing separator before raster")),
    }
    let n = 3 * w * h;
    let raster = &bytes[pos..];
    if raster.len() < n {
        return Err(corrupt(format!("raster has {} bytes, need {n}", raster.len())));
    }
    let mut image = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let b = raster[(y * w + x) * 3 + ch] as usize;
                if b > maxval {
                    return Err(corrupt(format!("sample {b} exceeds maxval {maxval}")));
                }
                image[(ch * h + y) * w + x] = b as f64 / maxval as f64;
            }
        }
    }
    Ok((ImageShape::new(3, h, w), image))
}

/// Skip whitespace and `#` comments, then read one decimal field.
fn header_field(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(corrupt("truncated header")),
        }
    }
    let start = *pos;
    let mut value: usize = 0;
    while let Some(&b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add((b - b'0') as usize))
            .filter(|v| *v <= 1 << 20)
            .ok_or_else(|| corrupt("header field too large"))?;
        *pos += 1;
    }
    if *pos == start {
        return Err(corrupt("expected a decimal header field"));
    }
    Ok(value)
}

pub fn write_ppm(path: &Path, shape: ImageShape, image: &[f64]) -> Result<()> {
    fs::write(path, encode_ppm(shape, image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(ImageShape, Vec<f64>)> {
    decode_ppm(&fs::read(path)?)
}
