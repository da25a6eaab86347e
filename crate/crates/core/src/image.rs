//! Image helpers shared by the pipeline.
//!
//! Images are `Tensor[3, H, W]` with values in `[0, 1]`. The 8-bit view maps
//! `v` to `round(255 v)`.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Luminance weights for RGB input.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Returns `(channels, height, width)` of a `[C, H, W]` image.
pub fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::Dim(format!("expected an image [C, H, W], got {s:?}"))),
    }
}

/// Grayscale plane of an image, row-major `H × W`. Color images use the
/// luminance weights; single-channel images pass through.
pub fn luminance(img: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = dims(img)?;
    let d = img.data();
    let n = h * w;
    match c {
        1 => Ok(d.to_vec()),
        3 => Ok((0..n).map(|i| LUMA[0] * d[i] + LUMA[1] * d[n + i] + LUMA[2] * d[2 * n + i]).collect()),
        _ => Err(Error::Dim(format!("luminance needs 1 or 3 channels, got {c}"))),
    }
}

/// Quantizes `[0, 1]` values to the 8-bit grid and back.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| to_u8(v) as f64 / 255.0)
}

pub fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Values scaled to the 8-bit range `[0, 255]` without rounding.
pub fn to_255(img: &Tensor) -> Tensor {
    img.map(|v| v * 255.0)
}

pub fn from_255(img: &Tensor) -> Tensor {
    img.map(|v| v / 255.0)
}

/// Encodes a `[3, H, W]` image as binary PPM (P6).
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = dims(img)?;
    if c != 3 {
        return Err(Error::Dim(format!("PPM needs 3 channels, got {c}")));
    }
    let d = img.data();
    let n = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * n);
    for i in 0..n {
        for ch in 0..3 {
            out.push(to_u8(d[ch * n + i]));
        }
    }
    Ok(out)
}

pub fn save_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

fn header_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Format("truncated PPM header".into()));
        }
        let b = byte[0];
        if b == b'#' {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(b as char);
    }
}

/// Decodes a binary PPM (P6, maxval 255) into a `[3, H, W]` image.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut r = BufReader::new(bytes);
    if header_token(&mut r)? != "P6" {
        return Err(Error::Format("not a P6 PPM".into()));
    }
    let parse = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field {s:?}")));
    let w = parse(header_token(&mut r)?)?;
    let h = parse(header_token(&mut r)?)?;
    if parse(header_token(&mut r)?)? != 255 {
        return Err(Error::Format("only maxval 255 is supported".into()));
    }
    let n = h * w;
    let mut raw = vec![0u8; 3 * n];
    r.read_exact(&mut raw).map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for ch in 0..3 {
            data[ch * n + i] = raw[3 * i + ch] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

/// Places images side by side; missing entries become mid-gray panels.
pub fn montage(panels: &[Option<&Tensor>], h: usize, w: usize) -> Result<Tensor> {
    let k = panels.len();
    let mut data = vec![0.5; 3 * h * w * k];
    let row = w * k;
    for (p, img) in panels.iter().enumerate() {
        let Some(img) = img else { continue };
        let (c, ih, iw) = dims(img)?;
        if (c, ih, iw) != (3, h, w) {
            return Err(Error::Dim(format!("montage panel {p} is {:?}, expected [3, {h}, {w}]", img.shape())));
        }
        let d = img.data();
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[ch * h * row + y * row + p * w + x] = d[ch * h * w + y * w + x];
                }
            }
        }
    }
    Tensor::new(&[3, h, row], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn ppm_roundtrip_on_8bit_grid() {
        let img = quantize(&Tensor::uniform(&[3, 5, 7], 0.0, 1.0, &mut Rng::new(1)));
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ppm_header_comments_are_skipped() {
        let mut bytes = b"P6\n# c\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn montage_width_is_panel_sum() {
        let a = Tensor::zeros(&[3, 4, 5]);
        let m = montage(&[Some(&a), None, Some(&a)], 4, 5).unwrap();
        assert_eq!(m.shape(), &[3, 4, 15]);
        assert_eq!(m.data()[5], 0.5);
        assert_eq!(m.data()[10], 0.0);
    }

    #[test]
    fn luminance_weights() {
        let img = Tensor::new(&[3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(luminance(&img).unwrap(), vec![0.299]);
    }
}
