//! Binary PPM (P6) and PGM (P5) files, 8 bits per sample.

use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::scalar::Scalar;
use crate::stylegen::{Mask, RegionMaps, REGION_LABELS};

/// `[0,1]` to a byte; out-of-range values are clamped.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `[3, H, W]` image as P6 bytes.
pub fn encode_ppm<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::ShapeMismatch {
            name: "ppm image".into(),
            expected: vec![3, 0, 0],
            got: s.to_vec(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let d = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * n);
    for p in 0..n {
        for ch in 0..3 {
            out.push(quantize(d[ch * n + p].to_f64_lossy()));
        }
    }
    Ok(out)
}

/// Grayscale P5 bytes with the given maximum sample value.
pub fn encode_pgm(height: usize, width: usize, maxval: u8, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != height * width {
        return Err(Error::ShapeMismatch {
            name: "pgm image".into(),
            expected: vec![height, width],
            got: vec![data.len()],
        });
    }
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(data);
    Ok(out)
}

/// The hard label map as an indexed image: sample value = region index.
pub fn encode_labels<T: Scalar>(regions: &RegionMaps<T>) -> Result<Vec<u8>> {
    encode_pgm(regions.height, regions.width, (REGION_LABELS.len() - 1) as u8, &regions.labels)
}

/// Mask as black (0) and white (255).
pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let d: Vec<u8> = mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode_pgm(mask.height, mask.width, 255, &d)
}

/// A decoded P5/P6 file: `channels` interleaved samples per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

impl Netpbm {
    /// Mean of channel `ch` over the pixels where `keep` is set, scaled to `[0,1]`.
    pub fn channel_mean(&self, ch: usize, keep: impl Fn(usize, usize) -> bool) -> Option<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..self.height {
            for c in 0..self.width {
                if keep(r, c) {
                    total += self.data[(r * self.width + c) * self.channels + ch] as f64;
                    count += 1;
                }
            }
        }
        (count > 0).then(|| total / count as f64 / self.maxval as f64)
    }
}

fn bad(msg: &str) -> Error {
    Error::Config(format!("malformed netpbm file: {msg}"))
}

/// Parses P5 and P6 files with 8-bit samples.
pub fn decode(bytes: &[u8]) -> Result<Netpbm> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("unsupported magic")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit samples are supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if data.len() != width * height * channels {
        return Err(bad("raster size does not match header"));
    }
    Ok(Netpbm {
        width,
        height,
        channels,
        maxval: maxval as u16,
        data: data.to_vec(),
    })
}

pub fn read(path: &Path) -> Result<Netpbm> {
    decode(&std::fs::read(path)?)
}
