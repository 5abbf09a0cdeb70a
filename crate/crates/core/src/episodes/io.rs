//! Image decoding: binary PGM/PPM and the `BHFT` raw-tensor container.
//!
//! `BHFT` layout (little-endian): `"BHFT"`, `u32` count, then per image
//! `u32 C, u32 H, u32 W` followed by `C·H·W` `f64` values in `[C, H, W]`
//! order.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BHFT_MAGIC: &[u8; 4] = b"BHFT";

/// Decodes a binary (P5/P6) netpbm image to a `[C, H, W]` tensor scaled by
/// `1/maxval`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: &str| Error::format(path, msg.to_string());
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated netpbm header"));
        }
        Ok(&bytes[start..pos])
    };
    let channels = match token()? {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(bad("only binary PGM (P5) and PPM (P6) are supported")),
    };
    let mut number = |what: &str| -> Result<usize> {
        std::str::from_utf8(token()?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, format!("invalid {what} in netpbm header")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(bad("image has zero size"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit netpbm images are supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = &bytes[pos + 1.min(bytes.len() - pos)..];
    let n = width * height * channels;
    if raster.len() < n {
        return Err(bad("pixel data is truncated"));
    }
    let mut data = vec![0.0; n];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let v = raster[(y * width + x) * channels + c] as usize;
                if v > maxval {
                    return Err(bad("pixel value exceeds maxval"));
                }
                data[(c * height + y) * width + x] = v as f64 / maxval as f64;
            }
        }
    }
    Tensor::new(vec![channels, height, width], data)
}

/// Encodes a `[C, H, W]` tensor with values in `[0, 1]` as binary PGM/PPM.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] if c == 1 || c == 3 => [c, h, w],
        ref s => return Err(Error::contract(format!("cannot write {s:?} as netpbm"))),
    };
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image.data()[(ch * h + y) * w + x];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn encode_bhft(images: &[&Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(BHFT_MAGIC);
    out.extend_from_slice(&(images.len() as u32).to_le_bytes());
    for img in images {
        let [c, h, w] = match *img.shape() {
            [c, h, w] => [c, h, w],
            ref s => return Err(Error::contract(format!("BHFT images must be [C,H,W], got {s:?}"))),
        };
        for d in [c, h, w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in img.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_bhft(bytes: &[u8], path: &Path) -> Result<Vec<Tensor>> {
    let truncated = || Error::format(path, "truncated BHFT file");
    if bytes.len() < 8 || &bytes[..4] != BHFT_MAGIC {
        return Err(Error::format(path, "missing BHFT magic"));
    }
    let u32_at = |p: usize| -> Result<usize> {
        bytes
            .get(p..p + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(truncated)
    };
    let count = u32_at(4)?;
    let mut pos = 8;
    let mut images = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (c, h, w) = (u32_at(pos)?, u32_at(pos + 4)?, u32_at(pos + 8)?);
        pos += 12;
        let n = c * h * w;
        let raw = bytes.get(pos..pos + 8 * n).ok_or_else(truncated)?;
        pos += 8 * n;
        let data: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::format(path, "BHFT values must be finite"));
        }
        images.push(Tensor::new(vec![c, h, w], data)?);
    }
    if pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after BHFT images"));
    }
    Ok(images)
}

pub fn write_bhft(path: &Path, images: &[&Tensor]) -> Result<()> {
    let bytes = encode_bhft(images)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn read_bhft(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bhft(&bytes, path)
}

/// Nearest-neighbour resize of a `[C, H, W]` image to `[C, side, side]`.
pub fn resize_nearest(image: &Tensor, side: usize) -> Tensor {
    let [c, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    if h == side && w == side {
        return image.clone();
    }
    let mut out = vec![0.0; c * side * side];
    for ch in 0..c {
        for y in 0..side {
            let sy = ((2 * y + 1) * h / (2 * side)).min(h - 1);
            for x in 0..side {
                let sx = ((2 * x + 1) * w / (2 * side)).min(w - 1);
                out[(ch * side + y) * side + x] = image.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(vec![c, side, side], out).expect("sized above")
}

/// Converts between 1 and 3 channels (replication / channel mean).
pub fn convert_channels(image: Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c == channels {
        return Ok(image);
    }
    let hw = h * w;
    match (c, channels) {
        (1, n) => {
            let mut data = Vec::with_capacity(n * hw);
            for _ in 0..n {
                data.extend_from_slice(image.data());
            }
            Tensor::new(vec![n, h, w], data)
        }
        (n, 1) => {
            let mut data = vec![0.0; hw];
            for ch in 0..n {
                for (d, v) in data.iter_mut().zip(&image.data()[ch * hw..(ch + 1) * hw]) {
                    *d += v / n as f64;
                }
            }
            Tensor::new(vec![1, h, w], data)
        }
        _ => Err(Error::contract(format!("cannot convert {c} channels to {channels}"))),
    }
}
