//! Binary PGM/PPM image grids.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Black pixels between neighbouring tiles.
pub const GUTTER: usize = 2;

/// `round(255·clamp(v, 0, 1))`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decoded binary PNM raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved row-major samples.
    pub pixels: Vec<u8>,
}

/// Tiles `images: [N, C, H, W]` row-major into `min(cols, N)` columns and
/// encodes the grid as P5 (C = 1) or P6 (C = 3).
pub fn encode_image_grid<T: Scalar>(images: &Tensor<T>, cols: usize) -> Result<Vec<u8>> {
    if cols == 0 {
        return Err(Error::contract("image grid needs at least one column"));
    }
    let [n, c, h, w] = *images.shape() else {
        return Err(Error::shape("image grid", images.shape(), &[0, 1, 0, 0]));
    };
    if c != 1 && c != 3 {
        return Err(Error::contract(format!("image grid supports 1 or 3 channels, got {c}")));
    }
    if n == 0 {
        return Err(Error::contract("image grid needs at least one image"));
    }
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let gw = cols * w + (cols - 1) * GUTTER;
    let gh = rows * h + (rows - 1) * GUTTER;
    let mut px = vec![0u8; gw * gh * c];
    for i in 0..n {
        let (ty, tx) = (i / cols * (h + GUTTER), i % cols * (w + GUTTER));
        let img = images.row(i);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = img[(ch * h + y) * w + x].as_f64();
                    px[((ty + y) * gw + tx + x) * c + ch] = quantize(v);
                }
            }
        }
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn write_image_grid<T: Scalar>(images: &Tensor<T>, cols: usize, path: &Path) -> Result<()> {
    let bytes = encode_image_grid(images, cols)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn pnm_err(offset: usize, message: &str) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses a binary P5/P6 file with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Pnm> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pnm_err(pos, "incomplete header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| pnm_err(start, "bad header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(pnm_err(0, "not a binary PGM/PPM")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| pnm_err(0, "bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(pnm_err(0, "only maxval 255 is supported"));
    }
    let len = width * height * channels;
    let pixels = bytes
        .get(pos..pos + len)
        .ok_or_else(|| pnm_err(bytes.len(), "truncated raster"))?
        .to_vec();
    Ok(Pnm {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn read_pnm(path: &Path) -> Result<Pnm> {
    decode_pnm(&std::fs::read(path)?)
}
