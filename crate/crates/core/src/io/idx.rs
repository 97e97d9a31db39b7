//! IDX containers (the MNIST family format): a 4-byte big-endian magic whose
//! third byte is the element type and fourth the number of dimensions, one
//! big-endian `u32` per dimension, then the elements.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Dataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(bytes.len(), format!("file ends inside the {what}")))
}

/// Parses an unsigned-byte IDX buffer with the given magic and returns its
/// dimensions and element bytes. Trailing bytes after the elements are an error.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let found = be_u32(bytes, 0, "magic number")?;
    if found != magic {
        return Err(parse_err(0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for d in 0..ndim {
        let off = 4 + 4 * d;
        let v = be_u32(bytes, off, "dimension header")? as usize;
        count = count
            .checked_mul(v)
            .ok_or_else(|| parse_err(off, "element count overflows"))?;
        dims.push(v);
    }
    let start = 4 + 4 * ndim;
    let end = start
        .checked_add(count)
        .ok_or_else(|| parse_err(start, "element count overflows"))?;
    if bytes.len() < end {
        return Err(parse_err(
            bytes.len(),
            format!(
                "truncated: header promises {count} elements, {} present",
                bytes.len() - start
            ),
        ));
    }
    if bytes.len() > end {
        return Err(parse_err(
            end,
            format!("{} unexpected trailing bytes", bytes.len() - end),
        ));
    }
    Ok((dims, &bytes[start..end]))
}

/// Images `[N, 1, H, W]` scaled by 1/255 from an `idx3-ubyte` buffer.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (dims, data) = parse_idx(bytes, IMAGES_MAGIC)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let pixels = data.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![n, 1, h, w], pixels)
}

/// Labels from an `idx1-ubyte` buffer.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, data) = parse_idx(bytes, LABELS_MAGIC)?;
    Ok(data.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// Loads an image file and, optionally, its label file.
pub fn load_idx(images: &Path, labels: Option<&Path>, split: &str) -> Result<Dataset> {
    let imgs = parse_images(&read(images)?).map_err(|e| with_path(e, images))?;
    let labels = match labels {
        Some(p) => {
            let l = parse_labels(&read(p)?).map_err(|e| with_path(e, p))?;
            if l.len() != imgs.rows() {
                return Err(Error::Parse {
                    offset: 4,
                    message: format!("{}: {} labels for {} images", p.display(), l.len(), imgs.rows()),
                });
            }
            Some(l)
        }
        None => None,
    };
    Dataset::new(imgs, labels, split)
}

/// Serializes images `[N, 1, H, W]` with values in `[0, 1]` as `idx3-ubyte`.
pub fn encode_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let [n, 1, h, w] = images.shape() else {
        return Err(Error::shape("encode_images", images.shape(), &[0, 1, 0, 0]));
    };
    let mut out = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [*n, *h, *w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Serializes labels as `idx1-ubyte`.
pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}
