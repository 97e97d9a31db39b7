//! Datasets, IDX parsing, image grids and checkpoints.

pub mod checkpoint;
pub mod grid;
pub mod idx;

pub use checkpoint::{
    checkpoint_dtype, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainState,
};
pub use grid::{decode_pnm, encode_image_grid, read_pnm, write_image_grid, Pnm};
pub use idx::{encode_images, encode_labels, load_idx, parse_images, parse_labels};

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Images `[N, C, H, W]` in `[0, 1]` with optional labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
    split: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>, split: impl Into<String>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Data(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if let Some(bad) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "pixel {} of image {} is outside [0, 1]",
                bad % images.row_len(),
                bad / images.row_len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.rows() {
                return Err(Error::Data(format!("{} labels for {} images", l.len(), images.rows())));
            }
        }
        Ok(Self {
            images,
            labels,
            split: split.into(),
        })
    }

    /// Loads `{prefix}-images-idx3-ubyte` and `{prefix}-labels-idx1-ubyte`
    /// from `dir`, where the prefix is `train` or `t10k`.
    pub fn mnist(dir: &Path, split: &str) -> Result<Self> {
        let prefix = match split {
            "train" => "train",
            "test" | "t10k" => "t10k",
            other => return Err(Error::config(format!("unknown split '{other}' (use train or test)"))),
        };
        let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
        let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
        load_idx(&images, labels.exists().then_some(labels.as_path()), split)
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn chw(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    /// The listed images, cast to `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        Ok(self.images.select_rows(indices)?.cast())
    }

    /// All images cast to `T`.
    pub fn all<T: Scalar>(&self) -> Tensor<T> {
        self.images.cast()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self {
            images: self.images.select_rows(indices)?,
            labels,
            split: self.split.clone(),
        })
    }

    /// The first `n` images, or all of them when `n` exceeds the size.
    pub fn take(&self, n: usize) -> Result<Self> {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// A seeded random subset of `n` distinct images, kept in original order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Self> {
        if n >= self.len() {
            return Ok(self.clone());
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        RngState::new(seed).shuffle(&mut idx);
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }
}
