#![allow(dead_code)]

use std::path::{Path, PathBuf};

use bvae::io::Dataset;
use bvae::rng::RngState;
use bvae::train::TrainConfig;
use bvae::Tensor;

/// MNIST directory from `BVAE_MNIST_DIR`, else `data/mnist` at the workspace
/// root. `None` when the IDX files are absent.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("BVAE_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

/// Smooth random 8×8 blobs in `[0, 1]`, so a small model has something to learn.
pub fn blobs(n: usize, seed: u64) -> Dataset {
    let mut rng = RngState::new(seed);
    let mut data = Vec::with_capacity(n * 64);
    for _ in 0..n {
        let (cy, cx) = (rng.uniform() * 7.0, rng.uniform() * 7.0);
        let r = 1.0 + rng.uniform() * 2.0;
        for y in 0..8 {
            for x in 0..8 {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                data.push((-d2 / (2.0 * r * r)).exp() as f32);
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 8, 8], data).unwrap(), None, "blobs").unwrap()
}

/// Small configuration for 8×8 inputs.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for pair in [
        "input=1x8x8",
        "layers=conv4k4s2p1,dense16",
        "latent=3",
        "batch_size=16",
        "epochs=2",
        "seed=5",
    ] {
        cfg.set_pair(pair).unwrap();
    }
    cfg
}
