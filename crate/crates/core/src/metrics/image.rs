//! Reconstruction quality: PSNR and SSIM on images with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `10·log10(1 / MSE)` with peak value 1. Identical inputs give `+∞`.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("psnr", &[a.len()], &[b.len()]));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Per-image PSNR averaged over the leading axis of two `[N, ...]` batches.
pub fn mean_psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.same_shape(b, "psnr")?;
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let (x, y): (Vec<f64>, Vec<f64>) = (
            a.row(i).iter().map(|v| v.as_f64()).collect(),
            b.row(i).iter().map(|v| v.as_f64()).collect(),
        );
        total += psnr(&x, &y)?;
    }
    Ok(total / n as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn ssim_formula(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// SSIM of one channel `[h, w]`.
fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        // Too small for a full window: use whole-image statistics.
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
        let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
        return ssim_formula(ma, mb, va, vb, cov);
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (u, gu) in g.iter().enumerate() {
                for (v, gv) in g.iter().enumerate() {
                    let wt = gu * gv;
                    let idx = (i + u) * w + (j + v);
                    let (x, y) = (a[idx], b[idx]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * (x * y);
                }
            }
            total += ssim_formula(ma, mb, saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        }
    }
    total / (oh * ow) as f64
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5) and channels of two
/// `[C, H, W]` images. Images smaller than the window use global statistics.
pub fn ssim(a: &[f64], b: &[f64], chw: [usize; 3]) -> Result<f64> {
    let [c, h, w] = chw;
    if a.len() != c * h * w || b.len() != a.len() || a.is_empty() {
        return Err(Error::shape("ssim", &[a.len()], &[b.len()]));
    }
    let plane = h * w;
    Ok((0..c)
        .map(|ch| ssim_channel(&a[ch * plane..(ch + 1) * plane], &b[ch * plane..(ch + 1) * plane], h, w))
        .sum::<f64>()
        / c as f64)
}

/// SSIM averaged over a batch `[N, C, H, W]`.
pub fn mean_ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.same_shape(b, "ssim")?;
    let [_, c, h, w] = a.shape() else {
        return Err(Error::shape("ssim", a.shape(), &[0, 0, 0, 0]));
    };
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let x: Vec<f64> = a.row(i).iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.row(i).iter().map(|v| v.as_f64()).collect();
        total += ssim(&x, &y, [*c, *h, *w])?;
    }
    Ok(total / n as f64)
}
