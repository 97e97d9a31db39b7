//! Importance-sampled log-likelihood estimates and active units.

use crate::autodiff::{bce_with_logits, gauss_log_pdf};
use crate::error::{Error, Result};
use crate::model::Vae;
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Rows decoded per batch while drawing importance samples.
const DECODE_ROWS: usize = 1024;

/// `−ln((1/S) Σ exp(wₛ))` for log-weights `w`, with the delta-method Monte
/// Carlo standard error `sd(e^w) / (√S · mean(e^w))`.
pub fn nll_from_log_weights(log_w: &[f64]) -> Result<(f64, f64)> {
    if log_w.is_empty() {
        return Err(Error::contract("importance estimate needs at least one sample"));
    }
    let s = log_w.len() as f64;
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NonFinite {
            context: "importance log-weights".into(),
        });
    }
    let scaled: Vec<f64> = log_w.iter().map(|w| (w - m).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / s;
    let nll = -(m + mean.ln());
    let se = if log_w.len() > 1 {
        let var = scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s - 1.0);
        var.sqrt() / (s.sqrt() * mean)
    } else {
        f64::NAN
    };
    Ok((nll, se))
}

/// Per-datum importance-sampled negative log-likelihoods.
#[derive(Clone, Debug)]
pub struct NllEstimate {
    pub per_datum: Vec<f64>,
    /// Monte Carlo standard error of each entry (NaN for a single sample).
    pub mc_se: Vec<f64>,
}

impl NllEstimate {
    pub fn mean(&self) -> f64 {
        self.per_datum.iter().sum::<f64>() / self.per_datum.len() as f64
    }
}

/// `S` importance log-weights `ln p(x|zₛ) + ln p(zₛ) − ln q(zₛ|x)` for every
/// row of `x`, with `zₛ` drawn from the model's own posterior. Row `i` of the
/// result holds datum `i`'s samples.
pub fn importance_log_weights<T: Scalar>(
    model: &Vae<T>,
    x: &Tensor<T>,
    samples: usize,
    rng: &mut RngState,
) -> Result<Vec<Vec<f64>>> {
    if samples == 0 {
        return Err(Error::contract("importance sampling needs S >= 1"));
    }
    let x = model.batch_input(x)?;
    let q = model.encode(&x)?;
    let j = model.latent_dim();
    let mut out = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let (mu, lv) = (q.mu.row(i), q.logvar.row(i));
        let pixels = x.row(i);
        let mut weights = Vec::with_capacity(samples);
        let mut done = 0;
        while done < samples {
            let rows = (samples - done).min(DECODE_ROWS);
            let eps: Tensor<f64> = rng.standard_normal(vec![rows, j]);
            let z: Vec<T> = (0..rows * j)
                .map(|k| mu[k % j] + T::lit(eps.data()[k]) * (lv[k % j] * T::lit(0.5)).exp())
                .collect();
            let z = Tensor::new(vec![rows, j], z)?;
            let logits = model.decode_logits(&z)?;
            for r in 0..rows {
                let lp_x: f64 = -logits
                    .row(r)
                    .iter()
                    .zip(pixels)
                    .map(|(&s, &t)| bce_with_logits(s.as_f64(), t.as_f64()))
                    .sum::<f64>();
                let (mut lp_z, mut lq) = (0.0, 0.0);
                for d in 0..j {
                    let zv = z.row(r)[d].as_f64();
                    lp_z += -0.5 * zv * zv - HALF_LN_2PI;
                    lq += gauss_log_pdf(zv, mu[d].as_f64(), lv[d].as_f64());
                }
                weights.push(lp_x + lp_z - lq);
            }
            done += rows;
        }
        debug_assert_eq!(weights.len(), samples);
        out.push(weights);
    }
    Ok(out)
}

/// Importance-sampled `−ln p(x)` with `S` samples per datum. `S = 1` gives
/// the single-sample negative ELBO.
pub fn nll_importance<T: Scalar>(
    model: &Vae<T>,
    x: &Tensor<T>,
    samples: usize,
    rng: &mut RngState,
) -> Result<NllEstimate> {
    let mut est = NllEstimate {
        per_datum: Vec::new(),
        mc_se: Vec::new(),
    };
    for w in importance_log_weights(model, x, samples, rng)? {
        let (nll, se) = nll_from_log_weights(&w)?;
        est.per_datum.push(nll);
        est.mc_se.push(se);
    }
    Ok(est)
}

/// Number of latent coordinates whose posterior-mean variance across the
/// data (divisor `N`) is at least `eps`.
pub fn active_units(means: &Tensor<f64>, eps: f64) -> Result<usize> {
    let (n, j) = means.dims2("active_units")?;
    if n < 2 {
        return Err(Error::contract(format!("active_units needs N >= 2, got {n}")));
    }
    Ok((0..j)
        .filter(|&d| {
            let m = (0..n).map(|i| means.row(i)[d]).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (means.row(i)[d] - m).powi(2)).sum::<f64>() / n as f64;
            v >= eps
        })
        .count())
}
