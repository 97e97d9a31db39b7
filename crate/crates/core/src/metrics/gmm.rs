//! Diagonal-covariance Gaussian mixture fitted by EM, used as a latent sampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Smallest variance any component may take.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    /// `[k][J]`.
    pub means: Vec<Vec<f64>>,
    /// `[k][J]`, every entry at least [`VARIANCE_FLOOR`].
    pub variances: Vec<Vec<f64>>,
}

/// EM stopping rule.
#[derive(Clone, Copy, Debug)]
pub struct EmOptions {
    /// Stop once `|ℓₜ − ℓₜ₋₁| < tol·|ℓₜ₋₁|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean per-point log-likelihood of the initial parameters followed by
    /// the value after every EM iteration.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn component_log_pdf(&self, c: usize, x: &[f64]) -> f64 {
        let (m, v) = (&self.means[c], &self.variances[c]);
        x.iter()
            .zip(m)
            .zip(v)
            .map(|((&xi, &mi), &vi)| -0.5 * (LN_2PI + vi.ln() + (xi - mi).powi(2) / vi))
            .sum()
    }

    /// Writes `ln wₖ + ln N(x; μₖ, Σₖ)` into `out` and returns their logsumexp.
    fn joint_log(&self, x: &[f64], out: &mut [f64]) -> f64 {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.weights[c].ln() + self.component_log_pdf(c, x);
        }
        log_sum_exp(out)
    }

    /// Mean log-likelihood per point of `data: [N, J]`.
    pub fn log_likelihood(&self, data: &Tensor<f64>) -> f64 {
        let mut buf = vec![0.0; self.k()];
        let n = data.rows();
        (0..n).map(|i| self.joint_log(data.row(i), &mut buf)).sum::<f64>() / n as f64
    }

    /// `n` draws as an `[n, J]` tensor.
    pub fn sample(&self, n: usize, rng: &mut RngState) -> Tensor<f64> {
        let j = self.dim();
        let mut out = Vec::with_capacity(n * j);
        for _ in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut c = self.k() - 1;
            for (i, &w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    c = i;
                    break;
                }
            }
            for d in 0..j {
                out.push(self.means[c][d] + self.variances[c][d].sqrt() * rng.normal());
            }
        }
        Tensor::new(vec![n, j], out).expect("sample shape")
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding: the first center uniformly, each next one with
/// probability proportional to the squared distance to the nearest center.
fn kmeans_pp(data: &Tensor<f64>, k: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    let n = data.rows();
    let mut centers = vec![data.row(rng.below(n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or(n - 1)
        } else {
            rng.below(n)
        };
        let c = data.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

/// Fits a `k`-component diagonal mixture to `data: [N, J]` with EM from a
/// k-means++ start.
pub fn fit_gmm(data: &Tensor<f64>, k: usize, rng: &mut RngState, opts: EmOptions) -> Result<GmmFit> {
    let (n, j) = data.dims2("fit_gmm")?;
    if k == 0 || n < k {
        return Err(Error::contract(format!("fit_gmm needs N >= k >= 1, got N={n}, k={k}")));
    }
    if !data.is_finite() {
        return Err(Error::NonFinite {
            context: "fit_gmm input".into(),
        });
    }
    let mean: Vec<f64> = (0..j)
        .map(|d| (0..n).map(|i| data.row(i)[d]).sum::<f64>() / n as f64)
        .collect();
    let global_var: Vec<f64> = (0..j)
        .map(|d| {
            let v = (0..n).map(|i| (data.row(i)[d] - mean[d]).powi(2)).sum::<f64>() / n as f64;
            v.max(VARIANCE_FLOOR)
        })
        .collect();
    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: kmeans_pp(data, k, rng),
        variances: vec![global_var; k],
    };

    let mut resp = vec![0.0; n * k];
    let mut history = vec![model.log_likelihood(data)];
    let mut converged = false;
    for _ in 0..opts.max_iter {
        // E step.
        for i in 0..n {
            let r = &mut resp[i * k..(i + 1) * k];
            let lse = model.joint_log(data.row(i), r);
            for v in r.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        // M step.
        let mut floored = false;
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk <= f64::MIN_POSITIVE {
                model.weights[c] = 0.0;
                continue;
            }
            model.weights[c] = nk / n as f64;
            for d in 0..j {
                let mu = (0..n).map(|i| resp[i * k + c] * data.row(i)[d]).sum::<f64>() / nk;
                let var = (0..n)
                    .map(|i| resp[i * k + c] * (data.row(i)[d] - mu).powi(2))
                    .sum::<f64>()
                    / nk;
                model.means[c][d] = mu;
                if var < VARIANCE_FLOOR {
                    floored = true;
                }
                model.variances[c][d] = var.max(VARIANCE_FLOOR);
            }
        }
        if floored {
            log::warn!("gmm: a component hit the variance floor {VARIANCE_FLOOR}");
        }
        let ll = model.log_likelihood(data);
        let prev = *history.last().expect("history starts non-empty");
        history.push(ll);
        if (ll - prev).abs() < opts.tol * prev.abs() {
            converged = true;
            break;
        }
    }
    Ok(GmmFit {
        model,
        history,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters(centers: &[[f64; 2]], per: usize, spread: f64, seed: u64) -> Tensor<f64> {
        let mut rng = RngState::new(seed);
        let mut v = Vec::new();
        for c in centers {
            for _ in 0..per {
                v.push(c[0] + spread * rng.normal());
                v.push(c[1] + spread * rng.normal());
            }
        }
        Tensor::new(vec![centers.len() * per, 2], v).unwrap()
    }

    #[test]
    fn one_component_recovers_sample_statistics() {
        let data = clusters(&[[1.0, -2.0]], 500, 0.7, 1);
        let fit = fit_gmm(&data, 1, &mut RngState::new(0), EmOptions::default()).unwrap();
        for d in 0..2 {
            let col: Vec<f64> = (0..500).map(|i| data.row(i)[d]).collect();
            let m = col.iter().sum::<f64>() / 500.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 500.0;
            assert!((fit.model.means[0][d] - m).abs() < 1e-10);
            assert!((fit.model.variances[0][d] - v).abs() < 1e-10);
        }
        assert_eq!(fit.model.weights, vec![1.0]);
    }

    #[test]
    fn separated_clusters_are_found() {
        let data = clusters(&[[-5.0, 0.0], [5.0, 3.0]], 300, 0.5, 2);
        let fit = fit_gmm(&data, 2, &mut RngState::new(1), EmOptions::default()).unwrap();
        let mut means = fit.model.means.clone();
        means.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((means[0][0] + 5.0).abs() < 0.1 && means[0][1].abs() < 0.1);
        assert!((means[1][0] - 5.0).abs() < 0.1 && (means[1][1] - 3.0).abs() < 0.1);
        assert!((fit.model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_follows_the_mixture() {
        let model = GmmModel {
            weights: vec![0.25, 0.75],
            means: vec![vec![-10.0], vec![10.0]],
            variances: vec![vec![1.0], vec![4.0]],
        };
        let s = model.sample(20_000, &mut RngState::new(3));
        let frac = s.data().iter().filter(|&&v| v < 0.0).count() as f64 / 20_000.0;
        assert!((frac - 0.25).abs() < 0.015, "{frac}");
    }

    #[test]
    fn rejects_too_few_points() {
        let data = Tensor::zeros(vec![2, 3]);
        assert!(fit_gmm(&data, 3, &mut RngState::new(0), EmOptions::default()).is_err());
    }
}
