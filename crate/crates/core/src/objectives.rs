//! Training objectives, all expressed as losses to minimize.
//!
//! * `elbo` / `beta`: `BCE + β·KL`, one reparameterized sample per datum.
//!   Minimizing it maximizes the (β-weighted) bound.
//! * `iwae`: `−[logsumexp_i(ln p(x|zᵢ) + ln p(zᵢ) − ln q(zᵢ|x)) − ln k]`.
//! * `tcvae`: `BCE + MI + β·TC + dimension-wise KL`, with the aggregate
//!   posterior estimated from the minibatch.
//!
//! Reconstruction terms are summed over pixels and averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_with_logits, Binding, Tape, Var};
use crate::error::{Error, Result};
use crate::model::Vae;
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Elbo,
    Beta,
    Tcvae,
    Iwae,
}

impl ObjectiveKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(Self::Elbo),
            "beta" => Ok(Self::Beta),
            "tcvae" => Ok(Self::Tcvae),
            "iwae" => Ok(Self::Iwae),
            _ => Err(Error::config(format!("unknown objective {s:?} (elbo|beta|tcvae|iwae)"))),
        }
    }
}

/// How the aggregate posterior `q(z)` is estimated from a minibatch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TcEstimator {
    /// Minibatch-stratified sampling: weight `1/N` on the sample's own datum
    /// and `(N−1)/(N(B−1))` on each other datum.
    #[default]
    Mss,
    /// Minibatch-weighted sampling: weight `1/(N·B)` on every datum.
    Mws,
}

impl TcEstimator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mss" => Ok(Self::Mss),
            "mws" => Ok(Self::Mws),
            _ => Err(Error::config(format!("unknown tc estimator {s:?} (mss|mws)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Weight of the KL (β-VAE) or total-correlation (β-TCVAE) term.
    pub beta_weight: f64,
    pub iwae_k: usize,
    /// Training-set size `N`, used by `tcvae`.
    pub dataset_size: usize,
    pub tc_estimator: TcEstimator,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Elbo,
            beta_weight: 1.0,
            iwae_k: 1,
            dataset_size: 0,
            tc_estimator: TcEstimator::Mss,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self, batch: usize) -> Result<()> {
        if !(self.beta_weight > 0.0 && self.beta_weight.is_finite()) {
            return Err(Error::config(format!(
                "beta_weight must be > 0, got {}",
                self.beta_weight
            )));
        }
        if self.iwae_k == 0 {
            return Err(Error::config("iwae_k must be at least 1"));
        }
        if self.kind == ObjectiveKind::Tcvae {
            if batch < 2 {
                return Err(Error::contract(format!(
                    "tcvae needs a batch of at least 2, got {batch}"
                )));
            }
            if self.dataset_size < batch {
                return Err(Error::config(format!(
                    "tcvae needs dataset_size >= batch size ({} < {batch})",
                    self.dataset_size
                )));
            }
        }
        Ok(())
    }

    /// Rows of `ε` consumed per datum.
    pub fn samples_per_datum(&self) -> usize {
        if self.kind == ObjectiveKind::Iwae {
            self.iwae_k
        } else {
            1
        }
    }
}

/// Scalar loss plus its reconstruction and regularization parts for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub loss: Var,
    pub bce: Var,
    pub kld: Var,
}

/// Batch-mean KL divergence of `N(μ, e^{lv})` from `N(0, I)`.
pub fn gaussian_kl(mu: &Tensor<f64>, logvar: &Tensor<f64>) -> Result<f64> {
    mu.same_shape(logvar, "gaussian_kl")?;
    let total: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum();
    Ok(total / mu.rows().max(1) as f64)
}

/// Bernoulli negative log-likelihood from logits, summed over pixels and
/// averaged over rows.
pub fn bernoulli_nll(logits: &Tensor<f64>, x: &Tensor<f64>) -> Result<f64> {
    if logits.numel() != x.numel() {
        return Err(Error::shape("bernoulli_nll", logits.shape(), x.shape()));
    }
    let total: f64 = logits
        .data()
        .iter()
        .zip(x.data())
        .map(|(&s, &t)| bce_with_logits(s, t))
        .sum();
    Ok(total / logits.rows().max(1) as f64)
}

fn check_eps<T: Scalar>(eps: &Tensor<T>, rows: usize, j: usize) -> Result<()> {
    if eps.shape() != [rows, j] {
        return Err(Error::shape("objective noise", eps.shape(), &[rows, j]));
    }
    Ok(())
}

fn encode_input<T: Scalar>(
    model: &Vae<T>,
    tape: &mut Tape<T>,
    b: &Binding,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, Var, Var)> {
    let x = model.batch_input(x)?;
    let xv = tape.constant(x.clone());
    let (mu, lv) = model.encode_on(tape, b, xv)?;
    Ok((x, mu, lv))
}

/// Per-row sum of pixel BCE, `[rows]`.
fn row_bce<T: Scalar>(model: &Vae<T>, tape: &mut Tape<T>, b: &Binding, z: Var, target: &Tensor<T>) -> Result<Var> {
    let logits = model.decode_logits_on(tape, b, z)?;
    let bce = tape.bce_logits(logits, target)?;
    tape.sum_axis(bce, 1)
}

/// `BCE + β·KL` with explicit noise `eps: [B, J]`. `beta` may be zero here,
/// which leaves pure reconstruction.
pub fn belbo_loss_on<T: Scalar>(
    model: &Vae<T>,
    tape: &mut Tape<T>,
    b: &Binding,
    x: &Tensor<T>,
    eps: &Tensor<T>,
    beta: f64,
) -> Result<LossTerms> {
    let (x, mu, lv) = encode_input(model, tape, b, x)?;
    let rows = x.rows();
    check_eps(eps, rows, model.latent_dim())?;
    let inv_b = T::lit(1.0 / rows as f64);
    let z = tape.reparameterize(mu, lv, eps.clone())?;
    let bce = row_bce(model, tape, b, z, &x)?;
    let bce = tape.sum(bce)?;
    let bce = tape.scale(bce, inv_b)?;
    let kl = tape.kl_std_normal(mu, lv)?;
    let kl = tape.sum(kl)?;
    let kld = tape.scale(kl, inv_b)?;
    let loss = if beta == 0.0 {
        bce
    } else {
        let weighted = tape.scale(kld, T::lit(beta))?;
        tape.add(bce, weighted)?
    };
    Ok(LossTerms { loss, bce, kld })
}

/// `−L_k` with noise `eps: [B·k, J]` laid out datum-major (row `b·k + i` is
/// sample `i` of datum `b`).
pub fn iwae_loss_on<T: Scalar>(
    model: &Vae<T>,
    tape: &mut Tape<T>,
    b: &Binding,
    x: &Tensor<T>,
    eps: &Tensor<T>,
    k: usize,
) -> Result<LossTerms> {
    if k == 0 {
        return Err(Error::contract("iwae needs k >= 1"));
    }
    let (x, mu, lv) = encode_input(model, tape, b, x)?;
    let rows = x.rows();
    let j = model.latent_dim();
    check_eps(eps, rows * k, j)?;
    let idx: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat_n(r, k)).collect();
    let target = x.select_rows(&idx)?;
    let mu_k = tape.repeat_rows(mu, k)?;
    let lv_k = tape.repeat_rows(lv, k)?;
    let z = tape.reparameterize(mu_k, lv_k, eps.clone())?;

    let bce = row_bce(model, tape, b, z, &target)?;
    let lpz = tape.std_normal_log_pdf(z)?;
    let lpz = tape.sum_axis(lpz, 1)?;
    let lq = tape.gauss_log_pdf(z, mu_k, lv_k)?;
    let lq = tape.sum_axis(lq, 1)?;
    // ln w = −BCE + ln p(z) − ln q(z|x)
    let kl_sample = tape.sub(lq, lpz)?;
    let neg_w = tape.add(bce, kl_sample)?;
    let log_w = tape.scale(neg_w, -T::one())?;
    let log_w = tape.reshape(log_w, vec![rows, k])?;
    let lse = tape.logsumexp_axis(log_w, 1)?;
    let bound = tape.offset(lse, T::lit(-(k as f64).ln()))?;
    let bound = tape.mean(bound)?;
    let loss = tape.scale(bound, -T::one())?;

    let inv = T::lit(1.0 / (rows * k) as f64);
    let bce = tape.sum(bce)?;
    let bce = tape.scale(bce, inv)?;
    let kld = tape.sum(kl_sample)?;
    let kld = tape.scale(kld, inv)?;
    Ok(LossTerms { loss, bce, kld })
}

/// Log importance weights `[B, B]` of the aggregate-posterior estimator.
pub fn tc_log_weights(batch: usize, dataset_size: usize, estimator: TcEstimator) -> Tensor<f64> {
    let n = dataset_size as f64;
    let bs = batch as f64;
    Tensor::from_fn(vec![batch, batch], |k| match estimator {
        TcEstimator::Mws => -(n * bs).ln(),
        TcEstimator::Mss if k / batch == k % batch => -n.ln(),
        TcEstimator::Mss => ((n - 1.0) / (n * (bs - 1.0))).ln(),
    })
}

/// β-TCVAE loss with explicit noise `eps: [B, J]`. `kld` reports
/// `MI + TC + dimension-wise KL`, the unweighted KL estimate.
pub fn tcvae_loss_on<T: Scalar>(
    model: &Vae<T>,
    tape: &mut Tape<T>,
    b: &Binding,
    x: &Tensor<T>,
    eps: &Tensor<T>,
    cfg: &ObjectiveConfig,
) -> Result<LossTerms> {
    let rows = x.rows();
    cfg.validate(rows)?;
    let (x, mu, lv) = encode_input(model, tape, b, x)?;
    let j = model.latent_dim();
    check_eps(eps, rows, j)?;
    let z = tape.reparameterize(mu, lv, eps.clone())?;
    let bce = row_bce(model, tape, b, z, &x)?;

    let terms = tc_terms(tape, z, mu, lv, rows, j, cfg)?;
    let inv_b = T::lit(1.0 / rows as f64);
    let bce = tape.sum(bce)?;
    let bce = tape.scale(bce, inv_b)?;
    let tc = tape.scale(terms.tc, T::lit(cfg.beta_weight))?;
    let reg = tape.add(terms.mi, tc)?;
    let reg = tape.add(reg, terms.dwkl)?;
    let loss = tape.add(bce, reg)?;
    let kld = tape.add(terms.mi, terms.tc)?;
    let kld = tape.add(kld, terms.dwkl)?;
    Ok(LossTerms { loss, bce, kld })
}

/// Batch means of the three parts of the KL decomposition.
pub struct TcTerms {
    pub mi: Var,
    pub tc: Var,
    pub dwkl: Var,
}

/// Index-code mutual information, total correlation and dimension-wise KL for
/// samples `z` of posteriors `(μ, lv)`, all `[B, J]`.
pub fn tc_terms<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    mu: Var,
    lv: Var,
    rows: usize,
    j: usize,
    cfg: &ObjectiveConfig,
) -> Result<TcTerms> {
    let w = tc_log_weights(rows, cfg.dataset_size, cfg.tc_estimator).cast::<T>();
    let w_dims = Tensor::from_fn(vec![rows, rows, j], |k| w.data()[k / j]);

    let lq_own = tape.gauss_log_pdf(z, mu, lv)?;
    let lq_own = tape.sum_axis(lq_own, 1)?;
    let lp = tape.std_normal_log_pdf(z)?;
    let lp = tape.sum_axis(lp, 1)?;

    let pair = tape.pairwise_gauss_log_pdf(z, mu, lv)?;
    let joint = tape.sum_axis(pair, 2)?;
    let joint = tape.add_const(joint, &w)?;
    let lq_z = tape.logsumexp_axis(joint, 1)?;
    let marg = tape.add_const(pair, &w_dims)?;
    let lq_dims = tape.logsumexp_axis(marg, 1)?;
    let lq_prod = tape.sum_axis(lq_dims, 1)?;

    let inv_b = T::lit(1.0 / rows as f64);
    let mut mean_diff = |a: Var, b: Var| -> Result<Var> {
        let d = tape.sub(a, b)?;
        let s = tape.sum(d)?;
        tape.scale(s, inv_b)
    };
    Ok(TcTerms {
        mi: mean_diff(lq_own, lq_z)?,
        tc: mean_diff(lq_z, lq_prod)?,
        dwkl: mean_diff(lq_prod, lp)?,
    })
}

/// Builds the configured objective for one minibatch, drawing `ε` from `rng`.
pub fn objective_on<T: Scalar>(
    model: &Vae<T>,
    tape: &mut Tape<T>,
    b: &Binding,
    x: &Tensor<T>,
    cfg: &ObjectiveConfig,
    rng: &mut RngState,
) -> Result<LossTerms> {
    let rows = x.rows();
    let eps: Tensor<T> = rng.standard_normal(vec![rows * cfg.samples_per_datum(), model.latent_dim()]);
    match cfg.kind {
        ObjectiveKind::Elbo => belbo_loss_on(model, tape, b, x, &eps, 1.0),
        ObjectiveKind::Beta => belbo_loss_on(model, tape, b, x, &eps, cfg.beta_weight),
        ObjectiveKind::Iwae => iwae_loss_on(model, tape, b, x, &eps, cfg.iwae_k),
        ObjectiveKind::Tcvae => tcvae_loss_on(model, tape, b, x, &eps, cfg),
    }
}

/// Value of `BCE + β·KL` for given noise, without keeping the tape.
pub fn belbo_loss<T: Scalar>(model: &Vae<T>, x: &Tensor<T>, eps: &Tensor<T>, beta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let terms = belbo_loss_on(model, &mut tape, &b, x, eps, beta)?;
    Ok(tape.value(terms.loss).item()?.as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(
            gaussian_kl(&t(&[1, 3], &[0.0; 3]), &t(&[1, 3], &[0.0; 3])).unwrap(),
            0.0
        );
        assert!((gaussian_kl(&t(&[1, 1], &[1.0]), &t(&[1, 1], &[0.0])).unwrap() - 0.5).abs() < 1e-15);
        let e = (std::f64::consts::E - 2.0) / 2.0;
        assert!((gaussian_kl(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[1.0])).unwrap() - e).abs() < 1e-15);
        assert!((e - 0.359_140_9).abs() < 1e-7);
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_at_the_prior() {
        for i in -20..=20 {
            for k in -20..=20 {
                let (m, l) = (i as f64 * 0.25, k as f64 * 0.25);
                let v = gaussian_kl(&t(&[1, 1], &[m]), &t(&[1, 1], &[l])).unwrap();
                assert!(v >= 0.0);
                assert_eq!(v == 0.0, i == 0 && k == 0, "mu={m} lv={l} kl={v}");
            }
        }
    }

    #[test]
    fn bernoulli_nll_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bernoulli_nll(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[1.0])).unwrap() - ln2).abs() < 1e-15);
        assert!((bernoulli_nll(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[0.5])).unwrap() - ln2).abs() < 1e-15);
        let logits = t(&[1, 2], &[15.0, -15.0]);
        assert!(bernoulli_nll(&logits, &t(&[1, 2], &[1.0, 0.0])).unwrap() < 1e-6);
    }

    #[test]
    fn tc_weights_are_normalized() {
        for est in [TcEstimator::Mss, TcEstimator::Mws] {
            let w = tc_log_weights(5, 100, est);
            for i in 0..5 {
                let s: f64 = w.row(i).iter().map(|v| v.exp()).sum();
                let expected = if est == TcEstimator::Mss { 1.0 } else { 0.01 };
                assert!((s - expected).abs() < 1e-12, "{est:?} {s}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ObjectiveConfig {
            kind: ObjectiveKind::Tcvae,
            dataset_size: 100,
            ..Default::default()
        };
        assert!(c.validate(1).is_err());
        assert!(c.validate(16).is_ok());
        c.beta_weight = 0.0;
        assert!(c.validate(16).is_err());
    }
}
