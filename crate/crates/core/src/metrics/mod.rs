//! Evaluation: importance-sampled NLL, active units, PSNR, SSIM, downstream
//! classification and the post-hoc GMM latent sampler.

mod classify;
mod gmm;
mod image;
mod likelihood;

pub use classify::{downstream_train_eval, ClassifierOptions, ClassifierResult, Head};
pub use gmm::{fit_gmm, EmOptions, GmmFit, GmmModel, VARIANCE_FLOOR};
pub use image::{mean_psnr, mean_ssim, psnr, ssim};
pub use likelihood::{active_units, importance_log_weights, nll_from_log_weights, nll_importance, NllEstimate};

use serde::{Serialize, Serializer};

/// Threshold on posterior-mean variance for counting a unit as active.
pub const AU_THRESHOLD: f64 = 0.01;

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

/// Evaluation summary. Serializes to flat JSON (infinite PSNR as `null`) and
/// to one CSV row in the column order of [`EvalReport::CSV_HEADER`].
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub nll: f64,
    /// Mean negative single-sample ELBO on the same images.
    pub neg_elbo: f64,
    pub au: usize,
    #[serde(serialize_with = "finite_or_null")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub downstream_accuracy: Option<f64>,
    pub param_total: usize,
    pub images: usize,
    pub nll_samples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "nll,neg_elbo,au,psnr_db,ssim,downstream_accuracy,param_total,images,nll_samples";

    pub fn csv_row(&self) -> String {
        let psnr = if self.psnr_db.is_finite() {
            self.psnr_db.to_string()
        } else {
            "inf".into()
        };
        let acc = self.downstream_accuracy.map_or(String::new(), |a| a.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.nll, self.neg_elbo, self.au, psnr, self.ssim, acc, self.param_total, self.images, self.nll_samples
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
