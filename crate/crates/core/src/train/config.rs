//! Run configuration in flat `key = value` form.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::GNova;
use crate::metrics::Head;
use crate::model::{parse_input_shape, Architecture, ModelKind};
use crate::objectives::{ObjectiveConfig, ObjectiveKind, TcEstimator};
use crate::tensor::DType;
use crate::train::AdamWConfig;

/// Everything a training or evaluation run depends on. Serialized in full
/// into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub input: [usize; 3],
    pub layers: String,
    pub latent: usize,
    pub gnova_alpha: f64,
    pub gnova_beta: f64,
    pub objective: ObjectiveKind,
    pub beta_weight: f64,
    pub iwae_k: usize,
    pub tc_estimator: TcEstimator,
    /// Peak learning rate of the one-cycle schedule.
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: DType,
    pub weight_decay: f64,
    /// Gradient-norm clip; 0 disables clipping.
    pub clip_grad: f64,
    pub data_dir: PathBuf,
    /// Seeded training subset size; 0 keeps every image.
    pub train_subsample: usize,
    /// Seeded test subset size; 0 keeps every image.
    pub test_subsample: usize,
    pub out_dir: PathBuf,
    /// Test images used for NLL, ELBO, AU, PSNR and SSIM.
    pub eval_images: usize,
    pub nll_samples: usize,
    pub gmm_k: usize,
    pub classifier: Head,
    pub dry_run: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Bvae,
            input: [1, 28, 28],
            layers: Architecture::DEFAULT_LAYERS.into(),
            latent: 16,
            gnova_alpha: 1.0,
            gnova_beta: 1.0,
            objective: ObjectiveKind::Elbo,
            beta_weight: 1.0,
            iwae_k: 5,
            tc_estimator: TcEstimator::Mss,
            lr: 3e-3,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            precision: DType::F32,
            weight_decay: AdamWConfig::default().weight_decay,
            clip_grad: 0.0,
            data_dir: PathBuf::from("data/mnist"),
            train_subsample: 0,
            test_subsample: 0,
            out_dir: PathBuf::from("runs/default"),
            eval_images: 100,
            nll_samples: 512,
            gmm_k: 10,
            classifier: Head::Linear,
            dry_run: false,
        }
    }
}

fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// `linear` or `mlp<width>` (`mlp` alone means width 100).
pub fn parse_head(s: &str) -> Result<Head> {
    match s {
        "linear" => Ok(Head::Linear),
        "mlp" => Ok(Head::Mlp(100)),
        _ => s
            .strip_prefix("mlp")
            .and_then(|w| w.parse().ok())
            .filter(|&w| w > 0)
            .map(Head::Mlp)
            .ok_or_else(|| Error::config(format!("unknown classifier head {s:?} (linear|mlp<width>)"))),
    }
}

fn head_name(h: Head) -> String {
    match h {
        Head::Linear => "linear".into(),
        Head::Mlp(w) => format!("mlp{w}"),
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "model",
        "input",
        "layers",
        "latent",
        "gnova_alpha",
        "gnova_beta",
        "objective",
        "beta_weight",
        "iwae_k",
        "tc_estimator",
        "lr",
        "batch_size",
        "epochs",
        "seed",
        "precision",
        "weight_decay",
        "clip_grad",
        "data_dir",
        "train_subsample",
        "test_subsample",
        "out_dir",
        "eval_images",
        "nll_samples",
        "gmm_k",
        "classifier",
        "dry_run",
    ];

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "model" => self.model = ModelKind::parse(value)?,
            "input" => self.input = parse_input_shape(value)?,
            "layers" => self.layers = value.into(),
            "latent" => self.latent = num(key, value)?,
            "gnova_alpha" => self.gnova_alpha = num(key, value)?,
            "gnova_beta" => self.gnova_beta = num(key, value)?,
            "objective" => self.objective = ObjectiveKind::parse(value)?,
            "beta_weight" => self.beta_weight = num(key, value)?,
            "iwae_k" => self.iwae_k = num(key, value)?,
            "tc_estimator" => self.tc_estimator = TcEstimator::parse(value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "precision" => {
                self.precision = DType::parse(value)
                    .ok_or_else(|| Error::config(format!("precision: unknown {value:?} (f32|f64)")))?
            }
            "weight_decay" => self.weight_decay = num(key, value)?,
            "clip_grad" => self.clip_grad = num(key, value)?,
            "data_dir" => self.data_dir = value.into(),
            "train_subsample" => self.train_subsample = num(key, value)?,
            "test_subsample" => self.test_subsample = num(key, value)?,
            "out_dir" => self.out_dir = value.into(),
            "eval_images" => self.eval_images = num(key, value)?,
            "nll_samples" => self.nll_samples = num(key, value)?,
            "gmm_k" => self.gmm_k = num(key, value)?,
            "classifier" => self.classifier = parse_head(value)?,
            "dry_run" => self.dry_run = boolean(key, value)?,
            other => return Err(Error::config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    /// Parses flat `key = value` text. Blank lines and `#` comments are
    /// skipped; later assignments win.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_pair(line)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let [c, h, w] = self.input;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("model", self.model.name().into());
        put("input", format!("{c}x{h}x{w}"));
        put("layers", self.layers.clone());
        put("latent", self.latent.to_string());
        put("gnova_alpha", self.gnova_alpha.to_string());
        put("gnova_beta", self.gnova_beta.to_string());
        put("objective", serde_plain(&self.objective));
        put("beta_weight", self.beta_weight.to_string());
        put("iwae_k", self.iwae_k.to_string());
        put("tc_estimator", serde_plain(&self.tc_estimator));
        put("lr", self.lr.to_string());
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("seed", self.seed.to_string());
        put("precision", self.precision.name().into());
        put("weight_decay", self.weight_decay.to_string());
        put("clip_grad", self.clip_grad.to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("train_subsample", self.train_subsample.to_string());
        put("test_subsample", self.test_subsample.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("eval_images", self.eval_images.to_string());
        put("nll_samples", self.nll_samples.to_string());
        put("gmm_k", self.gmm_k.to_string());
        put("classifier", head_name(self.classifier));
        put("dry_run", self.dry_run.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs == 0 && !self.dry_run {
            return Err(Error::config(
                "epochs must be at least 1 (use dry_run for a parameter report)",
            ));
        }
        if self.weight_decay.is_nan() || self.clip_grad.is_nan() || self.weight_decay < 0.0 || self.clip_grad < 0.0 {
            return Err(Error::config("weight_decay and clip_grad must be non-negative"));
        }
        if self.nll_samples == 0 {
            return Err(Error::config("nll_samples must be at least 1"));
        }
        self.architecture()?;
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let act = GNova::new(self.gnova_alpha, self.gnova_beta)?;
        Architecture::new(self.input, &self.layers, self.latent, act)
    }

    /// Objective settings for a training set of `dataset_size` images.
    pub fn objective_config(&self, dataset_size: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            kind: self.objective,
            beta_weight: self.beta_weight,
            iwae_k: self.iwae_k,
            dataset_size,
            tc_estimator: self.tc_estimator,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

fn serde_plain<S: Serialize>(v: &S) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_text_roundtrips() {
        let mut cfg = TrainConfig::default();
        cfg.set_pair("objective=tcvae").unwrap();
        cfg.set_pair("classifier=mlp32").unwrap();
        cfg.set_pair("precision=f64").unwrap();
        assert_eq!(TrainConfig::from_kv_text(&cfg.to_kv_text()).unwrap(), cfg);
    }

    #[test]
    fn text_skips_comments_and_reports_lines() {
        let cfg = TrainConfig::from_kv_text("# desk run\nlatent = 8  # small\n\nepochs=3\n").unwrap();
        assert_eq!((cfg.latent, cfg.epochs), (8, 3));
        let err = TrainConfig::from_kv_text("latent = 8\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn validation_rejects_bad_values() {
        for pair in ["lr=0", "batch_size=0", "epochs=0", "gnova_beta=-1", "latent=0"] {
            let mut cfg = TrainConfig::default();
            cfg.set_pair(pair).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{pair}");
        }
        let mut cfg = TrainConfig::default();
        cfg.set_pair("epochs=0").unwrap();
        cfg.set_pair("dry_run=true").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = TrainConfig::default();
        let text = cfg.to_kv_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, TrainConfig::KEYS);
    }
}
