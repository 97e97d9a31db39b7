//! Training loop, run configuration and evaluation driver.
//!
//! The loop minimizes the negative bound (`BCE + KLD` for the plain ELBO),
//! which is the same as ascending the bound itself.

mod config;
mod optim;

pub use config::{parse_head, TrainConfig};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, OneCycle};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::{save_checkpoint, Checkpoint, Dataset, TrainState};
use crate::layers::ParamCount;
use crate::metrics::{
    active_units, downstream_train_eval, importance_log_weights, mean_psnr, mean_ssim, nll_from_log_weights,
    ClassifierOptions, EvalReport, Head, AU_THRESHOLD,
};
use crate::model::Vae;
use crate::objectives::{objective_on, ObjectiveConfig};
use crate::rng::RngState;
use crate::tensor::{DType, Scalar, Tensor};

/// Offset separating the training-noise stream from the initialization seed.
const TRAIN_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Per-epoch training log entry. Losses are means over the epoch's images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub kld: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean pre-clip gradient norm over the epoch's steps.
    pub grad_norm: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,loss,bce,kld,lr,grad_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.loss, self.bce, self.kld, self.lr, self.grad_norm
        )
    }
}

/// Renders a metrics log as CSV text.
pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{}\n", EpochMetrics::CSV_HEADER);
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

/// Minibatch index lists for one epoch. Under `tcvae` a trailing batch of a
/// single image is dropped, since the estimator needs at least two.
fn batches(order: &[usize], batch_size: usize, min_rows: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).filter(|c| c.len() >= min_rows).collect()
}

pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    objective: ObjectiveConfig,
    model: Vae<T>,
    optimizer: AdamW<T>,
    schedule: OneCycle,
    rng: RngState,
    data: Dataset,
    epoch: usize,
    history: Vec<EpochMetrics>,
    last_grad_norms: Vec<f64>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let model = Vae::new(config.model, config.architecture()?, config.seed)?;
        let rng = RngState::new(config.seed.wrapping_add(TRAIN_STREAM));
        Self::assemble(config, data, model, None, rng, 0, Vec::new())
    }

    /// Continues a run from a checkpoint written by [`Trainer::save`]. When
    /// `config` is `None` the checkpoint's own configuration is used.
    pub fn resume(ckpt: Checkpoint<T>, config: Option<TrainConfig>, data: Dataset) -> Result<Self> {
        let stored: Option<TrainConfig> = serde_json::from_value(ckpt.state.extra["config"].clone()).ok();
        let config = config
            .or(stored)
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training configuration".into()))?;
        config.validate()?;
        let history: Vec<EpochMetrics> =
            serde_json::from_value(ckpt.state.extra["history"].clone()).unwrap_or_default();
        let snap = ckpt
            .state
            .rng
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no rng state".into()))?;
        let rng = RngState::restore(snap);
        let mut opt = ckpt.optimizer;
        if let Some(o) = opt.as_mut() {
            o.config = config.adamw();
        }
        Self::assemble(config, data, ckpt.model, opt, rng, ckpt.state.epoch, history)
    }

    fn assemble(
        config: TrainConfig,
        data: Dataset,
        model: Vae<T>,
        optimizer: Option<AdamW<T>>,
        rng: RngState,
        epoch: usize,
        history: Vec<EpochMetrics>,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if data.chw() != config.input {
            return Err(Error::Data(format!(
                "images are {:?} but the architecture expects {:?}",
                data.chw(),
                config.input
            )));
        }
        let objective = config.objective_config(data.len());
        objective.validate(config.batch_size.min(data.len()))?;
        let per_epoch = Self::steps_per_epoch(&config, data.len());
        if per_epoch == 0 {
            return Err(Error::config("no minibatch fits the training set"));
        }
        let schedule = OneCycle::new(config.lr, (per_epoch * config.epochs.max(1)) as u64)?;
        Ok(Self {
            optimizer: optimizer.unwrap_or_else(|| AdamW::new(config.adamw())),
            config,
            objective,
            model,
            schedule,
            rng,
            data,
            epoch,
            history,
            last_grad_norms: Vec::new(),
        })
    }

    fn min_rows(&self) -> usize {
        if self.objective.kind == crate::objectives::ObjectiveKind::Tcvae {
            2
        } else {
            1
        }
    }

    fn steps_per_epoch(config: &TrainConfig, n: usize) -> usize {
        let order: Vec<usize> = (0..n).collect();
        let min = if config.objective == crate::objectives::ObjectiveKind::Tcvae {
            2
        } else {
            1
        };
        batches(&order, config.batch_size, min).len()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Vae<T> {
        &self.model
    }

    pub fn into_model(self) -> Vae<T> {
        self.model
    }

    pub fn optimizer(&self) -> &AdamW<T> {
        &self.optimizer
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    fn diagnose(&self, e: Error, lr: f64) -> Error {
        match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!(
                    "{context} (epoch {}, step {}, lr {lr:.6e}, last grad norms per parameter set {:?})",
                    self.epoch + 1,
                    self.optimizer.t + 1,
                    self.last_grad_norms
                ),
            },
            other => other,
        }
    }

    /// One optimizer step on `x`; returns `(loss, bce, kld, grad_norm)`.
    fn step(&mut self, x: &Tensor<T>) -> Result<[f64; 4]> {
        let lr = self.schedule.lr(self.optimizer.t.min(self.schedule.total_steps - 1))?;
        let mut tape = Tape::new();
        let b = self.model.bind(&mut tape);
        let terms = objective_on(&self.model, &mut tape, &b, x, &self.objective, &mut self.rng)
            .map_err(|e| self.diagnose(e, lr))?;
        let value = |v| tape.value(v).item().map(|s: T| s.as_f64());
        let (loss, bce, kld) = (value(terms.loss)?, value(terms.bce)?, value(terms.kld)?);
        if !loss.is_finite() {
            return Err(self.diagnose(
                Error::NonFinite {
                    context: format!("training loss {loss}"),
                },
                lr,
            ));
        }
        let grads = tape.backward(terms.loss).map_err(|e| self.diagnose(e, lr))?;
        for set in self.model.param_sets_mut() {
            set.zero_grad();
            set.accumulate(&grads)?;
        }
        self.last_grad_norms = self.model.param_sets().iter().map(|s| s.grad_norm()).collect();
        let norm = self.last_grad_norms.iter().map(|n| n * n).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(self.diagnose(
                Error::NonFinite {
                    context: "gradient norm".into(),
                },
                lr,
            ));
        }
        if self.config.clip_grad > 0.0 {
            clip_grad_norm(self.model.param_sets_mut(), self.config.clip_grad);
        }
        self.optimizer.step(self.model.param_sets_mut(), lr)?;
        Ok([loss, bce, kld, norm])
    }

    /// Shuffles, runs every minibatch once and appends the epoch's metrics.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        self.rng.shuffle(&mut order);
        let (bs, min) = (self.config.batch_size, self.min_rows());
        let mut sums = [0.0; 3];
        let (mut rows, mut steps, mut norm_sum, mut lr) = (0usize, 0usize, 0.0, 0.0);
        for idx in batches(&order, bs, min) {
            let x = self.data.batch::<T>(idx)?;
            lr = self.schedule.lr(self.optimizer.t.min(self.schedule.total_steps - 1))?;
            let [loss, bce, kld, norm] = self.step(&x)?;
            let n = idx.len() as f64;
            sums[0] += loss * n;
            sums[1] += bce * n;
            sums[2] += kld * n;
            rows += idx.len();
            steps += 1;
            norm_sum += norm;
        }
        self.epoch += 1;
        let m = EpochMetrics {
            epoch: self.epoch,
            loss: sums[0] / rows as f64,
            bce: sums[1] / rows as f64,
            kld: sums[2] / rows as f64,
            lr,
            grad_norm: norm_sum / steps as f64,
        };
        log::info!(
            "epoch {}: loss {:.4} bce {:.4} kld {:.4} lr {:.3e}",
            m.epoch,
            m.loss,
            m.bce,
            m.kld,
            m.lr
        );
        self.history.push(m.clone());
        Ok(m)
    }

    /// Runs the remaining epochs up to `config.epochs`, calling `on_epoch`
    /// after each.
    pub fn train_with(&mut self, mut on_epoch: impl FnMut(&Self) -> Result<()>) -> Result<&[EpochMetrics]> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
            on_epoch(self)?;
        }
        Ok(&self.history)
    }

    pub fn train(&mut self) -> Result<&[EpochMetrics]> {
        self.train_with(|_| Ok(()))
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.optimizer.t,
            epoch: self.epoch,
            rng: Some(self.rng.snapshot()),
            extra: serde_json::json!({
                "config": self.config,
                "history": self.history,
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, Some(&self.optimizer), &self.state())
    }
}

/// Settings for [`evaluate`].
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub images: usize,
    pub nll_samples: usize,
    pub head: Head,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            images: cfg.eval_images,
            nll_samples: cfg.nll_samples,
            head: cfg.classifier,
            seed: cfg.seed,
        }
    }
}

/// Posterior means of every image as `[N, J]` doubles.
pub fn latent_means<T: Scalar>(model: &Vae<T>, data: &Dataset) -> Result<Tensor<f64>> {
    Ok(model.encode(&data.all::<T>())?.mu.cast())
}

/// Evaluates a model on the first `opts.images` test images. The downstream
/// classifier is trained on the latent means of `train` and scored on the
/// whole of `test`; it is skipped when either set lacks labels.
pub fn evaluate<T: Scalar>(
    model: &Vae<T>,
    test: &Dataset,
    train: Option<&Dataset>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let subset = test.take(opts.images)?;
    if subset.len() < 2 {
        return Err(Error::Data("evaluation needs at least two test images".into()));
    }
    let x = subset.all::<T>();
    let mut rng = RngState::new(opts.seed);
    let weights = importance_log_weights(model, &x, opts.nll_samples, &mut rng)?;
    let mut nll = 0.0;
    let mut neg_elbo = 0.0;
    for w in &weights {
        nll += nll_from_log_weights(w)?.0;
        neg_elbo -= w[0];
    }
    let n = weights.len() as f64;
    let means: Tensor<f64> = model.encode(&x)?.mu.cast();
    let recon = model.reconstruct(&x)?;
    let downstream_accuracy = match (train, train.and_then(Dataset::labels), test.labels()) {
        (Some(tr), Some(ytr), Some(yte)) => {
            let ztr = latent_means(model, tr)?;
            let zte = latent_means(model, test)?;
            let copts = ClassifierOptions {
                seed: opts.seed,
                ..ClassifierOptions::default()
            };
            Some(downstream_train_eval((&ztr, ytr), (&zte, yte), opts.head, copts)?.accuracy)
        }
        _ => None,
    };
    Ok(EvalReport {
        nll: nll / n,
        neg_elbo: neg_elbo / n,
        au: active_units(&means, AU_THRESHOLD)?,
        psnr_db: mean_psnr(&recon, &x.reshape(recon.shape().to_vec())?)?,
        ssim: mean_ssim(&recon, &x.reshape(recon.shape().to_vec())?)?,
        downstream_accuracy,
        param_total: model.param_count().total,
        images: subset.len(),
        nll_samples: opts.nll_samples,
    })
}

/// Outcome of [`run`].
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub params: ParamCount,
    pub history: Vec<EpochMetrics>,
    pub eval: Option<EvalReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Training and test sets as selected by the configuration.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let train = Dataset::mnist(&cfg.data_dir, "train")?;
    let test = Dataset::mnist(&cfg.data_dir, "test")?;
    let pick = |d: Dataset, n: usize, seed: u64| if n == 0 { Ok(d) } else { d.subsample(n, seed) };
    Ok((
        pick(train, cfg.train_subsample, cfg.seed)?,
        pick(test, cfg.test_subsample, cfg.seed.wrapping_add(1))?,
    ))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Trains on already loaded data and writes `metrics.csv` (rewritten after
/// every epoch), `model.ckpt` and `metrics.json` into `cfg.out_dir`.
pub fn run_on<T: Scalar>(cfg: &TrainConfig, train: Dataset, test: &Dataset) -> Result<RunReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let json_path = cfg.out_dir.join("metrics.json");
    if cfg.dry_run {
        let model = Vae::<T>::new(cfg.model, cfg.architecture()?, cfg.seed)?;
        let report = RunReport {
            config: cfg.clone(),
            params: model.param_count(),
            history: Vec::new(),
            eval: None,
        };
        write(&json_path, &report.to_json())?;
        return Ok(report);
    }
    let csv_path = cfg.out_dir.join("metrics.csv");
    let mut trainer = Trainer::<T>::new(cfg.clone(), train)?;
    trainer.train_with(|t| write(&csv_path, &history_csv(t.history())))?;
    trainer.save(&cfg.out_dir.join("model.ckpt"))?;
    let eval = evaluate(
        trainer.model(),
        test,
        Some(trainer.data()),
        &EvalOptions::from_config(cfg),
    )?;
    let report = RunReport {
        config: cfg.clone(),
        params: trainer.model().param_count(),
        history: trainer.history().to_vec(),
        eval: Some(eval),
    };
    write(&json_path, &report.to_json())?;
    Ok(report)
}

/// Loads the configured data and runs at the configured precision.
pub fn run(cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.dry_run {
        let empty = Dataset::new(
            Tensor::zeros(vec![0, cfg.input[0], cfg.input[1], cfg.input[2]]),
            None,
            "none",
        )?;
        return match cfg.precision {
            DType::F32 => run_on::<f32>(cfg, empty.clone(), &empty),
            DType::F64 => run_on::<f64>(cfg, empty.clone(), &empty),
        };
    }
    let (train, test) = load_datasets(cfg)?;
    match cfg.precision {
        DType::F32 => run_on::<f32>(cfg, train, &test),
        DType::F64 => run_on::<f64>(cfg, train, &test),
    }
}
