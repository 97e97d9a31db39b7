//! `bvae`: train and evaluate bidirectional VAEs from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
//! 4 numeric abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bvae::io::{checkpoint_dtype, load_checkpoint, write_image_grid, Dataset};
use bvae::metrics::{downstream_train_eval, fit_gmm, ClassifierOptions, EmOptions, EvalReport};
use bvae::model::{InterpMode, ModelKind, Sampler, Vae};
use bvae::objectives::belbo_loss;
use bvae::rng::RngState;
use bvae::train::{evaluate, latent_means, load_datasets, parse_head, run, EvalOptions, TrainConfig, Trainer};
use bvae::{DType, Error, Result, Scalar, Tensor};

#[derive(Parser)]
#[command(name = "bvae", version, about = "Bidirectional variational autoencoders")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, repeatable (`--set latent=8`).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for initialization, shuffling and sampling
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for run artifacts
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, metrics.json and model.ckpt.
    Train {
        /// Report parameter counts without training.
        #[arg(long)]
        dry_run: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test set.
    Eval(CkptArg),
    /// Write originals and reconstructions of test images as a grid.
    Reconstruct {
        #[command(flatten)]
        ckpt: CkptArg,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Decode latent samples into a grid.
    Generate {
        #[command(flatten)]
        ckpt: CkptArg,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, value_enum, default_value_t = SamplerArg::Normal)]
        sampler: SamplerArg,
    },
    /// Decode an interpolation between two test images.
    Interpolate {
        #[command(flatten)]
        ckpt: CkptArg,
        #[arg(long, default_value_t = 0)]
        a: usize,
        #[arg(long, default_value_t = 1)]
        b: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Latent)]
        mode: ModeArg,
    },
    /// Train a classifier on latent means and report test accuracy.
    Classify {
        #[command(flatten)]
        ckpt: CkptArg,
        /// `linear` or `mlp<width>`; defaults to the configured head.
        #[arg(long)]
        head: Option<String>,
    },
    /// Print parameter counts of the configured architecture.
    Params,
    /// Compare the model with its unidirectional twin: parameter counts and
    /// the loss of the weight-tied twin on a shared batch.
    CompareTwin,
}

#[derive(Args)]
struct CkptArg {
    /// Checkpoint path; defaults to `<out_dir>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Normal,
    Gmm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Latent,
    Pixel,
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            TrainConfig::from_kv_text(&text)?
        }
        None => TrainConfig::default(),
    };
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn ensure_out_dir(cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", cfg.out_dir.display())))
}

fn checkpoint_path(cfg: &TrainConfig, arg: &CkptArg) -> PathBuf {
    arg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("model.ckpt"))
}

/// Work that needs a loaded model, generic over its precision.
trait WithModel {
    fn apply<T: Scalar>(self, model: Vae<T>) -> Result<()>;
}

fn with_checkpoint(path: &Path, job: impl WithModel) -> Result<()> {
    match checkpoint_dtype(path)? {
        DType::F32 => job.apply(load_checkpoint::<f32>(path)?.model),
        DType::F64 => job.apply(load_checkpoint::<f64>(path)?.model),
    }
}

fn test_set(cfg: &TrainConfig) -> Result<Dataset> {
    let test = Dataset::mnist(&cfg.data_dir, "test")?;
    if cfg.test_subsample == 0 {
        Ok(test)
    } else {
        test.subsample(cfg.test_subsample, cfg.seed.wrapping_add(1))
    }
}

struct EvalJob(TrainConfig);

impl WithModel for EvalJob {
    fn apply<T: Scalar>(self, model: Vae<T>) -> Result<()> {
        let cfg = self.0;
        let (train, test) = load_datasets(&cfg)?;
        let report = evaluate(&model, &test, Some(&train), &EvalOptions::from_config(&cfg))?;
        ensure_out_dir(&cfg)?;
        write_text(&cfg.out_dir.join("eval.json"), &report.to_json())?;
        write_text(
            &cfg.out_dir.join("eval.csv"),
            &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()),
        )?;
        println!("{}", report.to_json());
        Ok(())
    }
}

struct ReconstructJob(TrainConfig, usize);

impl WithModel for ReconstructJob {
    fn apply<T: Scalar>(self, model: Vae<T>) -> Result<()> {
        let (cfg, count) = (self.0, self.1);
        let x = test_set(&cfg)?.take(count)?.all::<T>();
        let recon = model.reconstruct(&x)?;
        let grid = Tensor::stack_rows(&[x.clone(), recon])?;
        ensure_out_dir(&cfg)?;
        let path = cfg.out_dir.join("reconstruct.pgm");
        write_image_grid(&grid, x.rows().max(1), &path)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

struct GenerateJob(TrainConfig, usize, SamplerArg);

impl WithModel for GenerateJob {
    fn apply<T: Scalar>(self, model: Vae<T>) -> Result<()> {
        let (cfg, count, sampler) = (self.0, self.1, self.2);
        let mut rng = RngState::new(cfg.seed);
        let images = match sampler {
            SamplerArg::Normal => model.generate(count, Sampler::StandardNormal, &mut rng)?,
            SamplerArg::Gmm => {
                let (train, _) = load_datasets(&cfg)?;
                let fit = fit_gmm(
                    &latent_means(&model, &train)?,
                    cfg.gmm_k,
                    &mut rng,
                    EmOptions::default(),
                )?;
                model.generate(count, Sampler::Gmm(Some(&fit.model)), &mut rng)?
            }
        };
        ensure_out_dir(&cfg)?;
        let path = cfg.out_dir.join("generate.pgm");
        write_image_grid(&images, 8, &path)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

struct InterpolateJob(TrainConfig, usize, usize, usize, InterpMode);

impl WithModel for InterpolateJob {
    fn apply<T: Scalar>(self, model: Vae<T>) -> Result<()> {
        let InterpolateJob(cfg, a, b, steps, mode) = self;
        let test = test_set(&cfg)?;
        if a >= test.len() || b >= test.len() {
            return Err(Error::Config(format!(
                "image index out of range for {} test images",
                test.len()
            )));
        }
        let path_imgs = model.interpolate(&test.batch::<T>(&[a])?, &test.batch::<T>(&[b])?, steps, mode)?;
        ensure_out_dir(&cfg)?;
        let path = cfg.out_dir.join("interpolate.pgm");
        write_image_grid(&path_imgs, steps, &path)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

struct ClassifyJob(TrainConfig);

impl WithModel for ClassifyJob {
    fn apply<T: Scalar>(self, model: Vae<T>) -> Result<()> {
        let cfg = self.0;
        let (train, test) = load_datasets(&cfg)?;
        let (Some(ytr), Some(yte)) = (train.labels(), test.labels()) else {
            return Err(Error::Data("classification needs labelled train and test sets".into()));
        };
        let opts = ClassifierOptions {
            seed: cfg.seed,
            ..ClassifierOptions::default()
        };
        let r = downstream_train_eval(
            (&latent_means(&model, &train)?, ytr),
            (&latent_means(&model, &test)?, yte),
            cfg.classifier,
            opts,
        )?;
        println!(
            "accuracy {:.4} after {} epochs (train loss {:.4})",
            r.accuracy, r.epochs, r.final_train_loss
        );
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn print_params(cfg: &TrainConfig) -> Result<()> {
    let arch = cfg.architecture()?;
    let b = Vae::<f32>::bidirectional(arch.clone(), cfg.seed)?.param_count();
    let t = Vae::<f32>::twin(arch, cfg.seed)?.param_count();
    println!("model  weights  logvar_weights  biases  total");
    println!(
        "bvae   {:>7}  {:>14}  {:>6}  {:>5}",
        b.weights, b.logvar_weights, b.biases, b.total
    );
    println!(
        "twin   {:>7}  {:>14}  {:>6}  {:>5}",
        t.weights, t.logvar_weights, t.biases, t.total
    );
    println!(
        "weight ratio {:.4}, total ratio {:.4}",
        b.weights as f64 / t.weights as f64,
        b.total as f64 / t.total as f64
    );
    Ok(())
}

fn compare_twin(cfg: &TrainConfig) -> Result<()> {
    print_params(cfg)?;
    let bvae = Vae::<f64>::bidirectional(cfg.architecture()?, cfg.seed)?;
    let twin = bvae.tied_twin()?;
    let mut rng = RngState::new(cfg.seed);
    let [c, h, w] = cfg.input;
    let rows = 8;
    let x = Tensor::<f64>::from_fn(vec![rows, c, h, w], |_| rng.uniform());
    let eps: Tensor<f64> = rng.standard_normal(vec![rows, cfg.latent]);
    let (lb, lt) = (belbo_loss(&bvae, &x, &eps, 1.0)?, belbo_loss(&twin, &x, &eps, 1.0)?);
    println!(
        "tied twin loss {lt:.12}, bvae loss {lb:.12}, difference {:.3e}",
        (lb - lt).abs()
    );
    Ok(())
}

fn train(cfg: TrainConfig, dry_run: bool, resume: Option<PathBuf>) -> Result<()> {
    let mut cfg = cfg;
    cfg.dry_run |= dry_run;
    let Some(path) = resume else {
        let report = run(&cfg)?;
        if cfg.dry_run {
            println!("{}", report.to_json());
        } else if let Some(eval) = &report.eval {
            println!("{}", eval.to_json());
        }
        return Ok(());
    };
    fn resume_as<T: Scalar>(cfg: TrainConfig, path: &Path) -> Result<()> {
        let (train, _) = load_datasets(&cfg)?;
        let mut trainer = Trainer::resume(load_checkpoint::<T>(path)?, Some(cfg.clone()), train)?;
        ensure_out_dir(&cfg)?;
        let csv = cfg.out_dir.join("metrics.csv");
        trainer.train_with(|t| write_text(&csv, &bvae::train::history_csv(t.history())))?;
        trainer.save(&cfg.out_dir.join("model.ckpt"))?;
        println!("trained to epoch {}", trainer.epoch());
        Ok(())
    }
    match checkpoint_dtype(&path)? {
        DType::F32 => resume_as::<f32>(cfg, &path),
        DType::F64 => resume_as::<f64>(cfg, &path),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    cfg.architecture()?;
    match cli.command {
        Command::Train { dry_run, resume } => train(cfg, dry_run, resume),
        Command::Eval(arg) => with_checkpoint(&checkpoint_path(&cfg, &arg), EvalJob(cfg.clone())),
        Command::Reconstruct { ckpt, count } => {
            with_checkpoint(&checkpoint_path(&cfg, &ckpt), ReconstructJob(cfg.clone(), count))
        }
        Command::Generate { ckpt, count, sampler } => {
            with_checkpoint(&checkpoint_path(&cfg, &ckpt), GenerateJob(cfg.clone(), count, sampler))
        }
        Command::Interpolate {
            ckpt,
            a,
            b,
            steps,
            mode,
        } => {
            let mode = match mode {
                ModeArg::Latent => InterpMode::Latent,
                ModeArg::Pixel => InterpMode::Pixel,
            };
            with_checkpoint(
                &checkpoint_path(&cfg, &ckpt),
                InterpolateJob(cfg.clone(), a, b, steps, mode),
            )
        }
        Command::Classify { ckpt, head } => {
            let mut cfg = cfg;
            if let Some(h) = head {
                cfg.classifier = parse_head(&h)?;
            }
            with_checkpoint(&checkpoint_path(&cfg, &ckpt), ClassifyJob(cfg.clone()))
        }
        Command::Params => print_params(&cfg),
        Command::CompareTwin => {
            if cfg.model == ModelKind::Twin {
                log::warn!("compare-twin always builds the bidirectional model and ties a twin to it");
            }
            compare_twin(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
