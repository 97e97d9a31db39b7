mod common;

use bvae::io::{decode_checkpoint, encode_checkpoint, Dataset};
use bvae::train::{history_csv, run_on, Trainer};
use bvae::Error;

use common::{blobs, mnist_dir, tiny_config};

#[test]
fn mnist_tiny_run_decreases_every_epoch() {
    let Some(dir) = mnist_dir() else {
        eprintln!("skipped: MNIST not found (set BVAE_MNIST_DIR)");
        return;
    };
    let data = Dataset::mnist(&dir, "train").unwrap().subsample(512, 1).unwrap();
    let mut cfg = bvae::train::TrainConfig::default();
    for pair in ["latent=8", "epochs=3", "batch_size=32", "seed=1"] {
        cfg.set_pair(pair).unwrap();
    }
    let mut t = Trainer::<f32>::new(cfg, data).unwrap();
    let losses: Vec<f64> = t.train().unwrap().iter().map(|m| m.loss).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn same_seed_gives_bitwise_identical_logs() {
    let logs: Vec<String> = (0..2)
        .map(|_| {
            let mut t = Trainer::<f32>::new(tiny_config(), blobs(96, 3)).unwrap();
            history_csv(t.train().unwrap())
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    let mut cfg = tiny_config();
    cfg.seed = 6;
    let mut other = Trainer::<f32>::new(cfg, blobs(96, 3)).unwrap();
    assert_ne!(history_csv(other.train().unwrap()), logs[0]);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let mut cfg = tiny_config();
    cfg.epochs = 3;
    let mut full = Trainer::<f64>::new(cfg.clone(), blobs(80, 4)).unwrap();
    full.train().unwrap();

    let mut first = Trainer::<f64>::new(cfg.clone(), blobs(80, 4)).unwrap();
    first.run_epoch().unwrap();
    let bytes = encode_checkpoint(first.model(), Some(first.optimizer()), &first.state()).unwrap();
    let ckpt = decode_checkpoint::<f64>(&bytes).unwrap();
    let mut resumed = Trainer::resume(ckpt, None, blobs(80, 4)).unwrap();
    assert_eq!(resumed.epoch(), 1);
    resumed.train().unwrap();

    assert_eq!(history_csv(resumed.history()), history_csv(full.history()));
    for ((_, a), (_, b)) in full.model().named_ids().into_iter().zip(resumed.model().named_ids()) {
        assert_eq!(full.model().value(a).data(), resumed.model().value(b).data());
    }
}

#[test]
fn every_objective_trains_to_finite_losses() {
    for (objective, extra) in [
        ("beta", "beta_weight=4"),
        ("iwae", "iwae_k=3"),
        ("tcvae", "beta_weight=6"),
    ] {
        let mut cfg = tiny_config();
        cfg.set_pair(&format!("objective={objective}")).unwrap();
        cfg.set_pair(extra).unwrap();
        cfg.epochs = 1;
        let mut t = Trainer::<f64>::new(cfg, blobs(49, 5)).unwrap();
        let m = t.run_epoch().unwrap();
        assert!(
            m.loss.is_finite() && m.bce.is_finite() && m.kld.is_finite(),
            "{objective}: {m:?}"
        );
    }
}

#[test]
fn twin_model_trains() {
    let mut cfg = tiny_config();
    cfg.set_pair("model=twin").unwrap();
    let mut t = Trainer::<f32>::new(cfg, blobs(64, 6)).unwrap();
    let h = t.train().unwrap();
    assert!(h.iter().all(|m| m.loss.is_finite()));
}

#[test]
fn diverging_run_aborts_with_diagnostics() {
    let mut cfg = tiny_config();
    cfg.set_pair("lr=1e12").unwrap();
    cfg.epochs = 30;
    let mut t = Trainer::<f32>::new(cfg, blobs(64, 7)).unwrap();
    let err = t.train().unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    let msg = err.to_string();
    assert!(msg.contains("lr") && msg.contains("grad norms"), "{msg}");
}

#[test]
fn dry_run_reports_parameters_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.out_dir = dir.path().to_path_buf();
    cfg.dry_run = true;
    cfg.epochs = 0;
    let empty = blobs(0, 0);
    let report = run_on::<f32>(&cfg, empty.clone(), &empty).unwrap();
    assert!(report.history.is_empty() && report.eval.is_none());
    assert!(report.params.total > 0);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json["params"]["total"], report.params.total);
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn full_run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.out_dir = dir.path().to_path_buf();
    cfg.eval_images = 10;
    cfg.nll_samples = 8;
    let report = run_on::<f32>(&cfg, blobs(64, 8), &blobs(20, 9)).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv, history_csv(&report.history));
    let eval = report.eval.unwrap();
    assert!(eval.au <= 3 && eval.ssim <= 1.0 && eval.downstream_accuracy.is_none());
    let ck = bvae::io::load_checkpoint::<f32>(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(ck.state.epoch, 2);
}

#[test]
fn mismatched_input_shape_is_a_data_error() {
    let mut cfg = tiny_config();
    cfg.set_pair("input=1x28x28").unwrap();
    cfg.set_pair("layers=dense8").unwrap();
    let err = Trainer::<f32>::new(cfg, blobs(8, 1)).err().unwrap();
    assert_eq!(err.exit_code(), 3);
}
