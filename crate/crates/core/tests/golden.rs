//! Regression pin for initialization, the RNG stream and the forward pass.
//! Regenerate with `BVAE_BLESS=1 cargo test --test golden` after an
//! intentional numerics change.

use std::path::Path;

use bvae::layers::GNova;
use bvae::model::{Architecture, ModelKind, Vae};
use bvae::rng::RngState;
use bvae::Tensor;
use serde_json::{json, Value};

fn snapshot() -> Value {
    let arch = Architecture::new([1, 8, 8], "conv4k4s2p1,res3,dense16", 3, GNova::new(1.0, 1.0).unwrap()).unwrap();
    let model = Vae::<f64>::new(ModelKind::Bvae, arch, 7).unwrap();
    let mut rng = RngState::new(7);
    let x = Tensor::<f64>::from_fn(vec![2, 1, 8, 8], |_| rng.uniform());
    let q = model.encode(&x).unwrap();
    let recon = model.decode(&q.mu).unwrap();
    json!({
        "mu": q.mu.data(),
        "logvar": q.logvar.data(),
        "recon_first_row": &recon.data()[..8],
    })
}

#[test]
fn seeded_tiny_model_matches_golden_encoding() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/encode_seed7.json");
    let got = snapshot();
    if std::env::var_os("BVAE_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap()).unwrap();
    }
    let want: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["mu", "logvar", "recon_first_row"] {
        let (g, w) = (got[key].as_array().unwrap(), want[key].as_array().unwrap());
        assert_eq!(g.len(), w.len(), "{key}");
        for (a, b) in g.iter().zip(w) {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{key}: {a} vs {b}");
        }
    }
}
