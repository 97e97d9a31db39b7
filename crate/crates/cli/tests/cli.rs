use std::process::Command;

fn bvae() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bvae"))
}

#[test]
fn params_reports_both_models() {
    let out = bvae().arg("params").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(
        text.contains("bvae") && text.contains("twin") && text.contains("weight ratio 0.5000"),
        "{text}"
    );
}

#[test]
fn unknown_key_exits_with_config_code() {
    let out = bvae().args(["--set", "bogus=1", "params"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn missing_data_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = bvae()
        .args(["--set", &format!("data_dir={}", missing.display()), "--out-dir"])
        .arg(dir.path())
        .args(["train"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dry_run_prints_parameter_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = bvae()
        .arg("--out-dir")
        .arg(dir.path())
        .args(["train", "--dry-run"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: String = String::from_utf8(out.stdout).unwrap();
    assert!(json.contains("\"params\""), "{json}");
    assert!(dir.path().join("metrics.json").exists());
}
