use std::path::Path;
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

fn spi(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spi"))
        .args(args)
        .env("SPI_OUT_DIR", out_dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn sample_image(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("sample.png");
    RgbImage::from_fn(20, 20, |x, y| Rgb([(x * 12) as u8, (y * 12) as u8, 128])).save(&path).unwrap();
    path
}

#[test]
fn recon_writes_image_and_score_line() {
    let dir = tempfile::tempdir().unwrap();
    let img = sample_image(dir.path());
    let out = spi(
        dir.path(),
        &["recon", img.to_str().unwrap(), "--method", "l2", "--sr", "0.25", "--seed", "7", "--set", "size=16"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("sample-l2.png").exists());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let v: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(v["method"], "l2");
    assert_eq!(v["sr"], 0.25);
    assert!(v["psnr_db"].as_f64().unwrap() > 10.0);
    let scores = std::fs::read_to_string(dir.path().join("scores.jsonl")).unwrap();
    assert_eq!(scores.trim(), stdout.trim());
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = spi(
        dir.path(),
        &["sweep", "--methods", "l2,dgi", "--set", "size=16", "--set", "test_count=2", "--set", "train_count=1", "--set", "val_count=1"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 6 * 8);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "sr=0.3\nsize=16\n").unwrap();
    let img = sample_image(dir.path());
    let out = spi(dir.path(), &["--config", conf.to_str().unwrap(), "--sr", "0.1", "recon", img.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8(out.stdout).unwrap().trim()).unwrap();
    assert_eq!(v["sr"], 0.1);
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = spi(dir.path(), &["--sr", "1.5", "basis"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1);
    assert!(err.starts_with("error kind=invalid_argument"));

    let out = spi(dir.path(), &["recon", "missing.png", "--method", "gan"]);
    assert!(!out.status.success());

    let out = spi(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("Usage"));
    let out = spi(dir.path(), &["basis", "--bogus"]);
    assert!(!out.status.success());
}

#[test]
fn basis_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let settings = [
        "--set", "size=16", "--set", "train_count=2", "--set", "val_count=1", "--set", "test_count=2",
        "--set", "epochs=1", "--set", "features=4", "--set", "blocks=1", "--set", "disc_base=2",
        "--set", "disc_stages=2", "--set", "extractor_layer=2", "--set", "extractor_divisor=16",
    ];
    let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().chain(settings.iter()).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| spi(dir.path(), &args.iter().map(String::as_str).collect::<Vec<_>>());

    let out = run(with(&["basis"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(with(&["train"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = String::from_utf8(out.stdout).unwrap().trim().to_string();
    assert!(Path::new(&ckpt).exists());
    let out = run(with(&["eval", "--method", "gan"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("gan,0.25,0"));
    let lines = std::fs::read_to_string(dir.path().join("eval-gan.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let out = run(with(&["bench", "--method", "gan", "--checkpoint", &ckpt, "--frames", "3"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
