use std::path::Path;
use std::process::{Command, Output};

fn mtnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtnet")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--set", "image_size=16", "--set", "enc_dim=8", "--set", "enc_layers=2", "--set", "enc_heads=2",
    "--set", "dec_dim=8", "--set", "dec_layers=2", "--set", "dec_shared_layers=1", "--set", "dec_heads=2",
    "--set", "batch=4",
];

fn tiny_data(dir: &Path) -> String {
    let data = dir.join("data");
    let out = mtnet(&["gen-data", "--out", path(&data), "--n-train", "4", "--n-test", "2", "--seed", "7", "--size", "16"]);
    assert!(out.status.success(), "{}", stderr(&out));
    data.to_string_lossy().into_owned()
}

fn tiny_encoder(dir: &Path, data: &str) -> String {
    let enc = dir.join("enc").to_string_lossy().into_owned();
    let mut args = vec!["pretrain", "--data", data, "--out", &enc, "--epochs", "1"];
    args.extend_from_slice(TINY);
    let out = mtnet(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    enc
}

#[test]
fn gen_data_writes_twelve_images_for_six_ids() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let out = mtnet(&["gen-data", "--out", path(&data), "--n-train", "4", "--n-test", "2", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let count = |split: &str| std::fs::read_dir(data.join(split)).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ntf")).count();
    assert_eq!(count("train") + count("test"), 12);
    let manifest = std::fs::read_to_string(data.join("manifest.tsv")).unwrap();
    let ids: std::collections::BTreeSet<&str> = manifest.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(manifest.lines().count(), 12);
    assert_eq!(ids.len(), 6);
}

#[test]
fn eval_without_model_exits_one_with_usage() {
    let out = mtnet(&["eval", "--data", "d", "--out", "m.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let out = mtnet(&["pretrain", "--data", "d", "--out", "o", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(mtnet(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero_and_documents_augmentation() {
    let out = mtnet(&["finetune", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("sharpness"));
}

#[test]
fn unknown_config_key_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let out = mtnet(&["pretrain", "--data", &data, "--out", "unused", "--set", "nope=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nope"));
}

#[test]
fn flags_override_config_file_and_config_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\nepochs = 7\nmask_ratio = 0.5\n").unwrap();
    let enc = dir.path().join("enc");
    let mut args = vec!["pretrain", "--data", &data, "--out", path(&enc), "--config", path(&cfg), "--epochs", "1"];
    args.extend_from_slice(TINY);
    let out = mtnet(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = stderr(&out);
    assert!(log.contains("epochs = 1") && log.contains("mask_ratio = 0.5"), "{log}");
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 1);
    let saved = std::fs::read_to_string(enc.join("config.txt")).unwrap();
    assert!(saved.contains("kind = edge-mae") && saved.contains("encoder_hash = "));
}

#[test]
fn finetune_synth_impute_and_error_paths() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path());
    let enc = tiny_encoder(dir.path(), &data);
    let syn = dir.path().join("syn");
    let mt = ["--set", "base_channels=8", "--set", "small_stages=1", "--epochs", "1", "--batch", "2"];

    let mut args = vec!["finetune", "--data", &data, "--encoder", &enc, "--out", path(&syn), "--paired-ratio", "0.1"];
    args.extend_from_slice(&mt);
    let out = mtnet(&args);
    assert_eq!(out.status.code(), Some(1), "empty paired subset");
    assert!(stderr(&out).contains("paired"));

    let mut args = vec!["finetune", "--data", &data, "--encoder", &enc, "--out", path(&syn), "--no-augment"];
    args.extend_from_slice(&mt);
    let out = mtnet(&args);
    assert!(out.status.success(), "{}", stderr(&out));

    let input = Path::new(&data).join("test/000004_A.ntf");
    let y = dir.path().join("y.ntf");
    let out = mtnet(&["synth", "--model", path(&syn), "--input", path(&input), "--out", path(&y)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let img = mtnet::ntf::read_image(&y).unwrap();
    assert_eq!((img.height, img.width), (16, 16));
    assert!(img.pixels.iter().all(|v| *v > 0.0 && *v < 1.0));

    // A pretrained checkpoint is not a synthesizer.
    let out = mtnet(&["synth", "--model", &enc, "--input", path(&input), "--out", path(&y)]);
    assert_eq!(out.status.code(), Some(1));

    let panel = dir.path().join("panel");
    let out = mtnet(&["impute", "--encoder", &enc, "--input", path(&input), "--out-dir", path(&panel)]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["masked.pgm", "imputed.pgm", "edges.pgm"] {
        let bytes = std::fs::read(panel.join(f)).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"), "{f}");
    }
}

#[test]
fn corrupted_gradient_is_named() {
    let out = mtnet(&["grad-check", "--micro", "--corrupt", "dec.mask_token"]);
    assert_eq!(out.status.code(), Some(2));
    let log = stderr(&out);
    assert!(log.contains("stage1:dec.mask_token") && log.contains("stage2:dec.mask_token"), "{log}");
    assert!(!log.contains("finetune:"), "{log}");
}
