//! End-to-end runs of the `advbench` binary.

use std::path::Path;
use std::process::{Command, Output};

use advbench::report::{self, RunManifest};

fn advbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advbench")).args(args).output().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_exits_one() {
    let out = advbench(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = advbench(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.advw");
    std::fs::write(&bogus, b"NOPE").unwrap();
    let csv = dir.path().join("x.csv");
    let out = advbench(&["sweep", "--ckpt", bogus.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
    assert!(!csv.exists());
}

#[test]
fn train_sweep_attack_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let ckpt = p("mlp.advw");
    let out = advbench(&["train", "--model", "mlp", "--epochs", "3", "--seed", "2", "--out", &ckpt]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = RunManifest::load(&report::manifest_path(Path::new(&ckpt))).unwrap();
    assert_eq!(manifest.seed, 2);
    assert_eq!(manifest.argv[0], "train");
    assert_eq!(manifest.dataset_fingerprint.as_ref().unwrap().len(), 64);
    assert_eq!(manifest.config["model"], "mlp");

    let sweep = p("mlp-fgsm.csv");
    let out = advbench(&[
        "sweep", "--ckpt", &ckpt, "--seed", "2", "--epsilons", "distill-grid", "--out", &sweep,
    ]);
    assert_eq!(out.status.code(), Some(0));
    let records = report::read_csv(Path::new(&sweep)).unwrap();
    let eps: Vec<f64> = records.iter().map(|r| r.epsilon).collect();
    assert_eq!(eps, [0.0, 0.007, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.3]);
    let m = RunManifest::load(&report::manifest_path(Path::new(&sweep))).unwrap();
    assert_eq!(m.config["epsilons"].as_array().unwrap().len(), 9);

    let one = p("cw.csv");
    let out = advbench(&[
        "attack", "--ckpt", &ckpt, "--seed", "2", "--attack", "cw", "--iters", "50", "--limit", "10", "--out", &one,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report::read_csv(Path::new(&one)).unwrap().len(), 1);

    let svg = p("curves.svg");
    let out = advbench(&["report", "--in", &sweep, &one, "--svg", &svg, "--series", "accuracy"]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 2);
    assert!(text.contains("mlp-fgsm") && text.contains("top-1 accuracy"));
}

#[test]
fn idx_data_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let ds = advbench::data::generate_synthetic(6, 20, 8, 1).unwrap();
    let ds = advbench::data::LabeledDataset::new(
        ds.images.map(|v| (v * 255.0).round() / 255.0),
        ds.labels,
        6,
        "q",
    )
    .unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    advbench::data::save_idx(&ds, &img, &lab).unwrap();
    let data = format!("idx:{},{}", img.display(), lab.display());
    let ckpt = dir.path().join("m.advw");
    let out = advbench(&["train", "--model", "mlp", "--data", &data, "--epochs", "1", "--out", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let state = report::load_checkpoint(&ckpt).unwrap();
    assert_eq!(state.spec.input_shape, [1, 8, 8]);
}
