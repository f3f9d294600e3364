use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use styleaug::pipeline::{DatasetManifest, Origin};
use styleaug::synthetic::{self, BenchmarkConfig};
use styleaug::{imageio, Tensor};

fn styleaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styleaug")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(code(&styleaug(&["--help"])), 0);
    assert_eq!(code(&styleaug(&["no-such-command"])), 1);
    assert_eq!(code(&styleaug(&["augment", "--src", "x"])), 1);
}

#[test]
fn invalid_ratio_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("src/vehicle")).unwrap();
    let out = styleaug(&[
        "augment",
        "--src",
        s(&dir.path().join("src")),
        "--class",
        "vehicle",
        "--reference",
        "ref.png",
        "--ratio",
        "1.5",
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratio"));
}

#[test]
fn missing_model_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = styleaug(&[
        "evaluate",
        "--model",
        s(&dir.path().join("nothing")),
        "--test",
        s(dir.path()),
        "--positive-class",
        "vehicle",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn transfer_writes_final_image_snapshots_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let bench = BenchmarkConfig::default();
    let (content, reference) = (dir.path().join("c.png"), dir.path().join("r.png"));
    imageio::save_image(&synthetic::train_image(&bench, 0, 0), &content).unwrap();
    imageio::save_image(&synthetic::reference(&bench), &reference).unwrap();
    let out_dir = dir.path().join("out");
    let out = styleaug(&[
        "transfer",
        "--content",
        s(&content),
        "--reference",
        s(&reference),
        "--out",
        s(&out_dir),
        "--snapshots",
        "1,3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["final.png", "iter-01.png", "iter-03.png", "trace.json"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let trace: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(out_dir.join("trace.json")).unwrap()).unwrap();
    assert_eq!(trace.len(), 350);
}

#[test]
fn augment_train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bench = BenchmarkConfig {
        train_per_class: 10,
        pool_size: 4,
        test_per_set: 6,
        ..BenchmarkConfig::default()
    };
    let layout = synthetic::write_benchmark(&dir.path().join("data"), &bench).unwrap();
    let styled = dir.path().join("styled");
    let out = styleaug(&[
        "augment",
        "--src",
        s(&layout.train),
        "--class",
        "vehicle",
        "--reference",
        s(&layout.reference),
        "--ratio",
        "0.2",
        "--out",
        s(&styled),
        "--seed",
        "4",
        "--sequential",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = DatasetManifest::load(&styled).unwrap();
    assert_eq!(manifest.count("vehicle", Origin::Styled), 2);
    assert_eq!(manifest.count("vehicle", Origin::Original), 8);

    let cfg = dir.path().join("train.json");
    fs::write(&cfg, r#"{"epochs": 1, "runs": 1}"#).unwrap();
    let model = dir.path().join("model");
    let out = styleaug(&[
        "train",
        "--manifest",
        s(&styled),
        "--config",
        s(&cfg),
        "--out",
        s(&model),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = styleaug(&[
        "evaluate",
        "--model",
        s(&model),
        "--test",
        s(&layout.adverse_test),
        "--positive-class",
        "vehicle",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let tp = report["true_positive_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&tp));
    assert!(report["false_positive_rate"].is_null());
}

#[test]
fn corrupt_png_is_skipped_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    let mut rng = styleaug::seed::rng(0);
    for class in ["vehicle", "other"] {
        fs::create_dir_all(src.join(class)).unwrap();
        for i in 0..5 {
            let img = Tensor::uniform(&[3, 8, 8], 0.0, 1.0, &mut rng);
            imageio::save_image(&img, src.join(class).join(format!("{i}.png"))).unwrap();
        }
    }
    fs::write(src.join("vehicle/broken.png"), b"not a png").unwrap();
    let out = styleaug(&[
        "augment",
        "--src",
        s(&src),
        "--class",
        "vehicle",
        "--reference",
        s(&src.join("other/0.png")),
        "--ratio",
        "0.4",
        "--out",
        s(&dir.path().join("out")),
        "--size",
        "8",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.png"));
    let manifest = DatasetManifest::load(dir.path().join("out")).unwrap();
    assert_eq!(manifest.skipped.len(), 1);
    assert_eq!(manifest.count("vehicle", Origin::Styled), 2);
}
