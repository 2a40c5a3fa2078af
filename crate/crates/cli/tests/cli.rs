//! End-to-end runs of the `pim` binary on the synthetic fixture.

use std::path::Path;
use std::process::{Command, Output};

use pim_core::harness::RunConfig;

fn pim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("pim runs")
}

fn ok(args: &[&str]) -> String {
    let out = pim(args);
    assert!(
        out.status.success(),
        "pim {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    pim(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A one-epoch configuration small enough to train in seconds.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = RunConfig {
        resolution: 16,
        epochs: 1,
        batch_size: 8,
        block_channels: [4, 4, 4, 4],
        block_strides: [1, 2, 2, 2],
        fpn_size: 8,
        n_sel: [16, 8, 4, 2],
        ..RunConfig::toy()
    };
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn synth_curate_train_eval_explain() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    let cur = tmp.path().join("curated");
    let run = tmp.path().join("run");
    let cams = tmp.path().join("cams");

    ok(&["synth", "--out", s(&raw), "--size", "16", "--seed", "3"]);
    assert!(raw.join("annotations.csv").is_file());

    let summary = ok(&[
        "curate",
        "--annotations",
        s(&raw.join("annotations.csv")),
        "--images",
        s(&raw),
        "--config",
        s(&raw.join("curation.toml")),
        "--out",
        s(&cur),
    ]);
    assert!(summary.contains("test1"), "{summary}");
    let manifest = cur.join("manifest.jsonl");
    assert!(manifest.is_file());

    let cfg = tiny_config(tmp.path());
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
    ]);
    for f in ["model.ckpt", "model.json", "run_config.toml", "train_log.jsonl"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    // The run remembers its manifest, so eval needs no --manifest.
    let report = ok(&["eval", "--run", s(&run), "--split", "test1", "--checkpoint", "final"]);
    assert!(report.starts_with("test1: accuracy"), "{report}");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("test1_metrics.json")).unwrap()).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(run.join("test1_confusion.csv").is_file());

    let listing = ok(&[
        "explain",
        "--run",
        s(&run),
        "--manifest",
        s(&manifest),
        "--split",
        "test1",
        "--limit",
        "2",
        "--class",
        "fracture",
        "metal",
        "--layer",
        "fpn0",
        "--out",
        s(&cams),
    ]);
    assert!(listing.contains("4 heatmaps"), "{listing}");
    let pngs = std::fs::read_dir(&cams)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 4);

    // An unknown class is a configuration error.
    assert_eq!(
        code(&[
            "explain",
            "--run",
            s(&run),
            "--manifest",
            s(&manifest),
            "--class",
            "nope",
            "--out",
            s(&cams)
        ]),
        1
    );
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train", "--epochs", "many"]), 1);
    // Missing --out.
    assert_eq!(code(&["synth"]), 1);

    // A run directory without a checkpoint is bad data.
    assert_eq!(code(&["eval", "--run", s(tmp.path())]), 2);

    // An unreadable annotation table is bad data too.
    let bogus = tmp.path().join("a.csv");
    std::fs::write(&bogus, "not,a,table\n1,2,3\n").unwrap();
    let out = tmp.path().join("o");
    assert_eq!(
        code(&[
            "curate",
            "--annotations",
            s(&bogus),
            "--images",
            s(tmp.path()),
            "--out",
            s(&out)
        ]),
        2
    );

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "seed = \"x\"\n").unwrap();
    assert_eq!(code(&["kfold", "--config", s(&bad), "--out", s(&out)]), 1);
}
