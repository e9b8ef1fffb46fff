//! End-to-end checks of the `tse` binary: exit codes, prepare/train/
//! evaluate/extract/report flows on the tiny preset.

use std::path::{Path, PathBuf};
use std::process::Command;

fn tse() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tse"))
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tse_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn prepare(dir: &Path) {
    let out = tse()
        .args([
            "prepare",
            "--synthetic",
            "--speakers",
            "6",
            "--mixtures",
            "3",
            "--val-mixtures",
            "2",
            "--test-mixtures",
            "2",
            "--duration",
            "0.4",
            "--sample-rate",
            "8000",
            "--seed",
            "5",
            "--out",
        ])
        .arg(dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "prepare failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_exits_zero_and_bad_flags_exit_one() {
    let ok = tse().arg("--help").output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("prepare"));

    let bad = tse().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));

    let noargs = tse().output().unwrap();
    assert_eq!(noargs.status.code(), Some(1));
}

#[test]
fn prepare_is_idempotent_and_prints_counts() {
    let dir_a = temp_dir("prep_a");
    let dir_b = temp_dir("prep_b");
    prepare(&dir_a);
    prepare(&dir_b);
    for split in ["train", "val", "test"] {
        let a = std::fs::read(dir_a.join(format!("{split}.jsonl"))).unwrap();
        let b = std::fs::read(dir_b.join(format!("{split}.jsonl"))).unwrap();
        assert_eq!(a, b, "{split} manifest differs between identical runs");
    }
    assert!(dir_a.join("dataset.json").exists());
}

#[test]
fn prepare_without_mode_is_usage_error() {
    let dir = temp_dir("prep_usage");
    let out = tse().args(["prepare", "--out"]).arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_train_evaluate_extract_report_flow() {
    let data = temp_dir("flow_data");
    prepare(&data);
    let run = temp_dir("flow_run");

    // train: tiny preset, a couple of steps
    let out = tse()
        .args([
            "train",
            "--preset",
            "tiny",
            "--tf-map",
            "emb",
            "--contextual",
            "on",
            "--spk-emb",
            "off",
            "--epochs",
            "2",
            "--segment-seconds",
            "0.2",
            "--batch-size",
            "2",
            "--max-steps",
            "2",
            "--seed",
            "3",
            "--quiet",
        ])
        .arg("--manifest")
        .arg(data.join("train.jsonl"))
        .arg("--val-manifest")
        .arg(data.join("val.jsonl"))
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let ckpt = run.join("checkpoint.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("train_log.jsonl").exists());
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert!(config["config_hash"].is_string());

    // evaluate
    let results = run.join("results.jsonl");
    let out = tse()
        .args(["evaluate", "--workers", "2"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--manifest")
        .arg(data.join("test.jsonl"))
        .arg("--out")
        .arg(&results)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "evaluate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&results).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["kind"], "summary");
    // 2 test mixtures, both directions
    assert_eq!(header["rows"], 4);

    // extract one pair and check against evaluate's row
    let manifest = std::fs::read_to_string(data.join("test.jsonl")).unwrap();
    let entry: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let mix_rel = entry["mixture_path"].as_str().unwrap();
    let spk0 = entry["speaker_ids"][0].as_str().unwrap();
    let enr_rel = entry["enrollment_paths"][spk0].as_str().unwrap();
    let est_path = run.join("estimate.wav");
    let out = tse()
        .arg("extract")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--mixture")
        .arg(data.join(mix_rel))
        .arg("--enrollment")
        .arg(data.join(enr_rel))
        .arg("--out")
        .arg(&est_path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "extract failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    // recompute SI-SDRi from the written estimate; must match evaluate's row
    let est = tse_core::dsp::read_wav(&est_path).unwrap();
    let mixture = tse_core::dsp::read_wav(&data.join(mix_rel)).unwrap();
    let source0 = tse_core::dsp::read_wav(
        &data.join(entry["source_paths"][0].as_str().unwrap()),
    )
    .unwrap();
    let si_sdri =
        tse_core::eval::si_sdri(&est.samples, &mixture.samples, &source0.samples, false).unwrap();
    let row: serde_json::Value = serde_json::from_str(
        text.lines()
            .find(|l| l.contains(&format!("{mix_rel}#spk0")))
            .expect("row for first test mixture"),
    )
    .unwrap();
    let reported = row["si_sdri"].as_f64().unwrap();
    assert!(
        (si_sdri - reported).abs() < 1e-6,
        "extract {si_sdri} vs evaluate {reported}"
    );

    // report over the single results file
    let report_dir = temp_dir("flow_report");
    let out = tse()
        .arg("report")
        .arg("--results")
        .arg(&results)
        .arg("--out")
        .arg(&report_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "report failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let md = std::fs::read_to_string(report_dir.join("ablation.md")).unwrap();
    assert!(md.contains("SI-SDRi"));
    assert!(report_dir.join("ablation.csv").exists());
}

#[test]
fn evaluate_missing_checkpoint_is_data_error() {
    let data = temp_dir("miss_data");
    prepare(&data);
    let out = tse()
        .args(["evaluate"])
        .arg("--checkpoint")
        .arg(data.join("nope.ckpt"))
        .arg("--manifest")
        .arg(data.join("test.jsonl"))
        .arg("--out")
        .arg(data.join("r.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_rejects_corrupt_results() {
    let dir = temp_dir("report_bad");
    let bad = dir.join("bad.jsonl");
    std::fs::write(&bad, "this is not json\n").unwrap();
    let out = tse()
        .arg("report")
        .arg("--results")
        .arg(&bad)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn features_dump_writes_arrays_and_meta() {
    let data = temp_dir("dump_data");
    prepare(&data);
    let out_dir = temp_dir("dump_out");
    let out = tse()
        .args([
            "features",
            "dump",
            "--preset",
            "tiny",
            "--seed",
            "3",
            "--limit",
            "1",
        ])
        .arg("--manifest")
        .arg(data.join("train.jsonl"))
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "dump failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut subdirs: Vec<_> = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect();
    subdirs.sort();
    assert_eq!(subdirs.len(), 2, "one dump per direction");
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(subdirs[0].join("meta.json")).unwrap())
            .unwrap();
    assert!(meta["config_hash"].is_string());
    let shape = meta["shapes"]["tf_map"].as_array().unwrap();
    let rows = shape[0].as_u64().unwrap() as usize;
    let cols = shape[1].as_u64().unwrap() as usize;
    let bin = std::fs::read(subdirs[0].join("tf_map.bin")).unwrap();
    assert_eq!(bin.len(), rows * cols * 4);
    assert!(subdirs[0].join("contextual.bin").exists());
}

#[test]
fn config_file_seeds_defaults() {
    let data = temp_dir("cfg_data");
    prepare(&data);
    let run = temp_dir("cfg_run");
    let cfg_path = run.join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{"seed": 3, "train": {"epochs": 2, "segment_seconds": 0.2, "batch_size": 2, "max_steps": 1},
            "features": {"tf_map": "off", "contextual": false, "speaker_embedding": true}}"#,
    )
    .unwrap();
    let out = tse()
        .arg("--config")
        .arg(&cfg_path)
        .args(["train", "--preset", "tiny", "--quiet"])
        .arg("--manifest")
        .arg(data.join("train.jsonl"))
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "train with config failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("spk"), "feature label from config: {stdout}");
}
