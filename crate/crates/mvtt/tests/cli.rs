//! End-to-end tests of the `mvtt` binary: file contracts, error paths and
//! bitwise reproducibility of the artifacts.

use std::path::Path;
use std::process::{Command, Output};

use mvtt::phantom::read_volume;

fn mvtt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvtt"))
        .args(args)
        .output()
        .expect("spawn mvtt")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn count_files(dir: &Path, suffix: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(suffix)
        })
        .count()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let root = dir.display().to_string();
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            // Manifests record absolute paths; strip the run-specific root.
            let bytes = match String::from_utf8(std::fs::read(e.path()).unwrap()) {
                Ok(text) => text.replace(&root, "<root>").into_bytes(),
                Err(err) => err.into_bytes(),
            };
            (e.file_name().to_string_lossy().to_string(), bytes)
        })
        .collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    entries
}

#[test]
fn phantom_writes_the_contracted_file_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let res = mvtt(&[
        "phantom",
        "--count",
        "4",
        "--dims",
        "4x8x8",
        "--seed",
        "42",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    assert_eq!(count_files(&out, "_intensity.vjson"), 4);
    assert_eq!(count_files(&out, "_anatomy.vjson"), 4);
    assert_eq!(count_files(&out, "_scar.vjson"), 4);
    assert!(out.join("manifest.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "phantom");
    assert_eq!(manifest["seed"], 42);
}

#[test]
fn phantom_with_zero_scar_patches_writes_empty_scar_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    assert_ok(&mvtt(&[
        "phantom",
        "--count",
        "1",
        "--dims",
        "4x8x8",
        "--scar-patches",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]));
    let scar = read_volume(&out.join("case_000_scar.vjson")).unwrap();
    assert!(scar.values().iter().all(|v| *v == 0.0));
}

#[test]
fn identical_phantom_invocations_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_ok(&mvtt(&[
            "--deterministic",
            "phantom",
            "--count",
            "2",
            "--dims",
            "4x8x8",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert_eq!(ba, bb, "{na} differs between runs");
    }
}

#[test]
fn one_epoch_of_training_logs_exactly_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&mvtt(&[
        "phantom",
        "--count",
        "1",
        "--dims",
        "3x8x8",
        "--out",
        data.to_str().unwrap(),
    ]));
    let run = dir.path().join("run");
    assert_ok(&mvtt(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "1",
        "--channels",
        "1",
    ]));
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(run.join("checkpoint.json").exists());
    assert!(run.join("checkpoint.blob").exists());
}

#[test]
fn the_second_epoch_runs_at_the_decayed_learning_rate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&mvtt(&[
        "phantom",
        "--count",
        "1",
        "--dims",
        "3x8x8",
        "--out",
        data.to_str().unwrap(),
    ]));
    let run = dir.path().join("run");
    assert_ok(&mvtt(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "2",
        "--channels",
        "1",
        "--lr",
        "0.001",
        "--lr-decay",
        "0.98",
    ]));
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let second: serde_json::Value = serde_json::from_str(log.lines().nth(1).unwrap()).unwrap();
    assert!((second["lr"].as_f64().unwrap() - 0.00098).abs() < 1e-12);
}

#[test]
fn training_on_a_missing_directory_fails_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let res = mvtt(&[
        "train",
        "--data",
        dir.path().join("nonexistent").to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert!(!res.status.success());
    assert!(!run.join("checkpoint.json").exists());
}

#[test]
fn inference_outputs_match_the_input_dims() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&mvtt(&[
        "phantom",
        "--count",
        "1",
        "--dims",
        "3x8x8",
        "--out",
        data.to_str().unwrap(),
    ]));
    let run = dir.path().join("run");
    assert_ok(&mvtt(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "1",
        "--channels",
        "1",
    ]));
    let pred = dir.path().join("pred");
    assert_ok(&mvtt(&[
        "infer",
        "--checkpoint",
        run.join("checkpoint.json").to_str().unwrap(),
        "--volume",
        data.join("case_000_intensity.vjson").to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
    ]));
    for suffix in ["ml", "mas", "anatomy_mask", "scar_mask"] {
        let v = read_volume(&pred.join(format!("case_000_{suffix}.vjson"))).unwrap();
        assert_eq!(v.dims, (3, 8, 8), "{suffix}");
    }
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(pred.join("case_000_manifest.json")).unwrap(),
    )
    .unwrap();
    assert!(manifest["config"]["case_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn a_corrupt_checkpoint_is_rejected_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&mvtt(&[
        "phantom",
        "--count",
        "1",
        "--dims",
        "3x8x8",
        "--out",
        data.to_str().unwrap(),
    ]));
    let ckpt = dir.path().join("broken.json");
    std::fs::write(&ckpt, "{\"format_version\": 1}").unwrap();
    let res = mvtt(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--volume",
        data.join("case_000_intensity.vjson").to_str().unwrap(),
        "--out",
        dir.path().join("pred").to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("manifest") || err.contains("malformed"), "{err}");
}

#[test]
fn evaluating_the_ground_truth_against_itself_gives_dice_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&mvtt(&[
        "phantom",
        "--count",
        "2",
        "--dims",
        "4x8x8",
        "--out",
        data.to_str().unwrap(),
    ]));
    // Predictions = the ground truth itself, under the predicted-mask names.
    let pred = dir.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    for i in 0..2 {
        for (gt_kind, pred_kind) in [("anatomy", "anatomy_mask"), ("scar", "scar_mask")] {
            for ext in ["vjson", "vraw"] {
                std::fs::copy(
                    data.join(format!("case_00{i}_{gt_kind}.{ext}")),
                    pred.join(format!("case_00{i}_{pred_kind}.{ext}")),
                )
                .unwrap();
            }
            // The header names its blob, so rewrite the reference.
            let header_path = pred.join(format!("case_00{i}_{pred_kind}.vjson"));
            let header = std::fs::read_to_string(&header_path)
                .unwrap()
                .replace(&format!("case_00{i}_{gt_kind}.vraw"), &format!("case_00{i}_{pred_kind}.vraw"));
            std::fs::write(&header_path, header).unwrap();
        }
    }
    let report_path = dir.path().join("report.json");
    assert_ok(&mvtt(&[
        "eval",
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        data.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    for v in report["volumes"].as_array().unwrap() {
        assert_eq!(v["anatomy"]["di"], 1.0);
        assert_eq!(v["scar"]["di"], 1.0);
    }
    assert!(report["aggregate"]["anatomy_dice_mean"].as_f64().is_some());
    assert!(report["aggregate"]["anatomy_dice_sd"].as_f64().is_some());
}

#[test]
fn export_slices_writes_one_pgm_per_axial_slice() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&mvtt(&[
        "phantom",
        "--count",
        "1",
        "--dims",
        "16x8x8",
        "--out",
        data.to_str().unwrap(),
    ]));
    let slices = dir.path().join("slices");
    assert_ok(&mvtt(&[
        "export-slices",
        "--input",
        data.join("case_000_intensity.vjson").to_str().unwrap(),
        "--out",
        slices.to_str().unwrap(),
    ]));
    assert_eq!(count_files(&slices, ".pgm"), 16);
    assert!(slices.join("slice_000.pgm").exists());
    assert!(slices.join("slice_015.pgm").exists());
}

#[test]
fn config_file_supplies_flags_and_the_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        format!(
            "{{\"count\": 3, \"dims\": \"4x8x8\", \"out\": {:?}}}",
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    // count comes from the file; the command line overrides dims.
    assert_ok(&mvtt(&[
        "phantom",
        "--config",
        cfg.to_str().unwrap(),
        "--dims",
        "2x8x8",
    ]));
    assert_eq!(count_files(&out, "_intensity.vjson"), 3);
    let v = read_volume(&out.join("case_000_intensity.vjson")).unwrap();
    assert_eq!(v.dims, (2, 8, 8));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{\"coutn\": 3}").unwrap();
    let res = mvtt(&["phantom", "--config", cfg.to_str().unwrap()]);
    assert!(!res.status.success());
}
