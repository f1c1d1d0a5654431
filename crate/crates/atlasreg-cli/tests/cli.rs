//! End-to-end exercises of the command-line surface on smoke-sized configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_atlasreg")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("failed to spawn atlasreg")
}

fn smoke_config(dir: &Path, epochs: usize, train_n: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "schema_version": 1,
        "synth": {
            "image_size": 64,
            "counts": { "train": train_n, "val": 2, "test": 2 },
            "base_seed": 40
        },
        "network": {
            "encoder_channels_affine": [4, 8],
            "fc_widths": [16],
            "encoder_channels_dense": [4, 8],
            "decoder_channels_dense": [8, 8, 4]
        },
        "train": {
            "epochs": epochs,
            "learning_rate": 0.001,
            "seed": 40
        },
        "loss": { "lambda_diffusion": 0.8 }
    });
    let path = dir.join("smoke.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_train_eval_register_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), 2, 6);
    let data = tmp.path().join("ds");
    let run_dir = tmp.path().join("run");

    // gen
    let out = run(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--variant",
        "plain",
        "--out",
        data.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest_path = String::from_utf8(out.stdout).unwrap();
    assert!(manifest_path.trim().ends_with("manifest.json"));
    assert!(data.join("manifest.json").is_file());
    assert!(data.join("config.json").is_file());

    // train
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run_dir.join("checkpoint.ckpt");
    assert!(ckpt.is_file());
    let curves = std::fs::read_to_string(run_dir.join("curves.csv")).unwrap();
    assert!(curves.lines().count() > 1);

    // determinism: retrain into a second directory, byte-identical curves
    let run2 = tmp.path().join("run2");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run2.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let curves2 = std::fs::read_to_string(run2.join("curves.csv")).unwrap();
    assert_eq!(curves, curves2);

    // eval
    let eval_csv = run_dir.join("eval.csv");
    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "val",
        "--out",
        eval_csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&eval_csv).unwrap();
    assert!(text.contains("val,mean,"));

    // register the atlas itself
    let reg_dir = tmp.path().join("reg");
    let out = run(&[
        "register",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        data.join("atlas.nii.gz").to_str().unwrap(),
        "--atlas-dir",
        data.to_str().unwrap(),
        "--out",
        reg_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "warped_final.nii.gz",
        "warped_segmented.nii.gz",
        "field.nii.gz",
        "affine.json",
    ] {
        assert!(reg_dir.join(f).is_file(), "missing {f}");
    }
    // The affine JSON parses and has the homogeneous last row.
    let affine: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(reg_dir.join("affine.json")).unwrap())
            .unwrap();
    let m = affine["m"].as_array().unwrap();
    assert_eq!(m.len(), 9);
    assert_eq!(m[6].as_f64().unwrap(), 0.0);
    assert_eq!(m[7].as_f64().unwrap(), 0.0);
    assert_eq!(m[8].as_f64().unwrap(), 1.0);

    // report over the training run
    let out = run(&["report", "--run", run_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("report/run_loss.png").is_file());
}

#[test]
fn sweep_writes_two_row_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), 1, 4);
    let data = tmp.path().join("ds");
    let out = run(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let sweep_dir = tmp.path().join("sweep");
    let out = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        sweep_dir.to_str().unwrap(),
        "--lambda-diffusion",
        "0.2,0.8",
        "--lambda-scaling",
        "0",
        "--jobs",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    // Two cells, each with train+val rows; exactly one test row.
    let data_rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(
        data_rows.iter().filter(|l| l.contains(",train,")).count(),
        2
    );
    assert_eq!(data_rows.iter().filter(|l| l.contains(",val,")).count(), 2);
    assert_eq!(data_rows.iter().filter(|l| l.contains(",test,")).count(), 1);
    // Per-cell artifacts exist.
    assert!(sweep_dir.join("runs/two_stage_d0.2_s0/checkpoint.ckpt").is_file());
    assert!(sweep_dir.join("runs/two_stage_d0.8_s0/curves.csv").is_file());

    // report over the sweep
    let out = run(&["report", "--run", sweep_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(sweep_dir.join("report/summary.txt")).unwrap();
    assert!(summary.contains("two_stage"));
    // One PNG per cell's curves.
    assert!(sweep_dir.join("report/two_stage_d0.2_s0_loss.png").is_file());
    assert!(sweep_dir.join("report/two_stage_d0.8_s0_loss.png").is_file());
}

#[test]
fn exit_codes_are_stable() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown variant value: usage error -> exit 1.
    let out = run(&["gen", "--variant", "bogus"]);
    assert_eq!(out.status.code(), Some(1));

    // Config with unknown keys: exit 1.
    let bad = tmp.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{ "schema_version": 1, "mystery_section": {} }"#,
    )
    .unwrap();
    let out = run(&[
        "gen",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // Missing checkpoint file: I/O error -> exit 2.
    let out = run(&[
        "eval",
        "--checkpoint",
        tmp.path().join("nope.ckpt").to_str().unwrap(),
        "--data",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
