//! End-to-end exercise of the command-line surface on a miniature
//! configuration: generate a phantom cohort, train the translator,
//! synthesize, compare classifiers, sweep ratios, and re-render the
//! report — all through the binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn run(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_vscan"))
        .args(args)
        .output()
        .expect("binary runs");
    let text = format!(
        "{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.success(), text)
}

fn write_config(dir: &Path) -> PathBuf {
    let config = serde_json::json!({
        "seed": 404,
        "out_dir": dir.join("run").to_str().unwrap(),
        "threads": 0,
        "k_folds": 5,
        "experiment": "cli_micro",
        "phantom": {
            "n_cases": 20,
            "dims": [32, 32, 32],
            "class_balance": 0.25,
            "ct_signal_strength": 0.0,
            "pet_signal_strength": 1.0,
            "noise_sigma": 0.02,
            "seed": 0
        },
        "gan": {
            "l1_weight": 100.0,
            "lr_g": 0.001,
            "lr_d": 0.001,
            "epochs": 1,
            "batch": 8,
            "seed": 0
        },
        "schedule": {
            "epochs": 1,
            "lr0": 0.001,
            "decay_factor": 0.1,
            "decay_every": 25,
            "batch": 4,
            "seed": 0
        },
        "mint": {
            "blocks_per_stage": 1,
            "base_channels": 2,
            "num_classes": 2,
            "bn_eps": 1e-5,
            "bn_momentum": 0.1
        },
        "variant": "ct_only",
        "train_policy": "none",
        "test_policy": "none",
        "entries": [
            {"name": "mint_synth", "variant": "mint", "train_policy": "synth_pet", "test_policy": "synth_pet"},
            {"name": "ct_only", "variant": "ct_only", "train_policy": "none", "test_policy": "none"}
        ],
        "ratios": [0, 100],
        "cohort_manifest": null,
        "generator_checkpoint": null
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

#[test]
fn full_cli_pipeline_on_micro_config() {
    let dir = std::env::temp_dir().join(format!("vscan_cli_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let config = write_config(&dir);
    let cfg = config.to_str().unwrap();
    let run_dir = dir.join("run");

    // phantom gen
    let (ok, text) = run(&["phantom", "gen", cfg]);
    assert!(ok, "phantom gen failed:\n{text}");
    assert!(run_dir.join("cohort/manifest.csv").exists());
    assert!(run_dir.join("cohort/truths.json").exists());
    assert!(run_dir.join("config.lock").exists());

    // train-gan on the generated cohort
    let (ok, text) = run(&[
        "train-gan",
        cfg,
        "--out-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert!(ok, "train-gan failed:\n{text}");
    assert!(run_dir.join("generator.vxf").exists());
    assert!(run_dir.join("gan_losses.csv").exists());

    // synthesize PET for every case; produces an augmented manifest
    let (ok, text) = run(&["synthesize", cfg]);
    assert!(ok, "synthesize failed:\n{text}");
    let synth_manifest = run_dir.join("cohort_synth/manifest.csv");
    assert!(synth_manifest.exists());
    assert!(run_dir.join("synth_quality.csv").exists());

    // point the remaining stages at the synthesized cohort
    let mut cfg_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    cfg_json["cohort_manifest"] = serde_json::json!(synth_manifest.to_str().unwrap());
    std::fs::write(&config, serde_json::to_string_pretty(&cfg_json).unwrap()).unwrap();

    // train-clf (ct_only across folds) + checkpoints + metrics
    let (ok, text) = run(&["train-clf", cfg]);
    assert!(ok, "train-clf failed:\n{text}");
    assert!(run_dir.join("clf_ct_only_fold0.vxf").exists());
    assert!(run_dir.join("training_log.csv").exists());

    // evaluate reloads the checkpoints
    let (ok, text) = run(&["evaluate", cfg]);
    assert!(ok, "evaluate failed:\n{text}");

    // compare two entries on identical folds
    let (ok, text) = run(&["compare", cfg]);
    assert!(ok, "compare failed:\n{text}");
    assert!(run_dir.join("metrics.csv").exists());
    assert!(run_dir.join("pvalues.csv").exists());
    assert!(run_dir.join("report.txt").exists());
    assert!(text.contains("mint_synth"));

    // sweep emits csv + svg
    let (ok, text) = run(&["sweep", cfg]);
    assert!(ok, "sweep failed:\n{text}");
    let sweep_csv = std::fs::read_to_string(run_dir.join("sweep.csv")).unwrap();
    // |ratios| x 2 series rows + 1 baseline row + header
    assert_eq!(sweep_csv.lines().count(), 2 * 2 + 1 + 1, "{sweep_csv}");
    assert!(run_dir.join("sweep.svg").exists());

    // report re-renders from the stored CSVs
    let (ok, text) = run(&["report", cfg]);
    assert!(ok, "report failed:\n{text}");
    assert!(text.contains("gmean"));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn config_overrides_apply_and_lock_is_written() {
    let dir = std::env::temp_dir().join(format!("vscan_cli_ovr_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let config = write_config(&dir);
    let alt = dir.join("alt");
    let (ok, text) = run(&[
        "phantom",
        "gen",
        config.to_str().unwrap(),
        "--seed",
        "7",
        "--out-dir",
        alt.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert!(ok, "phantom gen with overrides failed:\n{text}");
    let lock = std::fs::read_to_string(alt.join("config.lock")).unwrap();
    assert!(lock.contains("\"seed\": 7"));
    assert!(lock.contains("\"threads\": 1"));
    std::fs::remove_dir_all(&dir).ok();
}
