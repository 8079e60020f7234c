//! Command-line behavior: exit codes, flag contracts, and file outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtsk_core::metatrain::TrainConfig;
use mtsk_core::rng::Rng;
use mtsk_core::stgcn::{init_params, load_checkpoint};

fn mtsk() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mtsk"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mtsk_cli_{}_{}", name, std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_small_specs(dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let spec = r#"{
        "p": 10, "t": 40,
        "classes": [
            {"label": 0, "subjects": 6, "blocks": [[0,1,2,3]], "ar": 0.5},
            {"label": 1, "subjects": 6, "blocks": [], "ar": 0.15}
        ],
        "rho": 0.6, "ar": 0.2, "sigma": 1.0, "global_coupling": 0.5,
        "sites": ["a"], "emit_labels": true
    }"#;
    let tgt_spec = dir.join("tgt_spec.json");
    std::fs::write(&tgt_spec, spec).unwrap();
    let src_spec = dir.join("src_spec.json");
    std::fs::write(&src_spec, spec.replace("\"emit_labels\": true", "\"emit_labels\": false")).unwrap();
    let cfg = dir.join("train.json");
    std::fs::write(
        &cfg,
        r#"{"window_len": 20, "batch_size": 4, "inner_steps": 2, "outer_iters": 2, "seed": 5}"#,
    )
    .unwrap();
    let model = dir.join("model.json");
    std::fs::write(
        &model,
        r#"{"channels": [1,3,3,3], "head_channels": 3, "embed_dim": 6, "kernel": 3, "source_head": "projector"}"#,
    )
    .unwrap();
    (tgt_spec, src_spec, cfg, model)
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

#[test]
fn synth_refuses_non_empty_dir_without_force() {
    let dir = scratch("force");
    let (tgt_spec, _, _, _) = write_small_specs(&dir);
    let out_dir = dir.join("ds");
    let ok = mtsk()
        .args(["synth", "--spec"])
        .arg(&tgt_spec)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(exit_code(&ok), 0);
    // second run into the same non-empty dir: usage error
    let refused = mtsk()
        .args(["synth", "--spec"])
        .arg(&tgt_spec)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(exit_code(&refused), 2);
    // --force allows it
    let forced = mtsk()
        .args(["synth", "--spec"])
        .arg(&tgt_spec)
        .arg("--out")
        .arg(&out_dir)
        .arg("--force")
        .output()
        .unwrap();
    assert_eq!(exit_code(&forced), 0);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn invalid_generator_spec_exits_2() {
    let dir = scratch("badspec");
    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{"p": 1, "t": 5, "classes": [], "rho": 0.5, "ar": 0.2, "sigma": 1.0, "sites": ["a"]}"#).unwrap();
    let out = mtsk()
        .args(["synth", "--spec"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.join("x"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn invalid_train_config_exits_2() {
    let dir = scratch("badcfg");
    let (tgt_spec, src_spec, _, model) = write_small_specs(&dir);
    for (spec, out_name) in [(&tgt_spec, "tgt"), (&src_spec, "src")] {
        let out = mtsk()
            .args(["synth", "--spec"])
            .arg(spec)
            .arg("--out")
            .arg(dir.join(out_name))
            .output()
            .unwrap();
        assert_eq!(exit_code(&out), 0);
    }
    let bad_cfg = dir.join("bad.json");
    std::fs::write(&bad_cfg, r#"{"batch_size": 3}"#).unwrap(); // odd batch
    let out = mtsk()
        .args(["train", "--mode", "metsk", "--source"])
        .arg(dir.join("src"))
        .arg("--target")
        .arg(dir.join("tgt"))
        .arg("--config")
        .arg(&bad_cfg)
        .arg("--model-config")
        .arg(&model)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn zero_epoch_training_checkpoints_the_initialization() {
    let dir = scratch("zeroep");
    let (tgt_spec, src_spec, _, model) = write_small_specs(&dir);
    for (spec, out_name) in [(&tgt_spec, "tgt"), (&src_spec, "src")] {
        mtsk()
            .args(["synth", "--spec"])
            .arg(spec)
            .arg("--out")
            .arg(dir.join(out_name))
            .output()
            .unwrap();
    }
    let out = mtsk()
        .args(["train", "--mode", "metsk", "--source"])
        .arg(dir.join("src"))
        .arg("--target")
        .arg(dir.join("tgt"))
        .arg("--model-config")
        .arg(&model)
        .args([
            "--window-len", "20", "--batch-size", "4", "--seed", "5",
            "--warmup-epochs", "0", "--total-epochs", "0",
        ])
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let (cfg, params) = load_checkpoint(&dir.join("run").join("checkpoint.ckpt")).unwrap();
    let mut rng = Rng::stream(5, "init");
    let fresh = init_params(&cfg, &mut rng).unwrap();
    assert!(params.bits_equal(&fresh));
    // empty log except the header
    let log = std::fs::read_to_string(dir.join("run").join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn mel_mode_warns_when_source_is_supplied() {
    let dir = scratch("melwarn");
    let (tgt_spec, src_spec, cfg, model) = write_small_specs(&dir);
    for (spec, out_name) in [(&tgt_spec, "tgt"), (&src_spec, "src")] {
        mtsk()
            .args(["synth", "--spec"])
            .arg(spec)
            .arg("--out")
            .arg(dir.join(out_name))
            .output()
            .unwrap();
    }
    let out = mtsk()
        .args(["train", "--mode", "mel", "--source"])
        .arg(dir.join("src"))
        .arg("--target")
        .arg(dir.join("tgt"))
        .arg("--config")
        .arg(&cfg)
        .arg("--model-config")
        .arg(&model)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ignored"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn probe_requires_labels_and_checkpoint() {
    let dir = scratch("probeerr");
    let (_, src_spec, _, _) = write_small_specs(&dir);
    mtsk()
        .args(["synth", "--spec"])
        .arg(&src_spec) // unlabeled
        .arg("--out")
        .arg(dir.join("src"))
        .output()
        .unwrap();
    let out = mtsk()
        .args(["probe", "--dataset"])
        .arg(dir.join("src"))
        .args(["--connectivity", "--out"])
        .arg(dir.join("p"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2, "unlabeled dataset must be a usage error");

    // model probing without a checkpoint is a usage error
    let (tgt_spec, _, _, _) = write_small_specs(&dir);
    mtsk()
        .args(["synth", "--spec"])
        .arg(&tgt_spec)
        .arg("--out")
        .arg(dir.join("tgt"))
        .output()
        .unwrap();
    let out = mtsk()
        .args(["probe", "--dataset"])
        .arg(dir.join("tgt"))
        .arg("--out")
        .arg(dir.join("p2"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn connectivity_probe_separates_synthetic_classes() {
    let dir = scratch("connprobe");
    // strongly separable: large disjoint-block contrast
    let spec = r#"{
        "p": 10, "t": 256,
        "classes": [
            {"label": 0, "subjects": 10, "blocks": [[0,1,2,3,4]]},
            {"label": 1, "subjects": 10, "blocks": [[5,6,7,8,9]]}
        ],
        "rho": 0.8, "ar": 0.2, "sigma": 0.6, "global_coupling": 0.4,
        "sites": ["a"], "emit_labels": true
    }"#;
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, spec).unwrap();
    mtsk()
        .args(["synth", "--spec"])
        .arg(&spec_path)
        .arg("--out")
        .arg(dir.join("ds"))
        .output()
        .unwrap();
    let out = mtsk()
        .args(["probe", "--dataset"])
        .arg(dir.join("ds"))
        .args(["--connectivity", "--folds", "5", "--out"])
        .arg(dir.join("rep"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(dir.join("rep").join("probe_summary.txt")).unwrap();
    let mean_line = summary.lines().find(|l| l.starts_with("mean_auc:")).unwrap();
    let mean: f64 = mean_line.split(':').nth(1).unwrap().trim().parse().unwrap();
    assert!(mean > 0.9, "mean AUC {mean}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn default_synth_spec_has_reference_dimensions() {
    let dir = scratch("defspec");
    let out = mtsk()
        .args(["synth", "--out"])
        .arg(dir.join("ds"))
        .args(["--seed", "4"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ds = mtsk_core::connectome::load_dataset(&dir.join("ds")).unwrap();
    assert_eq!(ds.roi_count(), Some(116));
    assert_eq!(ds.subjects[0].time_points(), 231);
    let sites: std::collections::BTreeSet<&str> =
        ds.subjects.iter().map(|s| s.site.as_str()).collect();
    assert_eq!(sites.len(), 2);
    let labels: std::collections::BTreeSet<u8> =
        ds.subjects.iter().map(|s| s.label.unwrap()).collect();
    assert_eq!(labels.len(), 2);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn probe_defaults_use_five_folds() {
    let opts = mtsk_core::probe::ProbeOptions::default();
    assert_eq!(opts.folds, 5);
    assert_eq!(opts.grid, vec![0.01, 0.1, 1.0, 10.0, 100.0]);
}

#[test]
fn csv_format_roundtrips_through_cli() {
    let dir = scratch("csv");
    let (tgt_spec, _, _, _) = write_small_specs(&dir);
    mtsk()
        .args(["synth", "--spec"])
        .arg(&tgt_spec)
        .args(["--format", "csv", "--out"])
        .arg(dir.join("ds"))
        .output()
        .unwrap();
    assert!(dir.join("ds").join("s0000_c0.csv").exists());
    let loaded = mtsk_core::connectome::load_dataset(&dir.join("ds")).unwrap();
    assert_eq!(loaded.len(), 12);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn numerical_blowup_exits_3_with_state_dump() {
    let dir = scratch("abort");
    let (tgt_spec, src_spec, _, model) = write_small_specs(&dir);
    for (spec, out_name) in [(&tgt_spec, "tgt"), (&src_spec, "src")] {
        mtsk()
            .args(["synth", "--spec"])
            .arg(spec)
            .arg("--out")
            .arg(dir.join(out_name))
            .output()
            .unwrap();
    }
    // an absurd outer learning rate sends the parameters to infinity within
    // a couple of updates
    let out = mtsk()
        .args(["train", "--mode", "metsk", "--source"])
        .arg(dir.join("src"))
        .arg("--target")
        .arg(dir.join("tgt"))
        .arg("--model-config")
        .arg(&model)
        .args([
            "--window-len", "20", "--batch-size", "4", "--inner-steps", "1",
            "--outer-iters", "10", "--outer-lr", "1e200", "--inner-lr", "1e200", "--seed", "5",
        ])
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    // the partial log was still written
    assert!(dir.join("run").join("train_log.csv").exists());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn train_config_defaults_match_documentation() {
    // the config file may be omitted entirely; the defaults are the
    // documented recipe
    let cfg = TrainConfig::default();
    let json = serde_json::to_value(&cfg).unwrap();
    assert_eq!(json["inner_lr"], 0.01);
    assert_eq!(json["outer_lr"], 0.001);
    assert_eq!(json["inner_steps"], 25);
    assert_eq!(json["target_loss_weight"], 30.0);
    assert_eq!(json["temperature"], 30.0);
    assert_eq!(json["window_len"], 128);
    assert_eq!(json["batch_size"], 32);
    assert_eq!(json["warmup_epochs"], 20);
    assert_eq!(json["total_epochs"], 90);
    assert_eq!(json["mode"], "metsk");
}
