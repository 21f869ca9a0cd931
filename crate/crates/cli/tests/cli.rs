use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use advsr_cli::commands::{self, SUMMARY_HEADER};
use advsr_cli::config::ExperimentConfig;
use advsr_cli::layout::{MANIFEST_FILE, REPORT_JSON, SAMPLES_CSV, SUMMARY_CSV, WEIGHTS_FILE};
use advsr_cli::manifest::{sha256_file, RunManifest};
use advsr_cli::{Experiment, Phase};
use advsr_core::data::{read_split, SplitKind};
use advsr_core::eval::{samples_from_csv, EvalReport};

const TINY: &str = r#"{
  "data": { "seed": 5, "hr_size": 16, "train_per_class": 2, "val_per_class": 1, "test_per_class": 2 },
  "classifier": {
    "arch": { "classes": 8, "input_size": 16, "widths": [4, 4] },
    "train": { "epochs": 2, "batch_size": 8, "lr": 0.001 }
  },
  "sr": {
    "arch": { "kernels": [3, 3, 3], "widths": [4, 4] },
    "clean": { "epochs": 1, "batch_size": 8, "lr": 0.001 },
    "advsr": { "epochs": 2, "batch_size": 8, "lr": 0.001 },
    "r": 0.5,
    "r_grid": [0.1, 1.0]
  }
}"#;

fn tiny(root: &Path) -> Experiment {
    Experiment::new(
        ExperimentConfig::from_json(TINY).unwrap(),
        Some(root.to_path_buf()),
    )
    .unwrap()
}

fn pipeline(root: &Path) -> Experiment {
    let exp = tiny(root);
    commands::gen_data(&exp).unwrap();
    for phase in Phase::ALL {
        commands::train(&exp, phase).unwrap();
    }
    commands::eval(&exp, None).unwrap();
    exp
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_advsr"));
    c.env_remove("ADVSR_SEED");
    c
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn default_config_round_trips_and_validates() {
    let cfg = ExperimentConfig::default();
    cfg.validate().unwrap();
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    assert_eq!(cfg.sr.r_grid, vec![0.05, 0.1, 0.5, 1.0, 5.0]);
    assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
}

#[test]
fn unknown_keys_and_bad_values_rejected() {
    for bad in [
        r#"{ "dat": {} }"#,
        r#"{ "data": { "seed": 1, "colour": 3 } }"#,
        r#"{ "sr": { "arch": { "kernels": [5, 3, 5], "widths": [16, 8], "depth": 3 } } }"#,
        r#"{ "attack": { "source": 2, "target": 2 } }"#,
        r#"{ "attack": { "source": 0, "target": 9 } }"#,
        r#"{ "data": { "hr_size": 32 } }"#,
        r#"{ "sr": { "r_grid": [-1.0] } }"#,
    ] {
        assert!(ExperimentConfig::from_json(bad).is_err(), "{bad}");
    }
}

#[test]
fn gen_data_counts_sizes_and_stability() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace(
        r#""train_per_class": 2, "val_per_class": 1, "test_per_class": 2"#,
        r#""train_per_class": 10, "val_per_class": 2, "test_per_class": 2"#,
    );
    let exp = Experiment::new(
        ExperimentConfig::from_json(&text).unwrap(),
        Some(dir.path().into()),
    )
    .unwrap();
    let m1 = commands::gen_data(&exp).unwrap();
    for (kind, n) in [
        (SplitKind::Train, 80),
        (SplitKind::Val, 16),
        (SplitKind::Test, 16),
    ] {
        let path = exp.layout.split(kind);
        let split = read_split(&path, kind, 5).unwrap();
        assert_eq!(split.len(), n);
        // 20-byte header, then per record a u16 label and HR + LR planes.
        let record = 2 + 8 * (3 * 16 * 16 + 3 * 8 * 8);
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, 20 + n * record);
    }
    let m2 = commands::gen_data(&exp).unwrap();
    assert_eq!(m1.outputs, m2.outputs);
    assert!(exp.layout.data_dir().join(MANIFEST_FILE).is_file());
}

#[test]
fn advsr_without_dependencies_names_them() {
    let dir = tempfile::tempdir().unwrap();
    let exp = tiny(dir.path());
    commands::gen_data(&exp).unwrap();
    let err = format!("{:#}", commands::train(&exp, Phase::SrAdvsr).unwrap_err());
    assert!(err.contains("classifier/weights.advw"), "{err}");
    assert!(err.contains("sr-clean/weights.advw"), "{err}");
    assert!(err.contains("advsr train --phase sr-clean"), "{err}");
    assert!(!exp.layout.weights(Phase::SrAdvsr).exists());

    let empty = tempfile::tempdir().unwrap();
    let err = format!(
        "{:#}",
        commands::train(&tiny(empty.path()), Phase::Classifier).unwrap_err()
    );
    assert!(err.contains("gen-data"), "{err}");
}

#[test]
fn pipeline_is_deterministic_and_consistent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ea = pipeline(a.path());
    let eb = pipeline(b.path());
    for phase in Phase::ALL {
        assert_eq!(
            sha256_file(&ea.layout.weights(phase)).unwrap(),
            sha256_file(&eb.layout.weights(phase)).unwrap(),
            "{phase}"
        );
    }
    for label in ["sr-clean", "sr-advsr"] {
        for f in [REPORT_JSON, SAMPLES_CSV, "report.md"] {
            assert_eq!(
                fs::read(ea.layout.eval_dir(label).join(f)).unwrap(),
                fs::read(eb.layout.eval_dir(label).join(f)).unwrap()
            );
        }
    }

    // Lambda in the manifest agrees with its logged inputs.
    let m = RunManifest::load(&ea.layout.phase_dir(Phase::SrAdvsr).join(MANIFEST_FILE)).unwrap();
    let bal = m.balance.unwrap();
    assert_eq!(bal.r, 0.5);
    assert!((bal.lambda - bal.r * bal.l0_advce / bal.l0_sr).abs() <= 1e-12 * bal.lambda.abs());
    assert!(m.inputs.contains_key("classifier/weights.advw"));
    assert_eq!(
        m.outputs["sr-advsr/weights.advw"],
        sha256_file(&ea.layout.weights(Phase::SrAdvsr)).unwrap()
    );

    // Clean and AdvSR share one table, Clean first.
    let table = fs::read_to_string(ea.layout.eval_root().join("table.md")).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("| Clean |") && rows[1].starts_with("| AdvSR |"));

    // Re-evaluating gives identical bytes, and the JSON matches the CSV rows.
    let report_path = ea.layout.eval_dir("sr-clean").join(REPORT_JSON);
    let before = fs::read(&report_path).unwrap();
    commands::eval(&ea, Some(&ea.layout.weights(Phase::SrClean))).unwrap();
    assert_eq!(fs::read(&report_path).unwrap(), before);
    let report = EvalReport::from_json(&String::from_utf8(before).unwrap()).unwrap();
    let samples = samples_from_csv(
        &fs::read_to_string(ea.layout.eval_dir("sr-clean").join(SAMPLES_CSV)).unwrap(),
    )
    .unwrap();
    assert_eq!(
        EvalReport::aggregate("Clean", &samples, &ea.config.attack_spec().unwrap()).unwrap(),
        report
    );

    // The combined report is byte-stable and its digests trace to the JSON.
    let out = tempfile::tempdir().unwrap();
    let p1 = commands::report(&[a.path().into(), b.path().into()], out.path()).unwrap();
    let first = fs::read_to_string(&p1).unwrap();
    let p2 = commands::report(&[a.path().into(), b.path().into()], out.path()).unwrap();
    assert_eq!(fs::read_to_string(p2).unwrap(), first);
    let digest = sha256_file(&report_path).unwrap();
    assert!(first.contains(&digest));
    let eval_rows: Vec<&str> = first
        .lines()
        .filter(|l| l.contains(" / Clean |") || l.contains(" / AdvSR |"))
        .collect();
    assert_eq!(eval_rows.len(), 4);
    let config_digest = &m.config_sha256;
    assert!(first.contains(config_digest.as_str()));
}

#[test]
fn eval_rejects_architecture_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let exp = pipeline(dir.path());
    let other = TINY.replace(
        r#""widths": [4, 4] },
    "clean""#,
        r#""widths": [4, 2] },
    "clean""#,
    );
    let exp2 = Experiment::new(
        ExperimentConfig::from_json(&other).unwrap(),
        Some(dir.path().into()),
    )
    .unwrap();
    let err = format!(
        "{:#}",
        commands::eval(&exp2, Some(&exp.layout.weights(Phase::SrClean))).unwrap_err()
    );
    assert!(err.contains("architecture mismatch"), "{err}");
}

#[test]
fn sweep_rows_match_standalone_runs() {
    let dir = tempfile::tempdir().unwrap();
    let exp = pipeline(dir.path());
    assert!(commands::sweep_r(&exp, Some(&[])).is_err());
    let rows = commands::sweep_r(&exp, None).unwrap();
    assert_eq!(rows.iter().map(|r| r.r).collect::<Vec<_>>(), vec![0.1, 1.0]);
    let summary = fs::read_to_string(exp.layout.sweep_dir().join(SUMMARY_CSV)).unwrap();
    assert_eq!(summary.lines().next(), Some(SUMMARY_HEADER));
    assert_eq!(summary.lines().count(), 3);

    // Standalone train + eval at r = 1.0 in a second run directory.
    let other = tempfile::tempdir().unwrap();
    let solo = tiny(other.path());
    for sub in ["data", "classifier", "sr-clean"] {
        let (from, to) = (dir.path().join(sub), other.path().join(sub));
        fs::create_dir_all(&to).unwrap();
        for e in fs::read_dir(from).unwrap() {
            let e = e.unwrap();
            fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    }
    let mut cfg = solo.config.clone();
    cfg.sr.r = 1.0;
    let solo = Experiment::new(cfg, Some(other.path().into())).unwrap();
    commands::train(&solo, Phase::SrAdvsr).unwrap();
    let report = commands::eval(&solo, Some(&solo.layout.weights(Phase::SrAdvsr)))
        .unwrap()
        .remove(0);
    assert_eq!(
        sha256_file(&solo.layout.weights(Phase::SrAdvsr)).unwrap(),
        sha256_file(&exp.layout.sweep_run(1.0).join(WEIGHTS_FILE)).unwrap()
    );
    let row = &rows[1];
    assert_eq!(report.quality, row.report.quality);
    assert_eq!(report.attack, row.report.attack);
    assert_eq!(report.confusion, row.report.confusion);
}

#[test]
fn binary_flags_env_and_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");

    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "gen-data",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let m = RunManifest::load(&run.join("data").join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.seeds.master, 5);

    let seeded = dir.path().join("seeded");
    let out = bin()
        .env("ADVSR_SEED", "77")
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            seeded.to_str().unwrap(),
            "gen-data",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let m2 = RunManifest::load(&seeded.join("data").join(MANIFEST_FILE)).unwrap();
    assert_eq!((m2.seeds.master, m2.config.data.seed), (77, 77));
    assert_ne!(m.outputs["data/train.advd"], m2.outputs["data/train.advd"]);

    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "train",
            "--phase",
            "sr-advsr",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sr-clean/weights.advw"));

    let bad = write_config(dir.path(), r#"{ "extra": 1 }"#);
    let out = bin()
        .args(["--config", bad.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config.json"));

    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "train",
            "--phase",
            "bogus",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "sweep-r",
            "--r-list",
            "0.1,-2",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = bin()
        .args([
            "report",
            run.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no evaluation outputs"));
}
