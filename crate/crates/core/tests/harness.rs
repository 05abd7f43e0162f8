mod common;

use std::fs;
use std::process::Command;

use prodding::harness::{
    emit_report, run_experiment, Experiment, ExperimentConfig, Report, ReportFormat, ABLATION_TABLE,
};

use common::small_config;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prodding"))
}

#[test]
fn all_flags_off_is_the_no_adapt_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.skd = false;
    cfg.mix = false;
    cfg.mi_distill = false;
    cfg.proto = false;
    cfg.afm = false;
    cfg.mi_finetune = false;
    let exp = Experiment::prepare(cfg).unwrap();
    let baseline = exp.no_adapt_metrics().unwrap();
    let report = exp.run().unwrap();
    let row = &report.rows[0];
    assert_eq!(row.seeds[0].metrics.as_ref(), Some(&baseline));
    assert_eq!(row.mean, Some(baseline.accuracy));
    assert!(row.seeds[0].checksum.is_none());
}

#[test]
fn ablation_matrix_report_shapes_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.seeds = vec![2024, 2025];
    cfg.ablations = ABLATION_TABLE.iter().map(|s| s.to_string()).collect();
    let report = run_experiment(cfg).unwrap();
    assert!(!report.partial);
    assert_eq!(report.rows.len(), 11);
    for row in &report.rows {
        let values: Vec<f64> = row.seeds.iter().map(|s| s.value.unwrap()).collect();
        assert_eq!(
            row.mean,
            Some(values.iter().sum::<f64>() / values.len() as f64)
        );
    }
    // rows sharing distillation flags start from the same distilled model
    let prod = report.row("skd+mix+mi+proto").unwrap();
    for name in ["prod+fm", "prod+afm+mi"] {
        let row = report.row(name).unwrap();
        for (a, b) in prod.seeds.iter().zip(&row.seeds) {
            assert_eq!(a.value, b.distilled_value());
        }
    }

    let out = dir.path().join("report");
    let files = emit_report(
        &report,
        &out,
        &[ReportFormat::Csv, ReportFormat::Json, ReportFormat::Plots],
    )
    .unwrap();
    assert_eq!(files.len(), 4);

    let csv = fs::read_to_string(out.join("accuracy.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 11);
    for line in &lines {
        // a row label, then one column per seed and the mean
        assert_eq!(line.split(',').count(), 1 + 2 + 1);
    }

    let back = Report::load(&out.join("report.json")).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.content_hash(), report.fingerprint);

    let svg = fs::read_to_string(out.join("convergence.svg")).unwrap();
    assert!(svg.contains("distill"));
    assert!(svg.contains("finetune"));
    // one line and one legend swatch per stage
    assert_eq!(svg.matches(r##"stroke="#0000FF""##).count(), 2);
    assert_eq!(svg.matches(r##"stroke="#FF0000""##).count(), 2);
}

#[test]
fn artifacts_land_under_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.ablations = vec!["prodding".into()];
    run_experiment(cfg).unwrap();
    let row = dir.path().join("seed-2024").join("prodding");
    for f in [
        "model.json",
        "distill.jsonl",
        "finetune.jsonl",
        "bank-init.json",
        "bank-final.json",
    ] {
        assert!(row.join(f).exists(), "{f} missing");
    }
    assert!(dir.path().join("source").join("checkpoint.json").exists());
    assert!(dir
        .path()
        .join("cache")
        .join("oracle-soft-top1.jsonl")
        .exists());
    let step: serde_json::Value = serde_json::from_str(
        fs::read_to_string(row.join("distill.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    for key in ["epoch", "step", "skd", "mix", "mi", "total"] {
        assert!(step.get(key).is_some(), "{key} missing from step record");
    }
    let epoch: serde_json::Value = serde_json::from_str(
        fs::read_to_string(row.join("finetune.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    for key in ["epoch", "pi", "pass_rate", "afm", "mi", "total"] {
        assert!(epoch.get(key).is_some(), "{key} missing from epoch record");
    }
}

fn write_config(dir: &std::path::Path, extra: &str) -> std::path::PathBuf {
    let cfg = small_config(&dir.join("out"));
    let path = dir.join("config.toml");
    fs::write(&path, format!("{}{extra}", cfg.to_toml_string().unwrap())).unwrap();
    path
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "etta = 0.9\n").unwrap();
    let status = bin().args(["run", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(1));

    let missing = bin()
        .args(["eval", "--config"])
        .arg(dir.path().join("nope.toml"))
        .args(["--checkpoint", "x"])
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(1));

    let good = write_config(dir.path(), "");
    let runtime = bin()
        .args(["eval", "--config"])
        .arg(&good)
        .args(["--checkpoint"])
        .arg(dir.path().join("absent.json"))
        .status()
        .unwrap();
    assert_eq!(runtime.code(), Some(2));
}

#[test]
fn cli_stages_chain_and_honour_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(std::path::Path::new("rel"));
    let path = dir.path().join("config.toml");
    fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    let root = dir.path().join("root");
    let run = |args: &[&str]| {
        let out = bin()
            .args(args)
            .env("PRODDING_OUTPUT", &root)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    let cfg_arg = path.to_str().unwrap();
    run(&["train-source", "--config", cfg_arg]);
    assert!(root.join("rel/source/checkpoint.json").exists());
    run(&["query", "--config", cfg_arg]);
    run(&["distill", "--config", cfg_arg]);
    let distilled = root.join("rel/distill/seed-2024");
    assert!(distilled.join("bank-000.json").exists());
    assert!(distilled.join("bank-002.json").exists());
    let model = distilled.join("model.json");
    run(&[
        "finetune",
        "--config",
        cfg_arg,
        "--init-checkpoint",
        model.to_str().unwrap(),
    ]);
    let tuned = root.join("rel/finetune/seed-2024/model.json");
    let eval = run(&[
        "eval",
        "--config",
        cfg_arg,
        "--checkpoint",
        tuned.to_str().unwrap(),
    ]);
    assert!(eval.contains("per_class_accuracy"));
    let table = run(&["run", "--config", cfg_arg]);
    assert!(table.starts_with("row,seed_2024,mean"));
    let report = root.join("rel/report/report.json");
    let out = dir.path().join("again");
    run(&[
        "report",
        "--input",
        report.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(out.join("accuracy.csv").exists());
}

#[test]
fn config_file_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg, small_config(&dir.path().join("out")));
}
