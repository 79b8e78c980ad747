use std::path::Path;

use wmlab::attacks::AttackLr;
use wmlab::harness::commands;
use wmlab::harness::metrics::{read_csv, CSV_HEADER, CSV_SCHEMA_VERSION};
use wmlab::harness::{run_pipeline, ExperimentConfig, RunSummary};
use wmlab::training::Phase;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.run.out_dir = dir.to_path_buf();
    cfg.run.name = "trace".into();
    cfg.data.num_classes = 3;
    cfg.data.per_class = 110;
    cfg.data.test_per_class = 10;
    cfg.model.widths = vec![16, 8];
    cfg.train.epochs = 2;
    cfg.attack.epochs = 2;
    cfg.attack.lrs = vec![AttackLr::Med];
    cfg.restore.epochs = 2;
    cfg.blend.epochs = 1;
    cfg.landscape.attack_lr = AttackLr::Med;
    cfg.landscape.resolution = 5;
    cfg
}

#[test]
fn summary_numbers_trace_back_to_metrics_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_pipeline(&cfg, true).unwrap();
    let run = cfg.run_dir();

    let text = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema_version"], CSV_SCHEMA_VERSION);

    let rows = read_csv(&run.join("metrics.csv")).unwrap();
    let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let verify: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("verify.json")).unwrap()).unwrap();

    let embed_last = rows.iter().filter(|r| r.run_id == "trace/embed").last().unwrap();
    assert_eq!(embed_last.test_acc, Some(summary.test_acc));

    let wm = verify
        .as_array()
        .unwrap()
        .iter()
        .find(|v| v["model"] == "watermarked")
        .unwrap();
    assert_eq!(wm["result"]["trigger_acc"].as_f64(), Some(summary.trigger_acc));
    assert_eq!(wm["result"]["watermarked"].as_bool(), summary.watermarked);

    let retrain: Vec<_> = rows.iter().filter(|r| r.run_id == "trace/retrain-med").collect();
    assert_eq!(retrain[0].epoch, 0);
    assert!(retrain.iter().all(|r| r.phase == Phase::Retrain));
    let start = retrain[0].trigger_acc.unwrap();
    let max = retrain[1..].iter().filter_map(|r| r.trigger_acc).fold(f64::MIN, f64::max);
    assert_eq!(summary.restoration_gain, Some(max - start));

    let table = commands::report(dir.path()).unwrap();
    assert!(table.contains(&format!("{:.2}", 100.0 * summary.test_acc)), "{table}");
    assert!(table.contains(&format!("{:.2}", 100.0 * summary.trigger_acc)), "{table}");
}

#[test]
fn wall_time_is_zero_unless_requested() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.stages.landscape = false;
    cfg.stages.blend = false;
    let out = run_pipeline(&cfg, false).unwrap();
    assert!(out.rows.iter().all(|r| r.wall_ms == 0));
}
