use std::path::Path;
use std::process::{Command, Output};

fn wmlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"
[run]
name = "cli"
out_dir = "{}"

[data]
num_classes = 3
per_class = 110
test_per_class = 10

[model]
widths = [16, 8]

[train]
epochs = 1

[attack]
epochs = 1
lrs = ["small"]

[restore]
epochs = 1

[blend]
epochs = 1

[landscape]
resolution = 3
"#,
        dir.join("runs").display()
    );
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn default_config_is_printed_as_toml() {
    let out = wmlab(&["default-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[train]") && text.contains("wm_batch = 8"), "{text}");
}

#[test]
fn unknown_enum_values_are_rejected() {
    let out = wmlab(&["verify", "--trigger", "sparkle"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sparkle"));
}

#[test]
fn stage_commands_and_report_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let embed_first = wmlab(&["--config", cfg, "embed"]);
    assert!(!embed_first.status.success());
    assert!(String::from_utf8_lossy(&embed_first.stderr).contains("make-triggers"));
    for cmd in ["make-triggers", "embed", "attack-finetune", "restore"] {
        let out = wmlab(&["--config", cfg, "--lr", "small", cmd]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let v = wmlab(&["--config", cfg, "verify", "--model", "retrain-small", "--json"]);
    assert!(v.status.success());
    let text = String::from_utf8(v.stdout).unwrap();
    assert!(text.contains("\"restoration_gain\""), "{text}");

    let run = wmlab(&["--config", cfg, "--name", "full", "run"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let report = wmlab(&["--config", cfg, "report"]);
    let table = String::from_utf8(report.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("| joint")).count(), 1, "{table}");
}
