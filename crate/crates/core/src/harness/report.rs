//! Markdown summary over completed runs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Headline numbers of one run, written to `summary.json` by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub model: String,
    pub strategy: String,
    pub trigger: String,
    pub labels: String,
    pub clean_test_acc: Option<f64>,
    pub test_acc: f64,
    pub trigger_acc: f64,
    pub watermarked: Option<bool>,
    /// Restoration gain after the attack at the landscape lr.
    pub restoration_gain: Option<f64>,
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn unique<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// One row per (strategy, trigger, labels) over the grid spanned by the
/// runs; combinations without a run show dashes. Several runs in one cell
/// (seeds) are averaged.
pub fn markdown_table(runs: &[RunSummary]) -> String {
    let strategies = unique(runs.iter().map(|r| r.strategy.as_str()));
    let triggers = unique(runs.iter().map(|r| r.trigger.as_str()));
    let labels = unique(runs.iter().map(|r| r.labels.as_str()));
    let mut s = String::from(
        "| Strategy | Trigger | Labels | Runs | Test acc (%) | Trigger acc (%) | Restoration gain (%) |\n|---|---|---|---|---|---|---|\n",
    );
    for st in &strategies {
        for tr in &triggers {
            for lb in &labels {
                let cell: Vec<&RunSummary> = runs
                    .iter()
                    .filter(|r| r.strategy == *st && r.trigger == *tr && r.labels == *lb)
                    .collect();
                let mean = |f: &dyn Fn(&RunSummary) -> Option<f64>| -> Option<f64> {
                    let v: Vec<f64> = cell.iter().filter_map(|r| f(r)).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                };
                let _ = writeln!(
                    s,
                    "| {st} | {tr} | {lb} | {} | {} | {} | {} |",
                    cell.len(),
                    pct(mean(&|r| Some(r.test_acc))),
                    pct(mean(&|r| Some(r.trigger_acc))),
                    pct(mean(&|r| r.restoration_gain)),
                );
            }
        }
    }
    s
}

/// Collects every `summary.json` below `root`, sorted by path.
pub fn collect_summaries(root: &Path) -> Result<Vec<RunSummary>> {
    let mut paths = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "summary.json") {
                paths.push(path);
            }
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(trigger: &str, labels: &str, acc: f64) -> RunSummary {
        RunSummary {
            name: "r".into(),
            seed: 1,
            model: "mlp".into(),
            strategy: "joint".into(),
            trigger: trigger.into(),
            labels: labels.into(),
            clean_test_acc: Some(0.98),
            test_acc: 0.975,
            trigger_acc: acc,
            watermarked: Some(true),
            restoration_gain: None,
        }
    }

    #[test]
    fn single_run_gives_one_row() {
        let t = markdown_table(&[run("noise", "single", 1.0)]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("| joint | noise | single | 1 | 97.50 | 100.00 | - |"));
    }

    #[test]
    fn missing_grid_cell_is_dashed() {
        let t = markdown_table(&[run("noise", "single", 1.0), run("fgsm", "multi", 0.995)]);
        assert_eq!(t.lines().count(), 6);
        assert!(t.contains("| joint | noise | multi | 0 | - | - | - |"));
        assert!(t.contains("| joint | fgsm | multi | 1 | 97.50 | 99.50 | - |"));
    }
}
