//! Per-epoch metrics rows and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::{Phase, RunTrace};

pub const CSV_HEADER: &str = "run_id,phase,epoch,lr,test_acc,trigger_acc,train_loss,trigger_loss,wall_ms";
/// Bumped whenever a column is appended.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    pub test_acc: Option<f64>,
    pub trigger_acc: Option<f64>,
    pub train_loss: Option<f64>,
    pub trigger_loss: Option<f64>,
    pub wall_ms: u64,
}

/// Rows for a trace. Wall time is zeroed unless `keep_wall_time`.
pub fn rows_from_trace(run_id: &str, trace: &RunTrace, keep_wall_time: bool) -> Vec<MetricsRow> {
    trace
        .epochs
        .iter()
        .map(|e| MetricsRow {
            run_id: run_id.to_string(),
            phase: trace.phase,
            epoch: e.epoch,
            lr: e.lr,
            test_acc: e.test_acc,
            trigger_acc: e.trigger_acc,
            train_loss: e.train_loss,
            trigger_loss: e.trigger_loss,
            wall_ms: if keep_wall_time { e.wall_ms } else { 0 },
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.phase,
            r.epoch,
            r.lr,
            opt(r.test_acc),
            opt(r.trigger_acc),
            opt(r.train_loss),
            opt(r.trigger_loss),
            r.wall_ms
        );
    }
    s
}

pub fn write_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::format("header", format!("unexpected metrics header {other:?}")));
        }
    }
    let num = |s: &str, field: &'static str| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| Error::format(field, format!("bad number {s:?}")))
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::format("row", format!("expected 9 columns: {line:?}")));
            }
            Ok(MetricsRow {
                run_id: f[0].to_string(),
                phase: Phase::parse(f[1]).ok_or_else(|| Error::format("phase", f[1].to_string()))?,
                epoch: f[2].parse().map_err(|_| Error::format("epoch", f[2].to_string()))?,
                lr: num(f[3], "lr")?.ok_or_else(|| Error::format("lr", "missing".to_string()))?,
                test_acc: num(f[4], "test_acc")?,
                trigger_acc: num(f[5], "trigger_acc")?,
                train_loss: num(f[6], "train_loss")?,
                trigger_loss: num(f[7], "trigger_loss")?,
                wall_ms: f[8].parse().map_err(|_| Error::format("wall_ms", f[8].to_string()))?,
            })
        })
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::EpochMetrics;

    #[test]
    fn roundtrip_with_missing_cells() {
        let trace = RunTrace {
            phase: Phase::Retrain,
            epochs: vec![
                EpochMetrics {
                    epoch: 0,
                    lr: 1e-4,
                    test_acc: Some(0.5),
                    trigger_acc: Some(0.125),
                    train_loss: None,
                    trigger_loss: Some(2.0),
                    wall_ms: 17,
                },
                EpochMetrics {
                    epoch: 1,
                    lr: 1e-4,
                    test_acc: None,
                    trigger_acc: Some(1.0),
                    train_loss: Some(0.1),
                    trigger_loss: Some(0.3),
                    wall_ms: 40,
                },
            ],
            checkpoints: vec![],
        };
        let rows = rows_from_trace("x.retrain-small", &trace, false);
        assert!(rows.iter().all(|r| r.wall_ms == 0));
        let csv = to_csv(&rows);
        assert!(csv.starts_with("run_id,phase,epoch,lr,test_acc,trigger_acc,train_loss,trigger_loss,wall_ms\n"));
        assert!(csv.contains("x.retrain-small,retrain,0,0.0001,0.5,0.125,,2,0\n"));
        assert_eq!(parse_csv(&csv).unwrap(), rows);
    }

    #[test]
    fn rejects_foreign_header() {
        assert!(parse_csv("a,b\n").is_err());
    }
}
