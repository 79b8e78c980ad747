//! Single-stage commands over a run directory. Each one reads the artifacts
//! of the stages before it and writes its own, so a pipeline can be driven
//! step by step from the command line.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attacks::{self, AttackLr};
use crate::error::{Error, Result};
use crate::nn::{self, Model};
use crate::protocols::{self, VerifyResult};
use crate::training::{Phase, RunTrace};
use crate::triggers::{self, TriggerSet};

use super::config::{ExperimentConfig, TriggerKind};
use super::metrics::{self, MetricsRow};
use super::pipeline::{self as pl, NamedVerify};
use super::plots;
use super::report;

/// What a command produced, for the caller to print.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommandReport {
    pub command: String,
    pub written: Vec<PathBuf>,
    pub verify: Option<NamedVerify>,
    pub note: Option<String>,
}

impl CommandReport {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            written: Vec::new(),
            verify: None,
            note: None,
        }
    }
}

fn checkpoint_path(cfg: &ExperimentConfig, tag: &str) -> PathBuf {
    cfg.run_dir().join("checkpoints").join(format!("{tag}.wmlb"))
}

fn metrics_path(cfg: &ExperimentConfig, tag: &str) -> PathBuf {
    cfg.run_dir().join("metrics").join(format!("{tag}.csv"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, tag: &str, produced_by: &str) -> Result<Model> {
    let path = checkpoint_path(cfg, tag);
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing {} (run `{produced_by}` first)",
            path.display()
        )));
    }
    nn::load_checkpoint(&path)
}

fn save_model(cfg: &ExperimentConfig, tag: &str, model: &Model, rep: &mut CommandReport) -> Result<()> {
    let path = checkpoint_path(cfg, tag);
    ensure_parent(&path)?;
    nn::save_checkpoint(model, &path)?;
    rep.written.push(path);
    Ok(())
}

fn save_rows(cfg: &ExperimentConfig, tag: &str, trace: &RunTrace, rep: &mut CommandReport) -> Result<()> {
    let rows = metrics::rows_from_trace(&format!("{}/{tag}", cfg.run.name), trace, cfg.run.record_wall_time);
    let path = metrics_path(cfg, tag);
    ensure_parent(&path)?;
    metrics::write_csv(&rows, &path)?;
    rep.written.push(path);
    Ok(())
}

fn triggers_stem(cfg: &ExperimentConfig) -> PathBuf {
    cfg.run_dir().join("triggers")
}

fn load_triggers(cfg: &ExperimentConfig) -> Result<TriggerSet> {
    let stem = triggers_stem(cfg);
    if !stem.with_extension("wmlb").exists() {
        return Err(Error::Config(format!(
            "missing trigger set under {} (run `make-triggers` first)",
            cfg.run_dir().display()
        )));
    }
    triggers::load_trigger_set(&stem)
}

fn verified(
    cfg: &ExperimentConfig,
    tag: &str,
    model: &Model,
    set: &TriggerSet,
    restore: Option<&RunTrace>,
    rep: &mut CommandReport,
) -> Result<()> {
    let result = pl::stage_verify(cfg, model, set, restore)?;
    let path = cfg.run_dir().join("verify").join(format!("{tag}.json"));
    ensure_parent(&path)?;
    let nv = NamedVerify {
        model: tag.to_string(),
        result,
    };
    let text = serde_json::to_string_pretty(&nv)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    rep.written.push(path);
    rep.verify = Some(nv);
    Ok(())
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let mut rep = CommandReport::new("pretrain");
    let splits = pl::prepare_splits(cfg)?;
    let (m, t) = pl::stage_pretrain(cfg, &splits)?;
    save_model(cfg, "clean", &m, &mut rep)?;
    save_rows(cfg, "pretrain", &t, &mut rep)?;
    rep.note = t.last().test_acc.map(|a| format!("clean test accuracy {a:.4}"));
    Ok(rep)
}

pub fn make_triggers(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let mut rep = CommandReport::new("make-triggers");
    let splits = pl::prepare_splits(cfg)?;
    let clean = match cfg.triggers.kind {
        TriggerKind::Fgsm => Some(load_model(cfg, "clean", "pretrain")?),
        _ => None,
    };
    let set = pl::stage_triggers(cfg, &splits, clean.as_ref())?;
    let stem = triggers_stem(cfg);
    ensure_parent(&stem)?;
    triggers::save_trigger_set(&set, &stem)?;
    rep.written.push(stem.with_extension("wmlb"));
    rep.written.push(stem.with_extension("json"));
    rep.note = Some(format!("{} {} triggers", set.len(), cfg.triggers.kind.name()));
    Ok(rep)
}

pub fn embed(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let mut rep = CommandReport::new("embed");
    let splits = pl::prepare_splits(cfg)?;
    let set = load_triggers(cfg)?;
    let (m, t) = pl::stage_embed(cfg, &splits, &set)?;
    save_model(cfg, "watermarked", &m, &mut rep)?;
    save_rows(cfg, "embed", &t, &mut rep)?;
    verified(cfg, "watermarked", &m, &set, None, &mut rep)?;
    Ok(rep)
}

pub fn attack_finetune(cfg: &ExperimentConfig, lr: AttackLr) -> Result<CommandReport> {
    let mut rep = CommandReport::new("attack-finetune");
    let splits = pl::prepare_splits(cfg)?;
    let set = load_triggers(cfg)?;
    let wm = load_model(cfg, "watermarked", "embed")?;
    let (m, t) = pl::stage_attack(cfg, &splits, &wm, &set, lr, false)?;
    let tag = format!("finetune-{}", lr.name());
    save_model(cfg, &tag, &m, &mut rep)?;
    save_rows(cfg, &tag, &t, &mut rep)?;
    verified(cfg, &tag, &m, &set, None, &mut rep)?;
    Ok(rep)
}

pub fn restore(cfg: &ExperimentConfig, lr: AttackLr) -> Result<CommandReport> {
    let mut rep = CommandReport::new("restore");
    let splits = pl::prepare_splits(cfg)?;
    let set = load_triggers(cfg)?;
    let attacked = load_model(cfg, &format!("finetune-{}", lr.name()), "attack-finetune")?;
    let (m, t) = pl::stage_restore(cfg, &splits, &attacked, &set, lr, false)?;
    let tag = format!("retrain-{}", lr.name());
    save_model(cfg, &tag, &m, &mut rep)?;
    save_rows(cfg, &tag, &t, &mut rep)?;
    verified(cfg, &tag, &m, &set, Some(&t), &mut rep)?;
    Ok(rep)
}

pub fn blend_finetune(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let mut rep = CommandReport::new("blend-finetune");
    let splits = pl::prepare_splits(cfg)?;
    let set = load_triggers(cfg)?;
    let wm = load_model(cfg, "watermarked", "embed")?;
    let (m, t) = pl::stage_blend(cfg, &splits, &wm, &set)?;
    let tag = format!("blend-{}", cfg.blend.lr.name());
    save_model(cfg, &tag, &m, &mut rep)?;
    save_rows(cfg, &tag, &t, &mut rep)?;
    verified(cfg, &tag, &m, &set, None, &mut rep)?;
    Ok(rep)
}

/// Extraction followed by the same clean retraining used for restoration.
pub fn attack_extract(cfg: &ExperimentConfig) -> Result<CommandReport> {
    let mut rep = CommandReport::new("attack-extract");
    let splits = pl::prepare_splits(cfg)?;
    let set = load_triggers(cfg)?;
    let wm = load_model(cfg, "watermarked", "embed")?;
    let out = pl::stage_extract(cfg, &splits, &wm, &set)?;
    save_model(cfg, "extracted", &out.surrogate, &mut rep)?;
    save_rows(cfg, "extract", &out.trace, &mut rep)?;
    let agree = attacks::agreement(&wm, &out.surrogate, &splits.test.samples)?;
    let (rm, rt) = pl::stage_restore(cfg, &splits, &out.surrogate, &set, cfg.extract.restore_lr, false)?;
    save_model(cfg, "extract-retrain", &rm, &mut rep)?;
    save_rows(cfg, "extract-retrain", &rt, &mut rep)?;
    verified(cfg, "extract-retrain", &rm, &set, Some(&rt), &mut rep)?;
    rep.note = Some(format!("surrogate agreement with victim on test inputs {agree:.4}"));
    Ok(rep)
}

/// Replays the attack and restore for `lr` with checkpoints kept (both are
/// deterministic), then writes the surface, trajectory and contour plot.
pub fn landscape(cfg: &ExperimentConfig, lr: AttackLr) -> Result<CommandReport> {
    let mut rep = CommandReport::new("landscape");
    let mut cfg = cfg.clone();
    cfg.landscape.attack_lr = lr;
    let splits = pl::prepare_splits(&cfg)?;
    let set = load_triggers(&cfg)?;
    let wm = load_model(&cfg, "watermarked", "embed")?;
    let (am, at) = pl::stage_attack(&cfg, &splits, &wm, &set, lr, true)?;
    let (rm, rt) = pl::stage_restore(&cfg, &splits, &am, &set, lr, true)?;
    let out = pl::stage_landscape(&cfg, &wm, &at, &rt, &rm, &set)?;
    let dir = cfg.run_dir().join("landscape");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    out.grid.write_csv(&dir.join("grid.csv"))?;
    out.trajectory.write_csv(&dir.join("trajectory.csv"))?;
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&out.meta)? + "\n";
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    rows.extend(metrics::rows_from_trace(&format!("{}/finetune-{}", cfg.run.name, lr.name()), &at, false));
    rows.extend(metrics::rows_from_trace(&format!("{}/retrain-{}", cfg.run.name, lr.name()), &rt, false));
    let written = plots::render_plots(
        &rows,
        Some((&out.grid, &out.meta.levels, &out.trajectory)),
        &cfg.run_dir().join("plots"),
    )?;
    rep.written.extend([dir.join("grid.csv"), dir.join("trajectory.csv"), meta_path]);
    rep.written.extend(written);
    rep.note = Some(format!(
        "trigger loss at fine-tune end {:?}, at retrain end {:?}",
        out.meta.finetune_end_loss, out.meta.retrain_end_loss
    ));
    Ok(rep)
}

/// Ownership test of a stored checkpoint (a tag such as `retrain-small`, or a
/// path). For retrained models the restoration gain is read back from the
/// stage's metrics file.
pub fn verify(cfg: &ExperimentConfig, model: &str) -> Result<CommandReport> {
    let mut rep = CommandReport::new("verify");
    let set = load_triggers(cfg)?;
    let as_path = Path::new(model);
    let (tag, m) = if as_path.extension().is_some() && as_path.exists() {
        let stem = as_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        (stem, nn::load_checkpoint(as_path)?)
    } else {
        (model.to_string(), load_model(cfg, model, "the producing stage")?)
    };
    let mpath = metrics_path(cfg, &tag);
    let gain = if mpath.exists() {
        gain_from_rows(&metrics::read_csv(&mpath)?)
    } else {
        None
    };
    let base = protocols::verify_ownership(&m, &set, cfg.verify.alpha, None)?;
    let result = match gain {
        Some(g) => protocols::decide(base.hits, base.n, m.spec().num_classes, cfg.verify.alpha, Some(g)),
        None => base,
    };
    rep.verify = Some(NamedVerify { model: tag, result });
    Ok(rep)
}

/// Restoration gain of a retrain phase, from its metrics rows.
pub fn gain_from_rows(rows: &[MetricsRow]) -> Option<f64> {
    let retrain: Vec<&MetricsRow> = rows.iter().filter(|r| r.phase == Phase::Retrain).collect();
    let start = retrain.iter().find(|r| r.epoch == 0)?.trigger_acc?;
    let best = retrain
        .iter()
        .filter(|r| r.epoch > 0)
        .filter_map(|r| r.trigger_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    best.is_finite().then_some(best - start)
}

pub fn report(root: &Path) -> Result<String> {
    Ok(report::markdown_table(&report::collect_summaries(root)?))
}

/// Verification summary line for printing.
pub fn describe(v: &VerifyResult) -> String {
    format!(
        "trigger acc {:.4} ({}/{}), p = {:.3e} vs alpha {:.0e}: {}{}",
        v.trigger_acc,
        v.hits,
        v.n,
        v.p_value,
        v.alpha,
        if v.watermarked { "WATERMARKED" } else { "not watermarked" },
        v.restoration_gain
            .map(|g| format!(", restoration gain {g:+.4}"))
            .unwrap_or_default()
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.run.out_dir = dir.to_path_buf();
        cfg.run.name = "steps".into();
        cfg.data.num_classes = 3;
        cfg.data.per_class = 110;
        cfg.data.test_per_class = 10;
        cfg.model.widths = vec![16, 8];
        cfg.train.epochs = 1;
        cfg.attack.epochs = 1;
        cfg.restore.epochs = 1;
        cfg.landscape.resolution = 3;
        cfg
    }

    #[test]
    fn stages_chain_through_the_run_dir() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        assert!(matches!(embed(&cfg), Err(Error::Config(_))));
        make_triggers(&cfg).unwrap();
        embed(&cfg).unwrap();
        attack_finetune(&cfg, AttackLr::Small).unwrap();
        let r = restore(&cfg, AttackLr::Small).unwrap();
        let direct = r.verify.unwrap().result;
        let again = verify(&cfg, "retrain-small").unwrap().verify.unwrap().result;
        assert_eq!(direct, again);
        landscape(&cfg, AttackLr::Small).unwrap();
        assert!(cfg.run_dir().join("plots/landscape.svg").exists());
    }

    #[test]
    fn fgsm_triggers_need_the_clean_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.triggers.kind = TriggerKind::Fgsm;
        let err = make_triggers(&cfg).unwrap_err().to_string();
        assert!(err.contains("pretrain"), "{err}");
    }
}
