//! End-to-end experiment: pretrain, triggers, embed, attack, restore and
//! blend, landscape, verify. Each stage is also callable on its own.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackLr, ExtractConfig, ExtractOutcome, FinetuneConfig};
use crate::data::{self, LabeledDataset, SplitBundle, SynthSpec, TestSource};
use crate::embedding::{self, EmbedInit, TrainConfig};
use crate::error::{Error, Result};
use crate::landscape::{self, GridSpec, LandscapeGrid, Trajectory2D};
use crate::nn::{self, Model, ModelSpec, ParamVector};
use crate::protocols::{self, BlendConfig, RestoreConfig, VerifyResult};
use crate::rng;
use crate::training::{EvalSets, Phase, RunTrace};
use crate::triggers::{self, TriggerSet, TriggerSources};

use super::config::{DataSource, DirectionMode, ExperimentConfig};
use super::metrics::{self, MetricsRow, CSV_SCHEMA_VERSION};
use super::plots;
use super::report::RunSummary;

/// Test holdout drawn from IDX training files when no test files are given.
const IDX_TEST_HOLDOUT: usize = 1000;

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Train pool and test set named by the config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, TestSource)> {
    let k = cfg.data.num_classes;
    match cfg.data.source {
        DataSource::Synthetic => {
            let seed = cfg.data_seed();
            let pool = data::synth_generate(&SynthSpec::desk(k, cfg.data.per_class), seed)?;
            let test = data::synth_generate(
                &SynthSpec::desk(k, cfg.data.test_per_class),
                rng::derive_seed(seed, "test-set"),
            )?;
            Ok((pool, TestSource::Provided(test)))
        }
        DataSource::Idx => {
            let (Some(img), Some(lbl)) = (&cfg.data.train_images, &cfg.data.train_labels) else {
                return Err(Error::Config("idx data needs train_images and train_labels".into()));
            };
            let mut pool = data::load_idx(img, lbl)?;
            match (&cfg.data.test_images, &cfg.data.test_labels) {
                (Some(ti), Some(tl)) => {
                    if pool.len() > cfg.data.max_pool {
                        pool = pool.subset(&(0..cfg.data.max_pool).collect::<Vec<_>>(), pool.name.clone())?;
                    }
                    Ok((pool, TestSource::Provided(data::load_idx(ti, tl)?)))
                }
                _ => {
                    let cap = cfg.data.max_pool + IDX_TEST_HOLDOUT;
                    if pool.len() > cap {
                        pool = pool.subset(&(0..cap).collect::<Vec<_>>(), pool.name.clone())?;
                    }
                    let holdout = IDX_TEST_HOLDOUT.min(pool.len() / 5);
                    Ok((pool, TestSource::Holdout(holdout)))
                }
            }
        }
    }
}

pub fn prepare_splits(cfg: &ExperimentConfig) -> Result<SplitBundle> {
    let (pool, test) = load_data(cfg)?;
    if pool.num_classes > cfg.data.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but data.num_classes = {}",
            pool.num_classes, cfg.data.num_classes
        )));
    }
    data::make_splits(&pool, test, rng::derive_seed(cfg.data_seed(), rng::streams::SPLIT))
}

/// Out-of-distribution source for unrelated triggers.
pub fn ood_source(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    data::synth_generate(
        &SynthSpec::ood(cfg.data.num_classes, cfg.triggers.ood_per_class, cfg.triggers.ood_side),
        rng::derive_seed(cfg.data_seed(), rng::streams::OOD),
    )
}

pub fn spec_for(cfg: &ExperimentConfig, splits: &SplitBundle) -> ModelSpec {
    cfg.model_spec(splits.pretrain.image_shape())
}

pub fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.train.epochs,
        train_batch: cfg.train.train_batch,
        wm_batch: cfg.train.wm_batch,
        schedule: cfg.train.schedule(),
        weight_decay: cfg.train.weight_decay,
        seed: cfg.run.seed,
        keep_checkpoints: false,
    }
}

pub fn stage_pretrain(cfg: &ExperimentConfig, splits: &SplitBundle) -> Result<(Model, RunTrace)> {
    stage(
        "pretrain",
        embedding::pretrain_clean(
            &spec_for(cfg, splits),
            &splits.pretrain,
            &train_config(cfg),
            EvalSets {
                test: Some(&splits.test),
                trigger: None,
            },
        ),
    )
}

pub fn stage_triggers(cfg: &ExperimentConfig, splits: &SplitBundle, clean: Option<&Model>) -> Result<TriggerSet> {
    let ood = match cfg.triggers.kind {
        super::config::TriggerKind::Unrelated => Some(ood_source(cfg)?),
        _ => None,
    };
    stage(
        "make-triggers",
        triggers::build_trigger_set(
            &cfg.triggers.trigger_type(),
            cfg.triggers.scheme(),
            TriggerSources {
                base: &splits.trigger_base,
                ood: ood.as_ref(),
                clean_model: clean,
            },
            rng::derive_seed(cfg.run.seed, rng::streams::TRIGGERS),
        ),
    )
}

pub fn stage_embed(cfg: &ExperimentConfig, splits: &SplitBundle, trigger_set: &TriggerSet) -> Result<(Model, RunTrace)> {
    stage(
        "embed",
        embedding::embed(
            EmbedInit::Fresh(spec_for(cfg, splits)),
            &splits.pretrain,
            trigger_set,
            cfg.embed.strategy(),
            &train_config(cfg),
            EvalSets {
                test: Some(&splits.test),
                trigger: Some(trigger_set),
            },
        ),
    )
}

pub fn stage_attack(
    cfg: &ExperimentConfig,
    splits: &SplitBundle,
    model: &Model,
    trigger_set: &TriggerSet,
    lr: AttackLr,
    keep_checkpoints: bool,
) -> Result<(Model, RunTrace)> {
    let fc = FinetuneConfig {
        lr: lr.lr(),
        epochs: cfg.attack.epochs,
        weight_decay: cfg.attack.weight_decay,
        batch: cfg.attack.batch,
        seed: cfg.run.seed,
        keep_checkpoints,
    };
    stage(
        "attack-finetune",
        attacks::finetune(
            model,
            &splits.finetune,
            &fc,
            EvalSets {
                test: Some(&splits.test),
                trigger: Some(trigger_set),
            },
        ),
    )
}

pub fn restore_config(cfg: &ExperimentConfig, lr: AttackLr, keep_checkpoints: bool) -> RestoreConfig {
    RestoreConfig {
        lr: cfg.restore.lr_for(lr),
        epochs: cfg.restore.epochs,
        weight_decay: cfg.restore.weight_decay,
        batch: cfg.restore.batch,
        seed: cfg.run.seed,
        keep_checkpoints,
    }
}

pub fn stage_restore(
    cfg: &ExperimentConfig,
    splits: &SplitBundle,
    model: &Model,
    trigger_set: &TriggerSet,
    lr: AttackLr,
    keep_checkpoints: bool,
) -> Result<(Model, RunTrace)> {
    stage(
        "restore",
        protocols::restore(
            model,
            &splits.pretrain,
            &restore_config(cfg, lr, keep_checkpoints),
            trigger_set,
            Some(&splits.test),
        ),
    )
}

pub fn stage_blend(
    cfg: &ExperimentConfig,
    splits: &SplitBundle,
    model: &Model,
    trigger_set: &TriggerSet,
) -> Result<(Model, RunTrace)> {
    let bc = BlendConfig {
        train_batch: cfg.blend.train_batch,
        finetune_batch: cfg.blend.finetune_batch,
        mix_every: cfg.blend.mix_every,
        epochs: cfg.blend.epochs,
        lr: cfg.blend.lr.lr(),
        weight_decay: cfg.attack.weight_decay,
        seed: cfg.run.seed,
    };
    let (m, trace, _) = stage(
        "blend-finetune",
        protocols::blended_finetune(
            model,
            &splits.pretrain,
            &splits.finetune,
            &bc,
            EvalSets {
                test: Some(&splits.test),
                trigger: Some(trigger_set),
            },
        ),
    )?;
    Ok((m, trace))
}

pub fn stage_extract(
    cfg: &ExperimentConfig,
    splits: &SplitBundle,
    victim: &Model,
    trigger_set: &TriggerSet,
) -> Result<ExtractOutcome> {
    let ec = ExtractConfig {
        surrogate: victim.spec().clone(),
        schedule: crate::nn::LrSchedule::Cosine {
            lr_start: cfg.train.lr_start,
            lr_end: cfg.train.lr_end,
            total_epochs: cfg.extract.epochs,
        },
        epochs: cfg.extract.epochs,
        batch: cfg.extract.batch,
        weight_decay: cfg.train.weight_decay,
        seed: rng::derive_seed(cfg.run.seed, "extract"),
        budget: cfg.extract.budget,
    };
    stage(
        "attack-extract",
        attacks::extract(
            victim,
            &splits.pretrain,
            &ec,
            EvalSets {
                test: Some(&splits.test),
                trigger: Some(trigger_set),
            },
        ),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeMeta {
    pub mode: DirectionMode,
    pub half_width: f64,
    pub resolution: usize,
    pub explained_variance: Option<[f64; 2]>,
    pub levels: Vec<f64>,
    pub attack_lr: AttackLr,
    /// Interpolated trigger loss and contour band at each phase endpoint.
    pub finetune_end_loss: Option<f64>,
    pub finetune_end_band: Option<usize>,
    pub retrain_end_loss: Option<f64>,
    pub retrain_end_band: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct LandscapeOutput {
    pub grid: LandscapeGrid,
    pub trajectory: Trajectory2D,
    pub meta: LandscapeMeta,
}

/// Fine-tune and retrain checkpoints (the fine-tune start included), in order.
pub fn trajectory_checkpoints(
    attacked_from: &Model,
    attack: &RunTrace,
    restore: &RunTrace,
) -> Vec<(usize, Phase, ParamVector)> {
    let mut cps = vec![(0, Phase::Finetune, attacked_from.flatten())];
    cps.extend(attack.checkpoints.iter().enumerate().map(|(i, p)| (i + 1, Phase::Finetune, p.clone())));
    cps.extend(restore.checkpoints.iter().enumerate().map(|(i, p)| (i + 1, Phase::Retrain, p.clone())));
    cps
}

/// Trigger-loss surface about the final retrained parameters, with the
/// fine-tune and retrain trajectory projected on the same plane.
pub fn stage_landscape(
    cfg: &ExperimentConfig,
    watermarked: &Model,
    attack: &RunTrace,
    restore: &RunTrace,
    restored: &Model,
    trigger_set: &TriggerSet,
) -> Result<LandscapeOutput> {
    let run = || -> Result<LandscapeOutput> {
        let lc = &cfg.landscape;
        let cps = trajectory_checkpoints(watermarked, attack, restore);
        let theta_final = restored.flatten();
        let (d1, d2, explained) = match lc.mode {
            DirectionMode::Pca => {
                let rows: Vec<ParamVector> = cps.iter().map(|c| c.2.clone()).collect();
                let b = landscape::pca_directions(&rows, &theta_final)?;
                (b.d1, b.d2, Some(b.explained))
            }
            DirectionMode::Random => {
                let (a, b) = landscape::random_directions(restored, rng::derive_seed(cfg.run.seed, "landscape"))?;
                (a, b, None)
            }
        };
        let trajectory = landscape::project_trajectory(&cps, &d1, &d2, &theta_final)?;
        let half_width = match (lc.half_width, lc.mode) {
            (Some(h), _) => h,
            (None, DirectionMode::Pca) => landscape::covering_half_width(&trajectory, lc.margin, 1e-3),
            (None, DirectionMode::Random) => 1.0,
        };
        let grid = landscape::loss_grid(
            restored,
            &d1,
            &d2,
            trigger_set,
            &GridSpec::square(half_width, lc.resolution),
        )?;
        let levels = landscape::contour_levels(&grid, lc.contour_levels);
        let at = |phase| {
            trajectory.endpoint(phase).map(|p| {
                let v = grid.interpolate(p.alpha, p.beta);
                (v, landscape::contour_band(&levels, v))
            })
        };
        let (fe, re) = (at(Phase::Finetune), at(Phase::Retrain));
        let meta = LandscapeMeta {
            mode: lc.mode,
            half_width,
            resolution: lc.resolution,
            explained_variance: explained,
            levels,
            attack_lr: lc.attack_lr,
            finetune_end_loss: fe.map(|x| x.0),
            finetune_end_band: fe.map(|x| x.1),
            retrain_end_loss: re.map(|x| x.0),
            retrain_end_band: re.map(|x| x.1),
        };
        Ok(LandscapeOutput { grid, trajectory, meta })
    };
    stage("landscape", run())
}

pub fn stage_verify(
    cfg: &ExperimentConfig,
    model: &Model,
    trigger_set: &TriggerSet,
    restore_trace: Option<&RunTrace>,
) -> Result<VerifyResult> {
    stage(
        "verify",
        protocols::verify_ownership(model, trigger_set, cfg.verify.alpha, restore_trace),
    )
}

#[derive(Debug, Clone)]
pub struct AttackRun {
    pub lr: AttackLr,
    pub model: Model,
    pub trace: RunTrace,
    pub restored: Option<(Model, RunTrace)>,
}

#[derive(Debug, Clone)]
pub struct ControlRun {
    pub attack: RunTrace,
    pub restore: RunTrace,
    pub verify: VerifyResult,
}

#[derive(Debug, Clone)]
pub struct ExtractionRun {
    pub outcome: ExtractOutcome,
    pub agreement: f64,
    pub restore: RunTrace,
    pub verify: VerifyResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedVerify {
    pub model: String,
    pub result: VerifyResult,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub splits: SplitBundle,
    pub clean: Option<(Model, RunTrace)>,
    pub trigger_set: TriggerSet,
    pub watermarked: Model,
    pub embed_trace: RunTrace,
    pub attacks: Vec<AttackRun>,
    pub blend: Option<(Model, RunTrace)>,
    pub control: Option<ControlRun>,
    pub extraction: Option<ExtractionRun>,
    pub landscape: Option<LandscapeOutput>,
    pub verify: Vec<NamedVerify>,
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
}

impl PipelineOutput {
    pub fn attack(&self, lr: AttackLr) -> Option<&AttackRun> {
        self.attacks.iter().find(|a| a.lr == lr)
    }
}

/// Runs every enabled stage in order and, when `write` is set, stores the
/// artifact tree under the config's run directory.
pub fn run_pipeline(cfg: &ExperimentConfig, write: bool) -> Result<PipelineOutput> {
    stage("config", cfg.validate())?;
    let splits = stage("data", prepare_splits(cfg))?;
    let keep_wall = cfg.run.record_wall_time;
    let name = &cfg.run.name;
    let mut rows = Vec::new();
    let mut push = |stage_tag: &str, trace: &RunTrace| {
        rows.extend(metrics::rows_from_trace(&format!("{name}/{stage_tag}"), trace, keep_wall));
    };

    let clean = if cfg.stages.pretrain {
        let (m, t) = stage_pretrain(cfg, &splits)?;
        push("pretrain", &t);
        Some((m, t))
    } else {
        None
    };
    let trigger_set = stage_triggers(cfg, &splits, clean.as_ref().map(|c| &c.0))?;
    let (watermarked, embed_trace) = stage_embed(cfg, &splits, &trigger_set)?;
    push("embed", &embed_trace);

    let mut verify = vec![NamedVerify {
        model: "watermarked".into(),
        result: stage_verify(cfg, &watermarked, &trigger_set, None)?,
    }];
    let mut attacks_out = Vec::new();
    if cfg.stages.attack {
        for &lr in &cfg.attack.lrs {
            let traj = cfg.stages.landscape && lr == cfg.landscape.attack_lr;
            let (am, at) = stage_attack(cfg, &splits, &watermarked, &trigger_set, lr, traj)?;
            push(&format!("finetune-{}", lr.name()), &at);
            verify.push(NamedVerify {
                model: format!("finetune-{}", lr.name()),
                result: stage_verify(cfg, &am, &trigger_set, None)?,
            });
            let restored = if cfg.stages.restore {
                let (rm, rt) = stage_restore(cfg, &splits, &am, &trigger_set, lr, traj)?;
                push(&format!("retrain-{}", lr.name()), &rt);
                verify.push(NamedVerify {
                    model: format!("retrain-{}", lr.name()),
                    result: stage_verify(cfg, &rm, &trigger_set, Some(&rt))?,
                });
                Some((rm, rt))
            } else {
                None
            };
            attacks_out.push(AttackRun {
                lr,
                model: am,
                trace: at,
                restored,
            });
        }
    }

    let blend = if cfg.stages.blend {
        let (bm, bt) = stage_blend(cfg, &splits, &watermarked, &trigger_set)?;
        push(&format!("blend-{}", cfg.blend.lr.name()), &bt);
        verify.push(NamedVerify {
            model: format!("blend-{}", cfg.blend.lr.name()),
            result: stage_verify(cfg, &bm, &trigger_set, None)?,
        });
        Some((bm, bt))
    } else {
        None
    };

    let control = match (&clean, cfg.stages.control) {
        (Some((cm, _)), true) => {
            let lr = cfg.landscape.attack_lr;
            let (am, at) = stage_attack(cfg, &splits, cm, &trigger_set, lr, false)?;
            push(&format!("control-finetune-{}", lr.name()), &at);
            let (rm, rt) = stage_restore(cfg, &splits, &am, &trigger_set, lr, false)?;
            push(&format!("control-retrain-{}", lr.name()), &rt);
            let v = stage_verify(cfg, &rm, &trigger_set, Some(&rt))?;
            verify.push(NamedVerify {
                model: "control".into(),
                result: v.clone(),
            });
            Some(ControlRun {
                attack: at,
                restore: rt,
                verify: v,
            })
        }
        _ => None,
    };

    let extraction = if cfg.stages.extract {
        let out = stage_extract(cfg, &splits, &watermarked, &trigger_set)?;
        push("extract", &out.trace);
        let agreement = stage("attack-extract", attacks::agreement(&watermarked, &out.surrogate, &splits.test.samples))?;
        let (rm, rt) = stage_restore(cfg, &splits, &out.surrogate, &trigger_set, cfg.extract.restore_lr, false)?;
        push("extract-retrain", &rt);
        let v = stage_verify(cfg, &rm, &trigger_set, Some(&rt))?;
        verify.push(NamedVerify {
            model: "extract-retrain".into(),
            result: v.clone(),
        });
        Some(ExtractionRun {
            outcome: out,
            agreement,
            restore: rt,
            verify: v,
        })
    } else {
        None
    };

    let landscape = if cfg.stages.landscape {
        let run = attacks_out
            .iter()
            .find(|a| a.lr == cfg.landscape.attack_lr)
            .ok_or_else(|| Error::Config("landscape attack lr missing".into()))?;
        let (rm, rt) = run.restored.as_ref().ok_or_else(|| Error::Config("landscape needs restore".into()))?;
        Some(stage_landscape(cfg, &watermarked, &run.trace, rt, rm, &trigger_set)?)
    } else {
        None
    };

    let wm_verify = verify[0].result.clone();
    if !cfg.stages.verify {
        verify.clear();
    }
    let summary = RunSummary {
        name: name.clone(),
        seed: cfg.run.seed,
        model: format!("{:?}", cfg.model.kind).to_lowercase(),
        strategy: cfg.embed.strategy().name().to_string(),
        trigger: cfg.triggers.kind.name().to_string(),
        labels: cfg.triggers.scheme().name().to_string(),
        clean_test_acc: clean.as_ref().and_then(|c| c.1.last().test_acc),
        test_acc: embed_trace.last().test_acc.unwrap_or(f64::NAN),
        trigger_acc: wm_verify.trigger_acc,
        watermarked: cfg.stages.verify.then_some(wm_verify.watermarked),
        restoration_gain: attacks_out
            .iter()
            .find(|a| a.lr == cfg.landscape.attack_lr)
            .and_then(|a| a.restored.as_ref())
            .and_then(|(_, rt)| protocols::restoration_gain(rt)),
    };

    let out = PipelineOutput {
        splits,
        clean,
        trigger_set,
        watermarked,
        embed_trace,
        attacks: attacks_out,
        blend,
        control,
        extraction,
        landscape,
        verify,
        rows,
        summary,
    };
    if write {
        stage("write-artifacts", write_artifacts(cfg, &out))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub name: String,
    pub seed: u64,
    pub files: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct CheckpointMeta<'a> {
    model: &'a str,
    phase: Option<Phase>,
    lr: Option<f64>,
    seed: u64,
    trigger: &'a str,
    labels: &'a str,
}

pub fn write_artifacts(cfg: &ExperimentConfig, out: &PipelineOutput) -> Result<()> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = vec!["config.toml".to_string(), "metrics.csv".into(), "verify.json".into(), "summary.json".into()];
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    metrics::write_csv(&out.rows, &dir.join("metrics.csv"))?;
    write_json(&dir.join("verify.json"), &out.verify)?;
    write_json(&dir.join("summary.json"), &out.summary)?;
    triggers::save_trigger_set(&out.trigger_set, &dir.join("triggers"))?;
    files.extend(["triggers.wmlb".to_string(), "triggers.json".into()]);

    if cfg.run.save_checkpoints {
        let cdir = dir.join("checkpoints");
        std::fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        let trig = cfg.triggers.kind.name();
        let labels = cfg.triggers.scheme().name();
        let mut save = |tag: &str, model: &Model, phase: Option<Phase>, lr: Option<f64>| -> Result<()> {
            nn::save_checkpoint(model, &cdir.join(format!("{tag}.wmlb")))?;
            write_json(
                &cdir.join(format!("{tag}.json")),
                &CheckpointMeta {
                    model: tag,
                    phase,
                    lr,
                    seed: cfg.run.seed,
                    trigger: trig,
                    labels,
                },
            )?;
            files.push(format!("checkpoints/{tag}.wmlb"));
            Ok(())
        };
        if let Some((m, _)) = &out.clean {
            save("clean", m, Some(Phase::Pretrain), None)?;
        }
        save("watermarked", &out.watermarked, Some(Phase::Embed), None)?;
        for a in &out.attacks {
            save(&format!("finetune-{}", a.lr.name()), &a.model, Some(Phase::Finetune), Some(a.lr.lr()))?;
            if let Some((rm, _)) = &a.restored {
                save(
                    &format!("retrain-{}", a.lr.name()),
                    rm,
                    Some(Phase::Retrain),
                    Some(cfg.restore.lr_for(a.lr)),
                )?;
            }
        }
        if let Some((bm, _)) = &out.blend {
            save(&format!("blend-{}", cfg.blend.lr.name()), bm, Some(Phase::Blend), Some(cfg.blend.lr.lr()))?;
        }
        if let Some(x) = &out.extraction {
            save("extracted", &x.outcome.surrogate, Some(Phase::Extract), None)?;
        }
    }

    let landscape_layer = if let Some(l) = &out.landscape {
        let ldir = dir.join("landscape");
        std::fs::create_dir_all(&ldir).map_err(|e| Error::io(&ldir, e))?;
        l.grid.write_csv(&ldir.join("grid.csv"))?;
        l.trajectory.write_csv(&ldir.join("trajectory.csv"))?;
        write_json(&ldir.join("meta.json"), &l.meta)?;
        files.extend(["landscape/grid.csv".to_string(), "landscape/trajectory.csv".into(), "landscape/meta.json".into()]);
        Some((&l.grid, l.meta.levels.as_slice(), &l.trajectory))
    } else {
        None
    };
    let plots_dir = dir.join("plots");
    for p in plots::render_plots(&out.rows, landscape_layer, &plots_dir)? {
        if let Ok(rel) = p.strip_prefix(&dir) {
            files.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            schema_version: CSV_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            name: cfg.run.name.clone(),
            seed: cfg.run.seed,
            files,
        },
    )
}
