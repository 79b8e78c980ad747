//! Removal attacks: all-layer fine-tuning and hard-label extraction.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::embedding::{check_compatible, DESK_TRAIN_BATCH};
use crate::error::{Error, Result};
use crate::nn::{self, LrSchedule, Model, ModelSpec};
use crate::rng;
use crate::training::{self, EvalSets, LoopSpec, Phase, RunTrace};

/// Fine-tuning learning rates under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLr {
    Small,
    Med,
    Big,
}

impl AttackLr {
    pub const ALL: [AttackLr; 3] = [AttackLr::Small, AttackLr::Med, AttackLr::Big];

    pub fn lr(&self) -> f64 {
        match self {
            AttackLr::Small => 1e-4,
            AttackLr::Med => 5e-4,
            AttackLr::Big => 1e-3,
        }
    }

    /// Clean-retraining lr paired with this attack lr.
    pub fn restore_lr(&self) -> f64 {
        match self {
            AttackLr::Small => 1e-4,
            AttackLr::Med | AttackLr::Big => 2e-4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackLr::Small => "small",
            AttackLr::Med => "med",
            AttackLr::Big => "big",
        }
    }

    pub fn parse(s: &str) -> Option<AttackLr> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub keep_checkpoints: bool,
}

impl FinetuneConfig {
    pub fn desk(lr: AttackLr, seed: u64) -> Self {
        Self {
            lr: lr.lr(),
            epochs: 50,
            weight_decay: 1e-4,
            batch: DESK_TRAIN_BATCH,
            seed,
            keep_checkpoints: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("fine-tune lr must be >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::invalid("fine-tune epochs and batch must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub surrogate: ModelSpec,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Number of queried samples; `None` queries the whole set.
    #[serde(default)]
    pub budget: Option<usize>,
}

impl ExtractConfig {
    pub fn desk(surrogate: ModelSpec, seed: u64) -> Self {
        Self {
            surrogate,
            schedule: LrSchedule::default_cosine(50),
            epochs: 50,
            batch: DESK_TRAIN_BATCH,
            weight_decay: 1e-4,
            seed,
            budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackConfig {
    Finetune(FinetuneConfig),
    Extract(ExtractConfig),
}

/// Continues training every parameter on `finetune_set` at a constant lr.
pub fn finetune(
    model: &Model,
    finetune_set: &LabeledDataset,
    config: &FinetuneConfig,
    eval: EvalSets<'_>,
) -> Result<(Model, RunTrace)> {
    config.validate()?;
    check_compatible(model.spec(), finetune_set)?;
    training::run_epochs(
        model.clone(),
        LoopSpec {
            phase: Phase::Finetune,
            epochs: config.epochs,
            schedule: LrSchedule::Constant { lr: config.lr },
            weight_decay: config.weight_decay,
            eval,
            keep_checkpoints: config.keep_checkpoints,
        },
        |m, opt, epoch| {
            training::clean_epoch(m, opt, finetune_set, config.batch, config.seed, Phase::Finetune, epoch, |_| Ok(()))
        },
    )
}

#[derive(Debug, Clone)]
pub struct ExtractOutcome {
    pub surrogate: Model,
    pub trace: RunTrace,
    /// The queried samples labelled by the victim's predictions.
    pub queried: LabeledDataset,
}

/// Trains a freshly initialized surrogate on the victim's hard labels.
pub fn extract(
    victim: &Model,
    train_set: &LabeledDataset,
    config: &ExtractConfig,
    eval: EvalSets<'_>,
) -> Result<ExtractOutcome> {
    let vs = victim.spec();
    let ss = &config.surrogate;
    if vs.input_shape != ss.input_shape || vs.num_classes != ss.num_classes {
        return Err(Error::invalid("surrogate and victim must share input shape and class count"));
    }
    if config.epochs == 0 || config.batch == 0 {
        return Err(Error::invalid("extraction epochs and batch must be >= 1"));
    }
    check_compatible(vs, train_set)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let budget = config.budget.unwrap_or(order.len());
    if budget == 0 || budget > order.len() {
        return Err(Error::invalid(format!(
            "query budget {budget} outside 1..={}",
            order.len()
        )));
    }
    if budget < order.len() {
        order.shuffle(&mut rng::stream(config.seed, "extract-queries"));
        order.truncate(budget);
        order.sort_unstable();
    }
    let inputs = train_set.samples.gather_rows(&order)?;
    let labels = nn::predict_batch(victim, &inputs)?;
    let queried = LabeledDataset::new(
        inputs,
        labels,
        vs.num_classes,
        format!("{}-victim-labels", train_set.name),
        crate::data::Provenance::Subset {
            parent: train_set.name.clone(),
        },
    )?;
    let surrogate = Model::init(ss.clone(), config.seed)?;
    let (surrogate, trace) = training::run_epochs(
        surrogate,
        LoopSpec {
            phase: Phase::Extract,
            epochs: config.epochs,
            schedule: config.schedule,
            weight_decay: config.weight_decay,
            eval,
            keep_checkpoints: false,
        },
        |m, opt, epoch| training::clean_epoch(m, opt, &queried, config.batch, config.seed, Phase::Extract, epoch, |_| Ok(())),
    )?;
    Ok(ExtractOutcome {
        surrogate,
        trace,
        queried,
    })
}

/// Fraction of inputs on which two models predict the same class.
pub fn agreement(a: &Model, b: &Model, inputs: &crate::nn::Tensor) -> Result<f64> {
    let pa = nn::predict_batch(a, inputs)?;
    let pb = nn::predict_batch(b, inputs)?;
    if pa.is_empty() {
        return Err(Error::invalid("agreement over an empty input set"));
    }
    Ok(pa.iter().zip(&pb).filter(|(x, y)| x == y).count() as f64 / pa.len() as f64)
}
