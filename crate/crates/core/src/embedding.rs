//! Clean pretraining and watermark embedding by trigger-set poisoning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, LrSchedule, Model, ModelSpec, OptimizerState, ParamVector, Tensor};
use crate::rng::{self, LabRng};
use crate::training::{self, EvalSets, LoopSpec, Phase, RunTrace, StepCtx};
use crate::triggers::TriggerSet;

/// Desk batch sizes: 256 / 64 scaled by 1/8, keeping the clean-to-trigger
/// ratio and a comparable number of optimizer steps per epoch.
pub const DESK_TRAIN_BATCH: usize = 32;
pub const DESK_WM_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedStrategy {
    /// Train on clean and trigger batches together.
    JointPoison,
    /// Only one layer group is trainable per iteration, round-robin.
    LayerRotation,
    /// Gradient averaged over noised copies of the parameters.
    SmoothedGrad { n_copies: usize, noise_std: f32 },
}

impl EmbedStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            EmbedStrategy::JointPoison => "joint",
            EmbedStrategy::LayerRotation => "rotation",
            EmbedStrategy::SmoothedGrad { .. } => "smoothed",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let EmbedStrategy::SmoothedGrad { n_copies, noise_std } = *self {
            if n_copies == 0 || !(noise_std > 0.0) {
                return Err(Error::invalid(format!(
                    "smoothed gradients need n_copies >= 1 and noise_std > 0 (got {n_copies}, {noise_std})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub train_batch: usize,
    pub wm_batch: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub keep_checkpoints: bool,
}

impl TrainConfig {
    /// 50 epochs, cosine 1e-3 -> 1e-5, weight decay 1e-4, desk batch sizes.
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 50,
            train_batch: DESK_TRAIN_BATCH,
            wm_batch: DESK_WM_BATCH,
            schedule: LrSchedule::default_cosine(50),
            weight_decay: 1e-4,
            seed,
            keep_checkpoints: false,
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        if let LrSchedule::Cosine { total_epochs, .. } = &mut self.schedule {
            *total_epochs = epochs;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.train_batch == 0 || self.wm_batch == 0 {
            return Err(Error::invalid("epochs and batch sizes must be >= 1"));
        }
        self.schedule.validate()
    }
}

/// Trains a fresh model on clean data only.
pub fn pretrain_clean(
    spec: &ModelSpec,
    pretrain_set: &LabeledDataset,
    config: &TrainConfig,
    eval: EvalSets<'_>,
) -> Result<(Model, RunTrace)> {
    config.validate()?;
    check_compatible(spec, pretrain_set)?;
    let model = Model::init(spec.clone(), config.seed)?;
    training::run_epochs(
        model,
        LoopSpec {
            phase: Phase::Pretrain,
            epochs: config.epochs,
            schedule: config.schedule,
            weight_decay: config.weight_decay,
            eval,
            keep_checkpoints: config.keep_checkpoints,
        },
        |model, opt, epoch| {
            training::clean_epoch(
                model,
                opt,
                pretrain_set,
                config.train_batch,
                config.seed,
                Phase::Pretrain,
                epoch,
                |_| Ok(()),
            )
        },
    )
}

pub(crate) fn check_compatible(spec: &ModelSpec, data: &LabeledDataset) -> Result<()> {
    if data.image_shape() != spec.input_shape {
        return Err(Error::invalid(format!(
            "dataset images {:?} do not match model input {:?}",
            data.image_shape(),
            spec.input_shape
        )));
    }
    if data.num_classes > spec.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model only {}",
            data.num_classes, spec.num_classes
        )));
    }
    Ok(())
}

/// Starting point for embedding.
#[derive(Debug, Clone)]
pub enum EmbedInit {
    Fresh(ModelSpec),
    From(Model),
}

/// Layer group trainable at a given iteration under rotation.
pub fn rotation_group(iteration: usize, groups: usize) -> usize {
    iteration % groups
}

/// Mean gradient over `n_copies` evaluations at `theta + N(0, std^2)`,
/// reduced in copy order.
pub fn smoothed_gradient(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    n_copies: usize,
    noise_std: f32,
    rng: &mut LabRng,
) -> Result<(f64, ParamVector)> {
    let mut acc = vec![0.0f64; model.num_params()];
    let mut loss = 0.0;
    for _ in 0..n_copies {
        let noisy = model.perturbed(noise_std, rng);
        let (l, g) = nn::loss_and_grads(&noisy, x, y)?;
        loss += l;
        for (a, &v) in acc.iter_mut().zip(&g.0) {
            *a += f64::from(v);
        }
    }
    let n = n_copies as f64;
    Ok((
        loss / n,
        ParamVector(acc.into_iter().map(|v| (v / n) as f32).collect()),
    ))
}

/// One embedding iteration on the concatenated clean + trigger batch.
pub(crate) fn embed_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    x: &Tensor,
    y: &[usize],
    strategy: EmbedStrategy,
    iteration: usize,
    noise_rng: &mut LabRng,
    ctx: StepCtx,
) -> Result<f64> {
    match strategy {
        EmbedStrategy::JointPoison => training::plain_step(model, opt, x, y, None, ctx),
        EmbedStrategy::LayerRotation => {
            let group = rotation_group(iteration, model.layout().num_groups());
            let mask = model.layout().group_mask(group);
            training::plain_step(model, opt, x, y, Some(&mask), ctx)
        }
        EmbedStrategy::SmoothedGrad { n_copies, noise_std } => {
            let (loss, grads) = smoothed_gradient(model, x, y, n_copies, noise_std, noise_rng)
                .map_err(|e| training::with_ctx(e, ctx))?;
            nn::adam_step(model, &grads, opt, None).map_err(|e| training::with_ctx(e, ctx))?;
            Ok(loss)
        }
    }
}

/// Embeds the trigger set: every iteration draws one clean batch and the
/// next trigger batch (cycling through a per-epoch shuffle of the trigger
/// set), concatenates them and takes one optimizer step.
pub fn embed(
    init: EmbedInit,
    train_set: &LabeledDataset,
    trigger_set: &TriggerSet,
    strategy: EmbedStrategy,
    config: &TrainConfig,
    eval: EvalSets<'_>,
) -> Result<(Model, RunTrace)> {
    config.validate()?;
    strategy.validate()?;
    if trigger_set.is_empty() {
        return Err(Error::invalid("empty trigger set"));
    }
    let model = match init {
        EmbedInit::Fresh(spec) => Model::init(spec, config.seed)?,
        EmbedInit::From(m) => m,
    };
    check_compatible(model.spec(), train_set)?;
    if trigger_set.image_shape() != model.spec().input_shape {
        return Err(Error::invalid("trigger samples do not match model input"));
    }
    if let Some(&y) = trigger_set.labels.iter().find(|&&y| y >= model.spec().num_classes) {
        return Err(Error::invalid(format!("trigger label {y} outside model classes")));
    }
    let mut noise_rng = rng::stream(config.seed, rng::streams::SMOOTHING);
    let mut iteration = 0usize;
    training::run_epochs(
        model,
        LoopSpec {
            phase: Phase::Embed,
            epochs: config.epochs,
            schedule: config.schedule,
            weight_decay: config.weight_decay,
            eval,
            keep_checkpoints: config.keep_checkpoints,
        },
        |model, opt, epoch| {
            let seed = training::epoch_seed(config.seed, "embed", epoch);
            let batches = crate::data::batches(train_set.len(), config.train_batch, seed)?;
            let mut trig_order: Vec<usize> = (0..trigger_set.len()).collect();
            trig_order.shuffle(&mut rng::rng_from(rng::derive_seed(seed, "trigger-order")));
            let mut total = 0.0;
            let mut count = 0;
            for (j, idx) in batches.iter().enumerate() {
                let t_idx: Vec<usize> = (0..config.wm_batch)
                    .map(|i| trig_order[(j * config.wm_batch + i) % trig_order.len()])
                    .collect();
                let (cx, cy) = train_set.batch(idx)?;
                let (tx, ty) = trigger_set.batch(&t_idx)?;
                let x = Tensor::concat_rows(&[&cx, &tx])?;
                let y: Vec<usize> = cy.into_iter().chain(ty).collect();
                let ctx = StepCtx {
                    phase: Phase::Embed,
                    epoch,
                    step: opt.t as usize + 1,
                };
                let loss = embed_step(model, opt, &x, &y, strategy, iteration, &mut noise_rng, ctx)?;
                iteration += 1;
                total += loss * y.len() as f64;
                count += y.len();
            }
            Ok(total / count as f64)
        },
    )
}

/// Fraction of trigger samples classified as their assigned label.
pub fn evaluate_watermark(model: &Model, trigger_set: &TriggerSet) -> Result<f64> {
    if trigger_set.is_empty() {
        return Err(Error::invalid("empty trigger set"));
    }
    nn::accuracy(model, &trigger_set.samples, &trigger_set.labels)
}
