//! Epoch loop shared by every training phase: schedules, per-epoch
//! evaluation, checkpoint snapshots and divergence context.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, LrSchedule, Model, OptimizerState, ParamVector, Tensor};
use crate::rng;
use crate::triggers::TriggerSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Embed,
    Finetune,
    Retrain,
    Blend,
    Extract,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Embed => "embed",
            Phase::Finetune => "finetune",
            Phase::Retrain => "retrain",
            Phase::Blend => "blend",
            Phase::Extract => "extract",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        [
            Phase::Pretrain,
            Phase::Embed,
            Phase::Finetune,
            Phase::Retrain,
            Phase::Blend,
            Phase::Extract,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metrics after an epoch. Epoch 0 is the state before any training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub test_acc: Option<f64>,
    pub trigger_acc: Option<f64>,
    pub train_loss: Option<f64>,
    pub trigger_loss: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub phase: Phase,
    pub epochs: Vec<EpochMetrics>,
    /// Parameters after each epoch (1..=N) when snapshots were requested.
    pub checkpoints: Vec<ParamVector>,
}

impl RunTrace {
    pub fn initial(&self) -> &EpochMetrics {
        &self.epochs[0]
    }

    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().expect("trace has an initial row")
    }

    /// Trigger accuracies for epochs 1..=N.
    pub fn trigger_accs(&self) -> Vec<f64> {
        self.epochs[1..].iter().filter_map(|e| e.trigger_acc).collect()
    }

    pub fn max_trigger_acc(&self) -> Option<f64> {
        self.trigger_accs().into_iter().reduce(f64::max)
    }
}

/// Evaluation targets logged after every epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalSets<'a> {
    pub test: Option<&'a LabeledDataset>,
    pub trigger: Option<&'a TriggerSet>,
}

pub(crate) fn evaluate(
    model: &Model,
    eval: EvalSets<'_>,
    epoch: usize,
    lr: f64,
    train_loss: Option<f64>,
    started: Instant,
) -> Result<EpochMetrics> {
    let test_acc = eval
        .test
        .map(|t| nn::accuracy(model, &t.samples, &t.labels))
        .transpose()?;
    let (trigger_acc, trigger_loss) = match eval.trigger {
        Some(t) => (
            Some(nn::accuracy(model, &t.samples, &t.labels)?),
            Some(nn::loss(model, &t.samples, &t.labels)?),
        ),
        None => (None, None),
    };
    Ok(EpochMetrics {
        epoch,
        lr,
        test_acc,
        trigger_acc,
        train_loss,
        trigger_loss,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// Position inside a run, attached to divergence errors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepCtx {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
}

pub(crate) fn with_ctx(err: Error, ctx: StepCtx) -> Error {
    match err {
        Error::Diverged { loss, .. } => Error::Diverged {
            phase: ctx.phase.to_string(),
            epoch: ctx.epoch,
            step: ctx.step,
            loss,
        },
        other => other,
    }
}

/// One plain optimizer step on a batch.
pub(crate) fn plain_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    x: &Tensor,
    y: &[usize],
    mask: Option<&[bool]>,
    ctx: StepCtx,
) -> Result<f64> {
    let (loss, grads) = nn::loss_and_grads(model, x, y).map_err(|e| with_ctx(e, ctx))?;
    nn::adam_step(model, &grads, opt, mask).map_err(|e| with_ctx(e, ctx))?;
    Ok(loss)
}

pub(crate) struct LoopSpec<'a> {
    pub phase: Phase,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub eval: EvalSets<'a>,
    pub keep_checkpoints: bool,
}

/// Runs `epochs` epochs. `body(model, opt, epoch)` performs one epoch of
/// steps (epoch is 1-based) and returns the mean training loss.
pub(crate) fn run_epochs<F>(mut model: Model, spec: LoopSpec<'_>, mut body: F) -> Result<(Model, RunTrace)>
where
    F: FnMut(&mut Model, &mut OptimizerState, usize) -> Result<f64>,
{
    if spec.epochs == 0 {
        return Err(Error::invalid("epochs must be >= 1"));
    }
    spec.schedule.validate()?;
    let started = Instant::now();
    let mut opt = OptimizerState::for_model(&model, spec.schedule.lr_at(0), spec.weight_decay);
    let mut trace = RunTrace {
        phase: spec.phase,
        epochs: vec![evaluate(&model, spec.eval, 0, spec.schedule.lr_at(0), None, started)?],
        checkpoints: Vec::new(),
    };
    for epoch in 1..=spec.epochs {
        let lr = spec.schedule.lr_at(epoch - 1);
        opt.lr = lr;
        let train_loss = body(&mut model, &mut opt, epoch)?;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                phase: spec.phase.to_string(),
                epoch,
                step: opt.t as usize,
                loss: train_loss,
            });
        }
        trace
            .epochs
            .push(evaluate(&model, spec.eval, epoch, lr, Some(train_loss), started)?);
        if spec.keep_checkpoints {
            trace.checkpoints.push(model.flatten());
        }
        log::debug!("{} epoch {epoch}: {:?}", spec.phase, trace.last());
    }
    Ok((model, trace))
}

/// Per-epoch shuffle seed for a named loop.
pub(crate) fn epoch_seed(seed: u64, stream: &str, epoch: usize) -> u64 {
    rng::derive_index(rng::derive_seed(seed, stream), epoch as u64)
}

/// Standard epoch over one dataset with shuffled batches.
pub(crate) fn clean_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    data: &LabeledDataset,
    batch_size: usize,
    seed: u64,
    phase: Phase,
    epoch: usize,
    mut inspect: impl FnMut(&Tensor) -> Result<()>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let batches = crate::data::batches(data.len(), batch_size, epoch_seed(seed, phase.as_str(), epoch))?;
    for idx in &batches {
        let (x, y) = data.batch(idx)?;
        inspect(&x)?;
        let ctx = StepCtx {
            phase,
            epoch,
            step: opt.t as usize + 1,
        };
        total += plain_step(model, opt, &x, &y, None, ctx)? * idx.len() as f64;
        count += idx.len();
    }
    Ok(total / count as f64)
}
