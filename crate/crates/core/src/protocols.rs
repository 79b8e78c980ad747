//! Watermark restoration by clean retraining, blended fine-tuning and the
//! ownership decision rule.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackLr;
use crate::data::LabeledDataset;
use crate::embedding::{check_compatible, DESK_TRAIN_BATCH};
use crate::error::{Error, Result};
use crate::nn::{self, LrSchedule, Model, Tensor};
use crate::training::{self, EvalSets, LoopSpec, Phase, RunTrace, StepCtx};
use crate::triggers::{fingerprint, TriggerSet};

pub const DEFAULT_ALPHA: f64 = 1e-6;

/// Rejects any training batch containing a trigger sample.
pub struct TriggerGuard {
    prints: HashSet<Vec<u32>>,
    phase: Phase,
}

impl TriggerGuard {
    pub fn new(trigger_set: &TriggerSet, phase: Phase) -> Self {
        Self {
            prints: trigger_set.fingerprints(),
            phase,
        }
    }

    pub fn check(&self, batch: &Tensor) -> Result<()> {
        if (0..batch.rows()).any(|i| self.prints.contains(&fingerprint(batch.row(i)))) {
            return Err(Error::TriggerLeak {
                phase: self.phase.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestoreConfig {
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub keep_checkpoints: bool,
}

impl RestoreConfig {
    /// 30 epochs at the lr paired with the attack strength.
    pub fn for_attack(attack: AttackLr, seed: u64) -> Self {
        Self {
            lr: attack.restore_lr(),
            epochs: 30,
            weight_decay: 1e-4,
            batch: DESK_TRAIN_BATCH,
            seed,
            keep_checkpoints: false,
        }
    }
}

/// Retrains on the original clean training split. The trigger set is only
/// ever evaluated; every training batch is checked against it.
pub fn restore(
    model: &Model,
    train_set: &LabeledDataset,
    config: &RestoreConfig,
    trigger_set: &TriggerSet,
    test_set: Option<&LabeledDataset>,
) -> Result<(Model, RunTrace)> {
    if !(config.lr > 0.0) || config.epochs == 0 || config.batch == 0 {
        return Err(Error::invalid("restore needs lr > 0, epochs >= 1 and batch >= 1"));
    }
    check_compatible(model.spec(), train_set)?;
    let guard = TriggerGuard::new(trigger_set, Phase::Retrain);
    training::run_epochs(
        model.clone(),
        LoopSpec {
            phase: Phase::Retrain,
            epochs: config.epochs,
            schedule: LrSchedule::Constant { lr: config.lr },
            weight_decay: config.weight_decay,
            eval: EvalSets {
                test: test_set,
                trigger: Some(trigger_set),
            },
            keep_checkpoints: config.keep_checkpoints,
        },
        |m, opt, epoch| {
            training::clean_epoch(m, opt, train_set, config.batch, config.seed, Phase::Retrain, epoch, |x| {
                guard.check(x)
            })
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub train_batch: usize,
    pub finetune_batch: usize,
    /// A train batch follows every `mix_every`-th finetune batch.
    pub mix_every: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl BlendConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            train_batch: DESK_TRAIN_BATCH,
            finetune_batch: DESK_TRAIN_BATCH,
            mix_every: 2,
            epochs: 50,
            lr: AttackLr::Med.lr(),
            weight_decay: 1e-4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mix_every == 0 || self.train_batch == 0 || self.finetune_batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("blend needs M, batch sizes and epochs >= 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::invalid("blend lr must be >= 0"));
        }
        Ok(())
    }
}

/// One step of the blended loop. Indices are 1-based batch numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchKind {
    Finetune(usize),
    Train(usize),
}

/// Step order of one blended epoch: finetune batch i, followed by train
/// batch i/M whenever M divides i.
pub fn blend_schedule(num_batch: usize, mix_every: usize) -> Vec<BatchKind> {
    assert!(mix_every >= 1, "mix interval must be >= 1");
    let mut out = Vec::with_capacity(num_batch + num_batch / mix_every);
    for i in 1..=num_batch {
        out.push(BatchKind::Finetune(i));
        if i % mix_every == 0 {
            out.push(BatchKind::Train(i / mix_every));
        }
    }
    out
}

/// `[(j-1)B, jB)` clipped to `len`; empty once past the end.
fn batch_range(j: usize, batch: usize, len: usize) -> std::ops::Range<usize> {
    let start = ((j - 1) * batch).min(len);
    start..(j * batch).min(len)
}

/// Fine-tuning with clean training batches interleaved. Returns the steps
/// actually taken for every epoch alongside the trace.
pub fn blended_finetune(
    model: &Model,
    train_set: &LabeledDataset,
    finetune_set: &LabeledDataset,
    config: &BlendConfig,
    eval: EvalSets<'_>,
) -> Result<(Model, RunTrace, Vec<Vec<BatchKind>>)> {
    config.validate()?;
    check_compatible(model.spec(), train_set)?;
    check_compatible(model.spec(), finetune_set)?;
    let guard = eval.trigger.map(|t| TriggerGuard::new(t, Phase::Blend));
    let num_batch = finetune_set.len().div_ceil(config.finetune_batch);
    let schedule = blend_schedule(num_batch, config.mix_every);
    let mut log = Vec::with_capacity(config.epochs);
    let (model, trace) = training::run_epochs(
        model.clone(),
        LoopSpec {
            phase: Phase::Blend,
            epochs: config.epochs,
            schedule: LrSchedule::Constant { lr: config.lr },
            weight_decay: config.weight_decay,
            eval,
            keep_checkpoints: false,
        },
        |m, opt, epoch| {
            let seed = training::epoch_seed(config.seed, "blend", epoch);
            let f_order = shuffled(finetune_set.len(), crate::rng::derive_seed(seed, "finetune"));
            let t_order = shuffled(train_set.len(), crate::rng::derive_seed(seed, "train"));
            let mut taken = Vec::with_capacity(schedule.len());
            let mut total = 0.0;
            let mut count = 0;
            for &kind in &schedule {
                let (set, order, range) = match kind {
                    BatchKind::Finetune(i) => (finetune_set, &f_order, batch_range(i, config.finetune_batch, f_order.len())),
                    BatchKind::Train(j) => (train_set, &t_order, batch_range(j, config.train_batch, t_order.len())),
                };
                if range.is_empty() {
                    continue;
                }
                let (x, y) = set.batch(&order[range])?;
                if let Some(g) = &guard {
                    g.check(&x)?;
                }
                let ctx = StepCtx {
                    phase: Phase::Blend,
                    epoch,
                    step: opt.t as usize + 1,
                };
                let loss = training::plain_step(m, opt, &x, &y, None, ctx)?;
                if matches!(kind, BatchKind::Finetune(_)) {
                    total += loss * y.len() as f64;
                    count += y.len();
                }
                taken.push(kind);
            }
            log.push(taken);
            Ok(total / count as f64)
        },
    )?;
    Ok((model, trace, log))
}

fn shuffled(len: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..len).collect();
    v.shuffle(&mut crate::rng::rng_from(seed));
    v
}

/// `P[X >= k]` for `X ~ Binomial(n, p)`, summed in log space.
pub fn binomial_tail(k: usize, n: usize, p: f64) -> f64 {
    assert!((0.0..=1.0).contains(&p), "probability out of range");
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if p == 0.0 {
        return 0.0;
    }
    if p == 1.0 {
        return 1.0;
    }
    let mut ln_fact = vec![0.0f64; n + 1];
    for i in 1..=n {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let terms: Vec<f64> = (k..=n)
        .map(|i| ln_fact[n] - ln_fact[i] - ln_fact[n - i] + i as f64 * lp + (n - i) as f64 * lq)
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln()).exp().min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResult {
    pub trigger_acc: f64,
    pub hits: usize,
    pub n: usize,
    pub chance: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub watermarked: bool,
    /// Max retrain trigger accuracy minus the post-attack accuracy.
    pub restoration_gain: Option<f64>,
}

/// Max trigger accuracy over retraining epochs minus the accuracy the
/// retraining started from.
pub fn restoration_gain(restore_trace: &RunTrace) -> Option<f64> {
    let start = restore_trace.initial().trigger_acc?;
    Some(restore_trace.max_trigger_acc()? - start)
}

/// Binomial test of trigger hits against chance level `1/K`.
pub fn verify_ownership(
    model: &Model,
    trigger_set: &TriggerSet,
    alpha: f64,
    restore_trace: Option<&RunTrace>,
) -> Result<VerifyResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if trigger_set.is_empty() {
        return Err(Error::invalid("empty trigger set"));
    }
    let preds = nn::predict_batch(model, &trigger_set.samples)?;
    let hits = preds.iter().zip(&trigger_set.labels).filter(|(a, b)| a == b).count();
    Ok(decide(hits, trigger_set.len(), model.spec().num_classes, alpha, restore_trace.and_then(restoration_gain)))
}

/// The decision rule on raw counts.
pub fn decide(hits: usize, n: usize, num_classes: usize, alpha: f64, restoration_gain: Option<f64>) -> VerifyResult {
    let chance = 1.0 / num_classes as f64;
    let p_value = binomial_tail(hits, n, chance);
    VerifyResult {
        trigger_acc: hits as f64 / n as f64,
        hits,
        n,
        chance,
        p_value,
        alpha,
        watermarked: p_value < alpha,
        restoration_gain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        use BatchKind::*;
        assert_eq!(
            blend_schedule(6, 2),
            vec![Finetune(1), Finetune(2), Train(1), Finetune(3), Finetune(4), Train(2), Finetune(5), Finetune(6), Train(3)]
        );
        assert_eq!(blend_schedule(5, 3).iter().filter(|k| matches!(k, Train(_))).count(), 1);
        let m1 = blend_schedule(4, 1);
        assert_eq!(m1.len(), 8);
        assert!(m1.chunks(2).all(|c| matches!(c, [Finetune(_), Train(_)])));
    }

    #[test]
    fn batch_ranges_clip_without_wrapping() {
        assert_eq!(batch_range(1, 4, 10), 0..4);
        assert_eq!(batch_range(3, 4, 10), 8..10);
        assert!(batch_range(4, 4, 10).is_empty());
    }

    #[test]
    fn tail_edge_cases() {
        assert_eq!(binomial_tail(0, 200, 0.1), 1.0);
        let full = binomial_tail(200, 200, 0.1);
        assert!((full / 1e-200 - 1.0).abs() < 1e-9, "{full}");
        assert!(decide(200, 200, 10, DEFAULT_ALPHA, None).watermarked);
        assert!(!decide(0, 200, 10, DEFAULT_ALPHA, None).watermarked);
    }
}
