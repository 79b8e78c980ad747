use rand::seq::SliceRandom;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;

pub const TRIGGER_BASE_SIZE: usize = 200;

/// Where the test partition comes from.
#[derive(Debug, Clone)]
pub enum TestSource {
    /// Hold out this many samples of the dataset (drawn first).
    Holdout(usize),
    /// A separate test dataset; the whole input is the train pool.
    Provided(LabeledDataset),
}

/// Trigger base, pretrain, finetune and test partitions. Index vectors refer
/// to the dataset passed to [`make_splits`]; `test_indices` is empty for a
/// provided test set.
#[derive(Debug, Clone)]
pub struct SplitBundle {
    pub trigger_base: LabeledDataset,
    pub pretrain: LabeledDataset,
    pub finetune: LabeledDataset,
    pub test: LabeledDataset,
    pub split_seed: u64,
    pub trigger_base_indices: Vec<usize>,
    pub pretrain_indices: Vec<usize>,
    pub finetune_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Round-half-up of 70% of `remaining`.
pub(crate) fn pretrain_count(remaining: usize) -> usize {
    (7 * remaining + 5) / 10
}

/// Seeded partition: test holdout (if any), then 200 trigger-base samples,
/// then 70% / 30% of the rest for pretraining / fine-tuning.
pub fn make_splits(dataset: &LabeledDataset, test: TestSource, split_seed: u64) -> Result<SplitBundle> {
    let holdout = match &test {
        TestSource::Holdout(n) => *n,
        TestSource::Provided(_) => 0,
    };
    // at least one sample each for pretrain and finetune
    if dataset.len() < holdout + TRIGGER_BASE_SIZE + 2 {
        return Err(Error::invalid(format!(
            "dataset of {} samples too small for {holdout} test + {TRIGGER_BASE_SIZE} trigger samples",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(split_seed, rng::streams::SPLIT));
    let (test_idx, rest) = order.split_at(holdout);
    let (trigger_idx, remaining) = rest.split_at(TRIGGER_BASE_SIZE);
    let n_pre = pretrain_count(remaining.len());
    let (pre_idx, fine_idx) = remaining.split_at(n_pre);
    if pre_idx.is_empty() || fine_idx.is_empty() {
        return Err(Error::invalid("pretrain and finetune splits must be non-empty"));
    }
    let test = match test {
        TestSource::Holdout(_) => {
            if test_idx.is_empty() {
                return Err(Error::invalid("test holdout must be non-empty"));
            }
            dataset.subset(test_idx, "test")?
        }
        TestSource::Provided(ds) => {
            if ds.image_shape() != dataset.image_shape() {
                return Err(Error::invalid("test set image shape differs from train pool"));
            }
            ds
        }
    };
    Ok(SplitBundle {
        trigger_base: dataset.subset(trigger_idx, "trigger-base")?,
        pretrain: dataset.subset(pre_idx, "pretrain")?,
        finetune: dataset.subset(fine_idx, "finetune")?,
        test,
        split_seed,
        trigger_base_indices: trigger_idx.to_vec(),
        pretrain_indices: pre_idx.to_vec(),
        finetune_indices: fine_idx.to_vec(),
        test_indices: test_idx.to_vec(),
    })
}

/// Seeded permutation of `0..len` cut into batches; the last partial batch is kept.
pub fn batches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::rng_from(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
