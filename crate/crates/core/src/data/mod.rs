//! Labeled image datasets, the trigger/pretrain/finetune/test partition and
//! seeded batching.

mod idx;
mod split;
mod synth;

pub use idx::{encode_idx_images, encode_idx_labels, load_idx, read_idx_images, read_idx_labels};
pub use split::{batches, make_splits, SplitBundle, TestSource, TRIGGER_BASE_SIZE};
pub use synth::{synth_generate, SynthFamily, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    File { images: String, labels: String },
    Synthetic { seed: u64, family: SynthFamily },
    Subset { parent: String },
}

/// Images `N x H x W x C` with values in `[0, 1]` and one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        samples: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        if samples.shape().len() != 4 {
            return Err(Error::invalid(format!(
                "samples must be N x H x W x C, got {:?}",
                samples.shape()
            )));
        }
        if samples.rows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {y} outside [0, {num_classes})")));
        }
        if let Some(v) = samples.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
            name: name.into(),
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.samples.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let samples = self.samples.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            samples,
            labels,
            num_classes: self.num_classes,
            name: name.into(),
            provenance: Provenance::Subset {
                parent: self.name.clone(),
            },
        })
    }

    /// Samples and labels for one batch of indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.samples.gather_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Copy with every label replaced.
    pub fn relabeled(&self, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        Self::new(
            self.samples.clone(),
            labels,
            self.num_classes,
            name,
            self.provenance.clone(),
        )
    }
}

/// Nearest-neighbour resize of every image to `[h, w]`; channels must match.
pub fn resize_nearest(samples: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = samples.shape();
    let (n, sh, sw, c) = (s[0], s[1], s[2], s[3]);
    if (sh, sw) == (h, w) {
        return Ok(samples.clone());
    }
    let mut out = Vec::with_capacity(n * h * w * c);
    for i in 0..n {
        let img = samples.row(i);
        for y in 0..h {
            let sy = (y * sh / h).min(sh - 1);
            for x in 0..w {
                let sx = (x * sw / w).min(sw - 1);
                let src = (sy * sw + sx) * c;
                out.extend_from_slice(&img[src..src + c]);
            }
        }
    }
    Tensor::new(vec![n, h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels_and_labels() {
        let t = Tensor::new(vec![1, 1, 2, 1], vec![0.0, 1.5]).unwrap();
        assert!(LabeledDataset::new(t, vec![0], 2, "x", Provenance::Subset { parent: "p".into() }).is_err());
        let t = Tensor::new(vec![1, 1, 2, 1], vec![0.0, 1.0]).unwrap();
        assert!(LabeledDataset::new(t, vec![2], 2, "x", Provenance::Subset { parent: "p".into() }).is_err());
    }

    #[test]
    fn nearest_resize() {
        let t = Tensor::new(vec![1, 2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = resize_nearest(&t, 4, 4).unwrap();
        assert_eq!(&r.data()[..4], &[0.1, 0.1, 0.2, 0.2]);
        assert_eq!(&r.data()[12..], &[0.3, 0.3, 0.4, 0.4]);
    }
}
