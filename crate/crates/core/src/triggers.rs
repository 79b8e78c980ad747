//! Trigger-set construction (noise, content patch, out-of-distribution,
//! FGSM) and the single/multi labeling schemes.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{resize_nearest, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{self, checkpoint, Model, Tensor};
use crate::rng;

pub const DEFAULT_NOISE_STD: f32 = 0.15;
pub const DEFAULT_FGSM_EPSILON: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub row: usize,
    pub col: usize,
    pub value: f32,
}

impl Default for PatchSpec {
    /// 6x6 white square in the top-left corner.
    fn default() -> Self {
        Self {
            size: 6,
            row: 0,
            col: 0,
            value: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TriggerType {
    Noise { strength: f32 },
    Content { patch: PatchSpec },
    Unrelated { source: String },
    Fgsm { epsilon: f32 },
}

impl TriggerType {
    pub fn name(&self) -> &'static str {
        match self {
            TriggerType::Noise { .. } => "noise",
            TriggerType::Content { .. } => "content",
            TriggerType::Unrelated { .. } => "unrelated",
            TriggerType::Fgsm { .. } => "fgsm",
        }
    }

    pub fn is_fgsm(&self) -> bool {
        matches!(self, TriggerType::Fgsm { .. })
    }

    pub fn validate(&self, image: [usize; 3]) -> Result<()> {
        match self {
            TriggerType::Noise { strength } if !(*strength > 0.0) => {
                Err(Error::invalid(format!("noise strength must be > 0, got {strength}")))
            }
            TriggerType::Fgsm { epsilon } if !(*epsilon > 0.0 && *epsilon <= 0.5) => {
                Err(Error::invalid(format!("FGSM epsilon must be in (0, 0.5], got {epsilon}")))
            }
            TriggerType::Content { patch }
                if patch.size == 0
                    || patch.row + patch.size > image[0]
                    || patch.col + patch.size > image[1] =>
            {
                Err(Error::invalid(format!("patch {patch:?} does not fit a {image:?} image")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelScheme {
    Single { target: usize },
    Multi,
}

impl LabelScheme {
    pub fn name(&self) -> &'static str {
        match self {
            LabelScheme::Single { .. } => "single",
            LabelScheme::Multi => "multi",
        }
    }
}

/// Inputs available to trigger generation.
#[derive(Debug, Clone, Copy)]
pub struct TriggerSources<'a> {
    /// The withdrawn trigger-base samples.
    pub base: &'a LabeledDataset,
    /// Out-of-distribution source for `Unrelated`.
    pub ood: Option<&'a LabeledDataset>,
    /// Clean pretrained model for `Fgsm`.
    pub clean_model: Option<&'a Model>,
}

/// Unlabeled trigger samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTriggers {
    pub samples: Tensor,
    pub original_labels: Vec<usize>,
    /// Clean-model predictions on the perturbed samples (FGSM only).
    pub y_adv: Option<Vec<usize>>,
}

fn clip01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

/// Produces `base.len()` trigger samples of the given type.
pub fn generate(ty: &TriggerType, src: TriggerSources<'_>, seed: u64) -> Result<GeneratedTriggers> {
    let base = src.base;
    if base.is_empty() {
        return Err(Error::invalid("empty trigger base"));
    }
    let image = base.image_shape();
    ty.validate(image)?;
    let mut rng = rng::stream(seed, rng::streams::TRIGGERS);
    let count = base.len();
    match ty {
        TriggerType::Noise { strength } => {
            let normal = Normal::new(0.0f32, *strength).map_err(|e| Error::invalid(e.to_string()))?;
            let data = base
                .samples
                .data()
                .iter()
                .map(|&x| clip01(x + normal.sample(&mut rng)))
                .collect();
            Ok(GeneratedTriggers {
                samples: Tensor::new(base.samples.shape().to_vec(), data)?,
                original_labels: base.labels.clone(),
                y_adv: None,
            })
        }
        TriggerType::Content { patch } => {
            let mut samples = base.samples.clone();
            let [h, w, c] = image;
            let per = h * w * c;
            for img in samples.data_mut().chunks_exact_mut(per) {
                for y in patch.row..patch.row + patch.size {
                    for x in patch.col..patch.col + patch.size {
                        let at = (y * w + x) * c;
                        img[at..at + c].iter_mut().for_each(|v| *v = patch.value);
                    }
                }
            }
            Ok(GeneratedTriggers {
                samples,
                original_labels: base.labels.clone(),
                y_adv: None,
            })
        }
        TriggerType::Unrelated { .. } => {
            let ood = src
                .ood
                .ok_or_else(|| Error::invalid("unrelated triggers need an out-of-distribution source"))?;
            if ood.image_shape()[2] != image[2] {
                return Err(Error::invalid("out-of-distribution source has a different channel count"));
            }
            let picks: Vec<usize> = if ood.len() >= count {
                sample_indices(&mut rng, ood.len(), count).into_vec()
            } else {
                (0..count).map(|_| rng.random_range(0..ood.len())).collect()
            };
            let (raw, labels) = ood.batch(&picks)?;
            Ok(GeneratedTriggers {
                samples: resize_nearest(&raw, image[0], image[1])?,
                original_labels: labels.iter().map(|&y| y % base.num_classes).collect(),
                y_adv: None,
            })
        }
        TriggerType::Fgsm { epsilon } => {
            let model = src
                .clean_model
                .ok_or_else(|| Error::invalid("FGSM triggers need a clean pretrained model"))?;
            let grads = nn::input_gradients(model, &base.samples, &base.labels)?;
            let samples = fgsm_perturb(&base.samples, &grads, *epsilon)?;
            let y_adv = nn::predict_batch(model, &samples)?;
            Ok(GeneratedTriggers {
                samples,
                original_labels: base.labels.clone(),
                y_adv: Some(y_adv),
            })
        }
    }
}

/// `clip(x + eps * sign(grad), 0, 1)`; zero gradient leaves the pixel alone.
pub fn fgsm_perturb(x: &Tensor, grad: &Tensor, epsilon: f32) -> Result<Tensor> {
    if x.shape() != grad.shape() {
        return Err(Error::Shape {
            expected: x.shape().to_vec(),
            actual: grad.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            clip01(v + epsilon * s)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Labels under a scheme. Multi: `(y + 1) mod K`, or for FGSM triggers
/// (`y_adv` given) a seeded uniform draw from classes other than `y` and `y_adv`.
pub fn assign_labels(
    original_labels: &[usize],
    scheme: LabelScheme,
    y_adv: Option<&[usize]>,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if let Some(&y) = original_labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid(format!("original label {y} outside [0, {num_classes})")));
    }
    match scheme {
        LabelScheme::Single { target } => {
            if target >= num_classes {
                return Err(Error::invalid(format!("target {target} outside [0, {num_classes})")));
            }
            Ok(vec![target; original_labels.len()])
        }
        LabelScheme::Multi => match y_adv {
            None => Ok(original_labels.iter().map(|&y| (y + 1) % num_classes).collect()),
            Some(adv) => {
                if adv.len() != original_labels.len() {
                    return Err(Error::invalid("y_adv length differs from label count"));
                }
                let mut rng = rng::stream(seed, rng::streams::LABELS);
                original_labels
                    .iter()
                    .zip(adv)
                    .map(|(&y, &ya)| {
                        let choices: Vec<usize> =
                            (0..num_classes).filter(|&c| c != y && c != ya).collect();
                        if choices.is_empty() {
                            return Err(Error::invalid(format!(
                                "no admissible label for y={y}, y_adv={ya} with {num_classes} classes"
                            )));
                        }
                        Ok(choices[rng.random_range(0..choices.len())])
                    })
                    .collect()
            }
        },
    }
}

/// A labeled trigger set (`D_WM`).
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerSet {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub original_labels: Vec<usize>,
    pub y_adv: Option<Vec<usize>>,
    pub trigger_type: TriggerType,
    pub scheme: LabelScheme,
    pub seed: u64,
    pub num_classes: usize,
}

impl TriggerSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.samples.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.samples.gather_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Bit-level fingerprints of every trigger sample.
    pub fn fingerprints(&self) -> HashSet<Vec<u32>> {
        (0..self.samples.rows())
            .map(|i| fingerprint(self.samples.row(i)))
            .collect()
    }
}

pub fn fingerprint(sample: &[f32]) -> Vec<u32> {
    sample.iter().map(|v| v.to_bits()).collect()
}

/// Generates and labels a trigger set in one go.
pub fn build_trigger_set(
    ty: &TriggerType,
    scheme: LabelScheme,
    src: TriggerSources<'_>,
    seed: u64,
) -> Result<TriggerSet> {
    let k = src.base.num_classes;
    let gen = generate(ty, src, seed)?;
    let labels = assign_labels(&gen.original_labels, scheme, gen.y_adv.as_deref(), k, seed)?;
    Ok(TriggerSet {
        samples: gen.samples,
        labels,
        original_labels: gen.original_labels,
        y_adv: gen.y_adv,
        trigger_type: ty.clone(),
        scheme,
        seed,
        num_classes: k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerMeta {
    pub trigger_type: TriggerType,
    pub scheme: LabelScheme,
    pub seed: u64,
    pub num_classes: usize,
    pub count: usize,
}

fn labels_tensor(labels: &[usize]) -> Result<Tensor> {
    Tensor::new(vec![labels.len()], labels.iter().map(|&y| y as f32).collect())
}

fn tensor_labels(t: &Tensor) -> Vec<usize> {
    t.data().iter().map(|&v| v as usize).collect()
}

/// Writes `<stem>.wmlb` (tensors) and `<stem>.json` (metadata).
pub fn save_trigger_set(set: &TriggerSet, stem: &Path) -> Result<()> {
    let mut tensors = vec![
        ("samples".to_string(), set.samples.clone()),
        ("labels".to_string(), labels_tensor(&set.labels)?),
        ("original_labels".to_string(), labels_tensor(&set.original_labels)?),
    ];
    if let Some(adv) = &set.y_adv {
        tensors.push(("y_adv".to_string(), labels_tensor(adv)?));
    }
    checkpoint::write_tensors(&stem.with_extension("wmlb"), &tensors)?;
    let meta = TriggerMeta {
        trigger_type: set.trigger_type.clone(),
        scheme: set.scheme,
        seed: set.seed,
        num_classes: set.num_classes,
        count: set.len(),
    };
    let json_path = stem.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(json_path, e))
}

pub fn load_trigger_set(stem: &Path) -> Result<TriggerSet> {
    let json_path = stem.with_extension("json");
    let meta: TriggerMeta = serde_json::from_str(
        &std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?,
    )?;
    let tensors = checkpoint::read_tensors(&stem.with_extension("wmlb"))?;
    let get = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let samples = get("samples")
        .ok_or_else(|| Error::format("name", "missing `samples`"))?
        .clone();
    let labels = tensor_labels(get("labels").ok_or_else(|| Error::format("name", "missing `labels`"))?);
    let original_labels = tensor_labels(
        get("original_labels").ok_or_else(|| Error::format("name", "missing `original_labels`"))?,
    );
    if labels.len() != meta.count || samples.rows() != meta.count {
        return Err(Error::format("count", "trigger count disagrees with sidecar"));
    }
    Ok(TriggerSet {
        samples,
        labels,
        original_labels,
        y_adv: get("y_adv").map(tensor_labels),
        trigger_type: meta.trigger_type,
        scheme: meta.scheme,
        seed: meta.seed,
        num_classes: meta.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::nn::ModelSpec;
    use proptest::prelude::*;

    fn base() -> LabeledDataset {
        synth_generate(&SynthSpec::desk(10, 20), 3).unwrap()
    }

    fn sources(base: &LabeledDataset) -> TriggerSources<'_> {
        TriggerSources {
            base,
            ood: None,
            clean_model: None,
        }
    }

    #[test]
    fn vanishing_noise_returns_base() {
        let b = base();
        let g = generate(&TriggerType::Noise { strength: 1e-30 }, sources(&b), 1).unwrap();
        let diff = g
            .samples
            .data()
            .iter()
            .zip(b.samples.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-20);
    }

    #[test]
    fn fgsm_sign_rule_and_clip() {
        let x = Tensor::new(vec![1, 1, 3, 1], vec![0.5, 0.95, 0.05]).unwrap();
        let g = Tensor::new(vec![1, 1, 3, 1], vec![2.0, 1.0, -1.0]).unwrap();
        let out = fgsm_perturb(&x, &g, 0.1).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-7);
        assert_eq!(out.data()[1], 1.0);
        assert_eq!(out.data()[2], 0.0);
    }

    #[test]
    fn content_patch_and_determinism() {
        let b = base();
        let ty = TriggerType::Content {
            patch: PatchSpec::default(),
        };
        let g = generate(&ty, sources(&b), 1).unwrap();
        let img = g.samples.row(7);
        assert!(img[..6].iter().all(|&v| v == 1.0));
        assert!(img[5 * 28..5 * 28 + 6].iter().all(|&v| v == 1.0));
        assert_eq!(img[6 * 28 + 6], b.samples.row(7)[6 * 28 + 6]);
        let bad = TriggerType::Content {
            patch: PatchSpec {
                size: 6,
                row: 25,
                col: 0,
                value: 1.0,
            },
        };
        assert!(generate(&bad, sources(&b), 1).is_err());
    }

    #[test]
    fn unrelated_selection_is_seeded_and_resized() {
        let b = base();
        let ood = synth_generate(&SynthSpec::ood(10, 40, 32), 3).unwrap();
        let src = TriggerSources {
            base: &b,
            ood: Some(&ood),
            clean_model: None,
        };
        let ty = TriggerType::Unrelated {
            source: "ood".into(),
        };
        let a = generate(&ty, src, 9).unwrap();
        let c = generate(&ty, src, 9).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.samples.shape(), &[200, 28, 28, 1]);
        assert!(generate(&ty, sources(&b), 9).is_err());
    }

    #[test]
    fn fgsm_requires_clean_model() {
        let b = base();
        let ty = TriggerType::Fgsm { epsilon: 0.1 };
        assert!(generate(&ty, sources(&b), 0).is_err());
        let m = Model::init(ModelSpec::mlp([28, 28, 1], 10), 1).unwrap();
        let src = TriggerSources {
            base: &b,
            ood: None,
            clean_model: Some(&m),
        };
        let g = generate(&ty, src, 0).unwrap();
        let linf = g
            .samples
            .data()
            .iter()
            .zip(b.samples.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(linf <= 0.1 + 1e-6);
        assert_eq!(g.y_adv.unwrap().len(), 200);
    }

    #[test]
    fn label_scheme_examples() {
        assert_eq!(
            assign_labels(&[3, 9], LabelScheme::Multi, None, 10, 0).unwrap(),
            vec![4, 0]
        );
        let l = assign_labels(&[3], LabelScheme::Multi, Some(&[5]), 10, 0).unwrap();
        assert!(![3, 5].contains(&l[0]));
        let single = assign_labels(&[1; 200], LabelScheme::Single { target: 0 }, None, 10, 0).unwrap();
        assert!(single.iter().all(|&y| y == 0));
        assert!(assign_labels(&[0], LabelScheme::Multi, Some(&[1]), 2, 0).is_err());
        assert_eq!(
            assign_labels(&[0], LabelScheme::Multi, Some(&[0]), 2, 0).unwrap(),
            vec![1]
        );
    }

    #[test]
    fn save_load_roundtrip() {
        let b = base();
        let set = build_trigger_set(
            &TriggerType::Noise { strength: 0.15 },
            LabelScheme::Multi,
            sources(&b),
            4,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("triggers");
        save_trigger_set(&set, &stem).unwrap();
        assert_eq!(load_trigger_set(&stem).unwrap(), set);
    }

    proptest! {
        #[test]
        fn multi_labels_avoid_original_and_adversarial(
            k in 3usize..20,
            raw in proptest::collection::vec((0usize..1000, 0usize..1000), 1..50),
            seed in any::<u64>(),
        ) {
            let y: Vec<usize> = raw.iter().map(|p| p.0 % k).collect();
            let adv: Vec<usize> = raw.iter().map(|p| p.1 % k).collect();
            let l = assign_labels(&y, LabelScheme::Multi, Some(&adv), k, seed).unwrap();
            for i in 0..y.len() {
                prop_assert!(l[i] != y[i] && l[i] != adv[i] && l[i] < k);
            }
        }
    }
}
