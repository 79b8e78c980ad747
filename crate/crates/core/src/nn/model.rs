use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    SmallCnn,
}

/// Architecture description. `widths` are hidden-layer widths for the MLP
/// and the two convolution channel counts for the SmallCNN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Height, width, channels.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub widths: Vec<usize>,
}

impl ModelSpec {
    /// input -> 256 -> 128 -> K with ReLU.
    pub fn mlp(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_shape,
            num_classes,
            widths: vec![256, 128],
        }
    }

    /// conv3x3(8) -> ReLU -> conv3x3(16) -> ReLU -> maxpool 2x2 -> dense K.
    pub fn small_cnn(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            kind: ModelKind::SmallCnn,
            input_shape,
            num_classes,
            widths: vec![8, 16],
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "class count must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "input shape must be positive, got {:?}",
                self.input_shape
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid(format!(
                "layer widths must be positive, got {:?}",
                self.widths
            )));
        }
        if self.kind == ModelKind::SmallCnn {
            if self.widths.len() != 2 {
                return Err(Error::invalid(format!(
                    "SmallCnn takes exactly two channel counts, got {:?}",
                    self.widths
                )));
            }
            if self.input_shape[0] < 2 || self.input_shape[1] < 2 {
                return Err(Error::invalid("SmallCnn input must be at least 2x2"));
            }
        }
        Ok(())
    }

    /// Flattened width feeding the final dense layer of the CNN.
    pub(crate) fn pooled_len(&self) -> usize {
        let [h, w, _] = self.input_shape;
        (h / 2) * (w / 2) * self.widths[1]
    }

    pub fn layout(&self) -> Result<ParamLayout> {
        self.validate()?;
        let mut entries = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, group: usize| {
            entries.push((name, shape, group));
        };
        match self.kind {
            ModelKind::Mlp => {
                let mut fan_in = self.input_len();
                let mut widths = self.widths.clone();
                widths.push(self.num_classes);
                for (i, &w) in widths.iter().enumerate() {
                    push(format!("fc{}.weight", i + 1), vec![w, fan_in], i);
                    push(format!("fc{}.bias", i + 1), vec![w], i);
                    fan_in = w;
                }
            }
            ModelKind::SmallCnn => {
                let c = self.input_shape[2];
                let (c1, c2) = (self.widths[0], self.widths[1]);
                push("conv1.weight".into(), vec![c1, 3, 3, c], 0);
                push("conv1.bias".into(), vec![c1], 0);
                push("conv2.weight".into(), vec![c2, 3, 3, c1], 1);
                push("conv2.bias".into(), vec![c2], 1);
                push("fc.weight".into(), vec![self.num_classes, self.pooled_len()], 2);
                push("fc.bias".into(), vec![self.num_classes], 2);
            }
        }
        Ok(ParamLayout::from_entries(entries))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// Layer group (one per conv/dense unit).
    pub group: usize,
}

impl ParamInfo {
    pub fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    /// Filters of this tensor: one per output unit for weights, the whole
    /// vector for biases.
    pub fn filter_ranges(&self) -> Vec<std::ops::Range<usize>> {
        if self.is_bias() {
            vec![self.range()]
        } else {
            let rows = self.shape[0];
            let per = self.len / rows;
            (0..rows)
                .map(|r| self.offset + r * per..self.offset + (r + 1) * per)
                .collect()
        }
    }
}

/// Fixed parameter order. For the MLP: `fc1.weight, fc1.bias, fc2.weight, ...`;
/// for the CNN: `conv1.*, conv2.*, fc.*`. Weights are `[out, ...fan-in]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamInfo>,
    total: usize,
    groups: usize,
}

impl ParamLayout {
    fn from_entries(entries: Vec<(String, Vec<usize>, usize)>) -> Self {
        let mut offset = 0;
        let mut groups = 0;
        let entries = entries
            .into_iter()
            .map(|(name, shape, group)| {
                let len = shape.iter().product();
                let info = ParamInfo {
                    name,
                    shape,
                    offset,
                    len,
                    group,
                };
                offset += len;
                groups = groups.max(group + 1);
                info
            })
            .collect();
        Self {
            entries,
            total: offset,
            groups,
        }
    }

    pub fn entries(&self) -> &[ParamInfo] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_groups(&self) -> usize {
        self.groups
    }

    pub fn get(&self, name: &str) -> Option<&ParamInfo> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Per-element mask selecting the parameters of one layer group.
    pub fn group_mask(&self, group: usize) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for e in self.entries.iter().filter(|e| e.group == group) {
            mask[e.range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

/// Flat parameter-shaped vector (gradients, directions, snapshots).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f32>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// A network: spec plus parameters stored contiguously in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layout: Arc<ParamLayout>,
    params: Vec<f32>,
}

impl Model {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let layout = spec.layout()?;
        let params = vec![0.0; layout.total()];
        Ok(Self {
            spec,
            layout: Arc::new(layout),
            params,
        })
    }

    /// He-uniform weights, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        let mut rng = rng::stream(seed, rng::streams::INIT);
        let layout = Arc::clone(&model.layout);
        for e in layout.entries().iter().filter(|e| !e.is_bias()) {
            let fan_in = e.len / e.shape[0];
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for p in &mut model.params[e.range()] {
                *p = dist.sample(&mut rng);
            }
        }
        Ok(model)
    }

    pub fn from_flat(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        model.set_flat(params)?;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn flatten(&self) -> ParamVector {
        ParamVector(self.params.clone())
    }

    pub fn set_flat(&mut self, v: ParamVector) -> Result<()> {
        if v.len() != self.params.len() {
            return Err(Error::Shape {
                expected: vec![self.params.len()],
                actual: vec![v.len()],
            });
        }
        self.params = v.0;
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&[f32]> {
        self.layout.get(name).map(|e| &self.params[e.range()])
    }

    /// Named tensors in layout order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.layout
            .entries()
            .iter()
            .map(|e| {
                let t = Tensor::new(e.shape.clone(), self.params[e.range()].to_vec())
                    .expect("layout shapes are valid");
                (e.name.clone(), t)
            })
            .collect()
    }

    /// Rebuilds a model from named tensors; names and shapes must match the layout of
    /// `spec` exactly and in order.
    pub fn from_named_tensors(spec: ModelSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        let layout = Arc::clone(&model.layout);
        if tensors.len() != layout.entries().len() {
            return Err(Error::format(
                "parameter count",
                format!(
                    "expected {} tensors, found {}",
                    layout.entries().len(),
                    tensors.len()
                ),
            ));
        }
        for (e, (name, t)) in layout.entries().iter().zip(tensors) {
            if e.name != name {
                return Err(Error::format(
                    "name",
                    format!("expected `{}`, found `{name}`", e.name),
                ));
            }
            if e.shape != t.shape() {
                return Err(Error::format(
                    "dims",
                    format!("`{name}` expected {:?}, found {:?}", e.shape, t.shape()),
                ));
            }
            model.params[e.range()].copy_from_slice(t.data());
        }
        Ok(model)
    }

    /// Adds `scale * direction` to the parameters, computed in f64.
    pub fn offset_by(&self, terms: &[(f64, &ParamVector)]) -> Result<Model> {
        let mut out = self.clone();
        for (_, d) in terms {
            if d.len() != out.params.len() {
                return Err(Error::Shape {
                    expected: vec![out.params.len()],
                    actual: vec![d.len()],
                });
            }
        }
        for (i, p) in out.params.iter_mut().enumerate() {
            let delta: f64 = terms.iter().map(|(s, d)| s * f64::from(d.0[i])).sum();
            *p = (f64::from(*p) + delta) as f32;
        }
        Ok(out)
    }

    pub fn perturbed<R: Rng>(&self, std: f32, rng: &mut R) -> Model {
        let normal = rand_distr::Normal::new(0.0f32, std).expect("positive std");
        let mut out = self.clone();
        for p in &mut out.params {
            *p += normal.sample(rng);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_layout_order_and_sizes() {
        let spec = ModelSpec::mlp([28, 28, 1], 10);
        let layout = spec.layout().unwrap();
        let names: Vec<_> = layout.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(
            names,
            ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias"]
        );
        assert_eq!(layout.total(), 784 * 256 + 256 + 256 * 128 + 128 + 128 * 10 + 10);
        assert_eq!(layout.num_groups(), 3);
    }

    #[test]
    fn cnn_layout() {
        let spec = ModelSpec::small_cnn([28, 28, 1], 10);
        let layout = spec.layout().unwrap();
        assert_eq!(layout.get("conv1.weight").unwrap().shape, vec![8, 3, 3, 1]);
        assert_eq!(layout.get("conv2.weight").unwrap().shape, vec![16, 3, 3, 8]);
        assert_eq!(layout.get("fc.weight").unwrap().shape, vec![10, 14 * 14 * 16]);
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = ModelSpec::mlp([28, 28, 1], 10);
        spec.widths = vec![0, 128];
        assert!(Model::zeros(spec).is_err());
        assert!(Model::zeros(ModelSpec::mlp([28, 28, 1], 1)).is_err());
        let mut cnn = ModelSpec::small_cnn([28, 28, 1], 10);
        cnn.widths = vec![8];
        assert!(Model::zeros(cnn).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let spec = ModelSpec::mlp([4, 4, 1], 3);
        let a = Model::init(spec.clone(), 5).unwrap();
        let b = Model::init(spec.clone(), 5).unwrap();
        let c = Model::init(spec, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.param("fc1.bias").unwrap().iter().all(|&v| v == 0.0));
    }
}
