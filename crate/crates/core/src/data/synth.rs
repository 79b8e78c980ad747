//! Procedural datasets so the lab runs without downloads.
//!
//! `Main`: each class is an oriented bar anchored at a class-specific point on
//! a ring, plus a blob on the opposite side, with per-sample jitter, a faint
//! random distractor stroke and background noise.
//! `Ood`: ring and square outlines of class-dependent size at random positions.

use std::f32::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

/// Upper bound of the uniform per-pixel background noise.
const NOISE_AMPLITUDE: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthFamily {
    Main,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub family: SynthFamily,
    pub height: usize,
    pub width: usize,
}

impl SynthSpec {
    pub fn desk(num_classes: usize, per_class: usize) -> Self {
        Self {
            num_classes,
            per_class,
            family: SynthFamily::Main,
            height: 28,
            width: 28,
        }
    }

    pub fn ood(num_classes: usize, per_class: usize, side: usize) -> Self {
        Self {
            num_classes,
            per_class,
            family: SynthFamily::Ood,
            height: side,
            width: side,
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            px: vec![0.0; h * w],
        }
    }

    /// Soft line segment from (x0,y0) to (x1,y1).
    fn stroke(&mut self, (x0, y0): (f32, f32), (x1, y1): (f32, f32), width: f32, intensity: f32) {
        let (dx, dy) = (x1 - x0, y1 - y0);
        let len2 = (dx * dx + dy * dy).max(1e-6);
        for y in 0..self.h {
            for x in 0..self.w {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let t = (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (x0 + t * dx - px, y0 + t * dy - py);
                let d2 = qx * qx + qy * qy;
                let v = intensity * (-d2 / (2.0 * width * width)).exp();
                let p = &mut self.px[y * self.w + x];
                *p = p.max(v);
            }
        }
    }

    fn blob(&mut self, (cx, cy): (f32, f32), radius: f32, intensity: f32) {
        for y in 0..self.h {
            for x in 0..self.w {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let v = intensity * (-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp();
                let p = &mut self.px[y * self.w + x];
                *p = p.max(v);
            }
        }
    }

    fn add_noise<R: Rng>(&mut self, rng: &mut R, amplitude: f32) {
        for p in &mut self.px {
            *p = (*p + rng.random::<f32>() * amplitude).clamp(0.0, 1.0);
        }
    }
}

fn draw_main<R: Rng>(canvas: &mut Canvas, class: usize, k: usize, rng: &mut R) {
    let (h, w) = (canvas.h as f32, canvas.w as f32);
    let side = h.min(w);
    let phi = 2.0 * PI * class as f32 / k as f32;
    let radius = 0.22 * side;
    let jitter = 0.09 * side;
    let cx = w / 2.0 + radius * phi.cos() + rng.random_range(-jitter..=jitter);
    let cy = h / 2.0 + radius * phi.sin() + rng.random_range(-jitter..=jitter);
    let theta = PI * class as f32 / k as f32 + rng.random_range(-0.2..=0.2);
    let half = side * rng.random_range(0.16..=0.24);
    let (ux, uy) = (theta.cos() * half, theta.sin() * half);
    canvas.stroke(
        (cx - ux, cy - uy),
        (cx + ux, cy + uy),
        rng.random_range(0.8..=1.3),
        rng.random_range(0.65..=1.0),
    );
    let bx = w / 2.0 - 0.25 * side * phi.cos() + rng.random_range(-jitter..=jitter);
    let by = h / 2.0 - 0.25 * side * phi.sin() + rng.random_range(-jitter..=jitter);
    canvas.blob((bx, by), rng.random_range(1.2..=2.2), rng.random_range(0.4..=0.8));
    if rng.random_bool(0.5) {
        let dx0 = rng.random_range(0.0..w);
        let dy0 = rng.random_range(0.0..h);
        let a = rng.random_range(0.0..PI);
        let l = side * rng.random_range(0.1..=0.25);
        canvas.stroke(
            (dx0, dy0),
            (dx0 + a.cos() * l, dy0 + a.sin() * l),
            1.0,
            rng.random_range(0.2..=0.45),
        );
    }
    canvas.add_noise(rng, NOISE_AMPLITUDE);
}

/// Same bar-and-blob grammar as the main family, but placed half a class
/// step off the main lattice, so no sample belongs to a main class.
fn draw_ood<R: Rng>(canvas: &mut Canvas, class: usize, k: usize, rng: &mut R) {
    let (h, w) = (canvas.h as f32, canvas.w as f32);
    let side = h.min(w);
    let step = class as f32 + 0.5;
    let phi = 2.0 * PI * step / k as f32 + rng.random_range(-0.1..=0.1);
    let theta = PI * step / k as f32 + rng.random_range(-0.2..=0.2);
    let radius = side * (0.22 + rng.random_range(-0.05..=0.05));
    let (cx, cy) = (w / 2.0 + radius * phi.cos(), h / 2.0 + radius * phi.sin());
    let half = side * rng.random_range(0.16..=0.24);
    let (ux, uy) = (theta.cos() * half, theta.sin() * half);
    canvas.stroke(
        (cx - ux, cy - uy),
        (cx + ux, cy + uy),
        rng.random_range(0.8..=1.3),
        rng.random_range(0.65..=1.0),
    );
    let bx = w / 2.0 - 0.25 * side * phi.cos();
    let by = h / 2.0 - 0.25 * side * phi.sin();
    canvas.blob((bx, by), rng.random_range(1.2..=2.2), rng.random_range(0.4..=0.8));
    canvas.add_noise(rng, NOISE_AMPLITUDE);
}

/// Generates `num_classes * per_class` single-channel images, class-major
/// order, deterministic in `seed`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<LabeledDataset> {
    if spec.num_classes < 2 {
        return Err(Error::invalid("synthetic datasets need at least 2 classes"));
    }
    if spec.per_class == 0 || spec.height < 4 || spec.width < 4 {
        return Err(Error::invalid("synthetic datasets need per_class >= 1 and 4x4 images"));
    }
    let stream = match spec.family {
        SynthFamily::Main => rng::streams::DATA,
        SynthFamily::Ood => rng::streams::OOD,
    };
    let mut rng = rng::stream(seed, stream);
    let n = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.height * spec.width);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        for _ in 0..spec.per_class {
            let mut c = Canvas::new(spec.height, spec.width);
            match spec.family {
                SynthFamily::Main => draw_main(&mut c, class, spec.num_classes, &mut rng),
                SynthFamily::Ood => draw_ood(&mut c, class, spec.num_classes, &mut rng),
            }
            data.extend(c.px);
            labels.push(class);
        }
    }
    let samples = Tensor::new(vec![n, spec.height, spec.width, 1], data)?;
    let name = match spec.family {
        SynthFamily::Main => "synthetic-main",
        SynthFamily::Ood => "synthetic-ood",
    };
    LabeledDataset::new(
        samples,
        labels,
        spec.num_classes,
        name,
        Provenance::Synthetic {
            seed,
            family: spec.family,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let spec = SynthSpec::desk(10, 100);
        let a = synth_generate(&spec, 4).unwrap();
        let b = synth_generate(&spec, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1000);
        assert_eq!(a.image_shape(), [28, 28, 1]);
        assert_ne!(a, synth_generate(&spec, 5).unwrap());
    }

    #[test]
    fn ood_family_shares_no_sample_with_main() {
        let main = synth_generate(&SynthSpec::desk(10, 20), 1).unwrap();
        let ood = synth_generate(&SynthSpec::ood(10, 20, 28), 1).unwrap();
        for i in 0..main.len() {
            for j in 0..ood.len() {
                assert_ne!(main.samples.row(i), ood.samples.row(j));
            }
        }
    }

    #[test]
    fn rejects_single_class() {
        assert!(synth_generate(&SynthSpec::desk(1, 10), 0).is_err());
    }
}
