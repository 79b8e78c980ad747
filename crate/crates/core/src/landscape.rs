//! Trigger-loss surfaces around a parameter point and PCA projections of
//! training trajectories.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Model, ParamVector};
use crate::rng;
use crate::training::Phase;
use crate::triggers::TriggerSet;

/// Rescales every filter of `raw` to the norm of the matching filter of
/// `center`. Weight rows (one per output unit or channel) and whole bias
/// vectors are the filters. A zero raw filter is redrawn from `redraw`; a
/// zero center filter yields a zero direction filter.
pub fn filter_normalize<R: Rng>(raw: &ParamVector, center: &Model, redraw: &mut R) -> Result<ParamVector> {
    if raw.len() != center.num_params() {
        return Err(Error::Shape {
            expected: vec![center.num_params()],
            actual: vec![raw.len()],
        });
    }
    if !raw.is_finite() {
        return Err(Error::invalid("direction contains non-finite values"));
    }
    let theta = center.params();
    let mut out = raw.0.clone();
    for info in center.layout().entries() {
        for r in info.filter_ranges() {
            let target = l2(&theta[r.clone()]);
            let d = &mut out[r];
            if target == 0.0 {
                d.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let mut norm = l2(d);
            while norm == 0.0 {
                d.iter_mut().for_each(|v| *v = redraw.sample(StandardNormal));
                norm = l2(d);
            }
            let s = target / norm;
            d.iter_mut().for_each(|v| *v = (f64::from(*v) * s) as f32);
        }
    }
    Ok(ParamVector(out))
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Seeded Gaussian direction, filter-normalized against `center`.
pub fn random_direction(center: &Model, seed: u64) -> Result<ParamVector> {
    let mut r = rng::stream(seed, rng::streams::DIRECTIONS);
    let raw = ParamVector((0..center.num_params()).map(|_| r.sample(StandardNormal)).collect());
    filter_normalize(&raw, center, &mut r)
}

/// Two seeded filter-normalized directions (independent sub-streams).
pub fn random_directions(center: &Model, seed: u64) -> Result<(ParamVector, ParamVector)> {
    Ok((
        random_direction(center, rng::derive_index(seed, 1))?,
        random_direction(center, rng::derive_index(seed, 2))?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub d1: ParamVector,
    pub d2: ParamVector,
    /// Fraction of the total (uncentered) variance along d1 and d2.
    pub explained: [f64; 2],
}

/// Top two principal directions of the rows `theta_i - theta_final`.
///
/// The first nonzero coordinate of each direction is positive. A trajectory
/// confined to one line gets a deterministic unit `d2` orthogonal to `d1`
/// with zero explained variance; a trajectory with no spread is an error.
pub fn pca_directions(checkpoints: &[ParamVector], theta_final: &ParamVector) -> Result<PcaBasis> {
    if checkpoints.len() < 3 {
        return Err(Error::invalid(format!(
            "PCA needs at least 3 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    let dim = theta_final.len();
    if let Some(c) = checkpoints.iter().find(|c| c.len() != dim) {
        return Err(Error::Shape {
            expected: vec![dim],
            actual: vec![c.len()],
        });
    }
    let rows: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|c| c.0.iter().zip(&theta_final.0).map(|(&a, &b)| f64::from(a) - f64::from(b)).collect())
        .collect();
    let n = rows.len();
    let gram = DMatrix::from_fn(n, n, |i, j| rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>());
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let lambda = |k: usize| eig.eigenvalues[order[k]].max(0.0);
    if !(total > 0.0) || !(lambda(0) > 0.0) {
        return Err(Error::RankDeficient(
            "all checkpoints coincide with the final parameters (rank 0)".into(),
        ));
    }
    let direction = |k: usize| -> Vec<f64> {
        let u = eig.eigenvectors.column(order[k]);
        let mut v = vec![0.0; dim];
        for (i, row) in rows.iter().enumerate() {
            let w = u[i];
            v.iter_mut().zip(row).for_each(|(a, r)| *a += w * r);
        }
        v
    };
    let mut v1 = direction(0);
    normalize(&mut v1);
    let tol = 1e-12 * lambda(0);
    let (mut v2, ev2) = if n > 1 && lambda(1) > tol {
        (direction(1), lambda(1))
    } else {
        (completion(&v1), 0.0)
    };
    // re-orthogonalize against rounding
    let p: f64 = v1.iter().zip(&v2).map(|(a, b)| a * b).sum();
    v2.iter_mut().zip(&v1).for_each(|(b, a)| *b -= p * a);
    normalize(&mut v2);
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    Ok(PcaBasis {
        d1: to_param(&v1),
        d2: to_param(&v2),
        explained: [lambda(0) / total, ev2 / total],
    })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn fix_sign(v: &mut [f64]) {
    let first = v.iter().copied().find(|x| *x != 0.0).unwrap_or(0.0);
    if first < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Unit basis vector least aligned with `v`, made orthogonal to it.
fn completion(v: &[f64]) -> Vec<f64> {
    let j = (0..v.len())
        .min_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
        .expect("non-empty vector");
    let mut e: Vec<f64> = v.iter().map(|x| -v[j] * x).collect();
    e[j] += 1.0;
    normalize(&mut e);
    e
}

fn to_param(v: &[f64]) -> ParamVector {
    ParamVector(v.iter().map(|&x| x as f32).collect())
}

/// Grid extent and resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub resolution: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            alpha: (-1.0, 1.0),
            beta: (-1.0, 1.0),
            resolution: 41,
        }
    }
}

impl GridSpec {
    pub fn square(half_width: f64, resolution: usize) -> Self {
        Self {
            alpha: (-half_width, half_width),
            beta: (-half_width, half_width),
            resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if self.resolution < 2 || !ok(self.alpha) || !ok(self.beta) {
            return Err(Error::invalid("grid needs resolution >= 2 and finite lo < hi ranges"));
        }
        Ok(())
    }
}

/// `lo + (hi - lo) * i / (n - 1)`.
pub fn axis(range: (f64, f64), n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `losses[i * betas.len() + j]` is the loss at `(alphas[i], betas[j])`.
    pub losses: Vec<f64>,
}

impl LandscapeGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.betas.len() + j]
    }

    /// Bilinear interpolation; points outside the grid are clamped to it.
    pub fn interpolate(&self, a: f64, b: f64) -> f64 {
        let locate = |xs: &[f64], x: f64| -> (usize, f64) {
            let n = xs.len();
            let step = (xs[n - 1] - xs[0]) / (n - 1) as f64;
            let t = ((x - xs[0]) / step).clamp(0.0, (n - 1) as f64);
            let i = (t.floor() as usize).min(n - 2);
            (i, t - i as f64)
        };
        let (i, fa) = locate(&self.alphas, a);
        let (j, fb) = locate(&self.betas, b);
        let v00 = self.at(i, j);
        let v10 = self.at(i + 1, j);
        let v01 = self.at(i, j + 1);
        let v11 = self.at(i + 1, j + 1);
        v00 * (1.0 - fa) * (1.0 - fb) + v10 * fa * (1.0 - fb) + v01 * (1.0 - fa) * fb + v11 * fa * fb
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.losses
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,beta,loss\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                let _ = writeln!(s, "{a},{b},{}", self.at(i, j));
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean trigger cross-entropy at `center + alpha * d1 + beta * d2` over the
/// grid. Cells are evaluated in parallel and stored by index.
pub fn loss_grid(
    center: &Model,
    d1: &ParamVector,
    d2: &ParamVector,
    trigger_set: &TriggerSet,
    grid: &GridSpec,
) -> Result<LandscapeGrid> {
    grid.validate()?;
    for d in [d1, d2] {
        if d.len() != center.num_params() {
            return Err(Error::Shape {
                expected: vec![center.num_params()],
                actual: vec![d.len()],
            });
        }
    }
    if trigger_set.is_empty() {
        return Err(Error::invalid("empty trigger set"));
    }
    let alphas = axis(grid.alpha, grid.resolution);
    let betas = axis(grid.beta, grid.resolution);
    let nb = betas.len();
    let losses = (0..alphas.len() * nb)
        .into_par_iter()
        .map(|cell| {
            let m = center.offset_by(&[(alphas[cell / nb], d1), (betas[cell % nb], d2)])?;
            nn::loss(&m, &trigger_set.samples, &trigger_set.labels)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LandscapeGrid { alphas, betas, losses })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub epoch: usize,
    pub phase: Phase,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory2D {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory2D {
    /// Last point of a phase.
    pub fn endpoint(&self, phase: Phase) -> Option<&TrajectoryPoint> {
        self.points.iter().rev().find(|p| p.phase == phase)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,phase,alpha,beta\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.epoch, p.phase, p.alpha, p.beta);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// `(<theta_i - theta_final, d1>, <theta_i - theta_final, d2>)` per
/// checkpoint, keeping the `(epoch, phase)` tags.
pub fn project_trajectory(
    checkpoints: &[(usize, Phase, ParamVector)],
    d1: &ParamVector,
    d2: &ParamVector,
    theta_final: &ParamVector,
) -> Result<Trajectory2D> {
    let dim = theta_final.len();
    if d1.len() != dim || d2.len() != dim {
        return Err(Error::invalid("directions and parameters differ in length"));
    }
    let mut points = Vec::with_capacity(checkpoints.len());
    for (epoch, phase, theta) in checkpoints {
        if theta.len() != dim {
            return Err(Error::Shape {
                expected: vec![dim],
                actual: vec![theta.len()],
            });
        }
        let (mut a, mut b) = (0.0, 0.0);
        for i in 0..dim {
            let diff = f64::from(theta.0[i]) - f64::from(theta_final.0[i]);
            a += diff * f64::from(d1.0[i]);
            b += diff * f64::from(d2.0[i]);
        }
        points.push(TrajectoryPoint {
            epoch: *epoch,
            phase: *phase,
            alpha: a,
            beta: b,
        });
    }
    Ok(Trajectory2D { points })
}

/// Smallest symmetric range covering every trajectory point, padded by
/// `margin` (a fraction of the extent), never below `min_half_width`.
pub fn covering_half_width(traj: &Trajectory2D, margin: f64, min_half_width: f64) -> f64 {
    let m = traj
        .points
        .iter()
        .map(|p| p.alpha.abs().max(p.beta.abs()))
        .fold(0.0, f64::max);
    (m * (1.0 + margin)).max(min_half_width)
}

/// Index of the contour band (`levels` sorted ascending) containing `value`.
pub fn contour_band(levels: &[f64], value: f64) -> usize {
    levels.iter().take_while(|&&l| value >= l).count()
}

/// `count` evenly spaced contour levels strictly inside the grid's range.
pub fn contour_levels(grid: &LandscapeGrid, count: usize) -> Vec<f64> {
    let (lo, hi) = grid.min_max();
    (1..=count)
        .map(|k| lo + (hi - lo) * k as f64 / (count + 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;

    fn model() -> Model {
        Model::init(
            ModelSpec {
                widths: vec![5],
                ..ModelSpec::mlp([2, 2, 1], 3)
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn axis_hits_zero_exactly() {
        let a = axis((-1.0, 1.0), 41);
        assert_eq!(a[20], 0.0);
        assert_eq!(a[0], -1.0);
        assert_eq!(a[40], 1.0);
    }

    #[test]
    fn normalized_filters_match_center_norms() {
        let m = model();
        let d = random_direction(&m, 7).unwrap();
        for info in m.layout().entries() {
            for r in info.filter_ranges() {
                let a = l2(&d.0[r.clone()]);
                let b = l2(&m.params()[r]);
                assert!((a - b).abs() < 1e-6 * b.max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_center_filter_gives_zero_direction() {
        let m = Model::zeros(model().spec().clone()).unwrap();
        let d = random_direction(&m, 1).unwrap();
        assert!(d.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_raw_filter_is_redrawn() {
        let m = model();
        let raw = ParamVector::zeros(m.num_params());
        let d = filter_normalize(&raw, &m, &mut rng::rng_from(2)).unwrap();
        assert!((d.norm() - m.flatten().norm()).abs() < 1e-5);
    }

    #[test]
    fn line_trajectory_gives_axis_direction() {
        let fin = ParamVector(vec![0.5, -1.0, 2.0, 0.0]);
        let cps: Vec<ParamVector> = [1.0f32, 2.0, 3.0]
            .iter()
            .map(|a| {
                let mut v = fin.clone();
                v.0[0] += a;
                v
            })
            .collect();
        let b = pca_directions(&cps, &fin).unwrap();
        assert_eq!(b.d1.0, vec![1.0, 0.0, 0.0, 0.0]);
        assert!((b.explained[0] - 1.0).abs() < 1e-12);
        assert_eq!(b.explained[1], 0.0);
        assert!(b.d1.dot(&b.d2).abs() < 1e-6);
        assert!((b.d2.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn static_trajectory_is_rank_deficient() {
        let fin = ParamVector(vec![1.0; 4]);
        let err = pca_directions(&[fin.clone(), fin.clone(), fin.clone()], &fin).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
        assert!(pca_directions(&[fin.clone(), fin.clone()], &fin).is_err());
    }

    #[test]
    fn projection_examples() {
        let fin = ParamVector(vec![1.0, 1.0, 1.0]);
        let d1 = ParamVector(vec![1.0, 0.0, 0.0]);
        let d2 = ParamVector(vec![0.0, 1.0, 0.0]);
        let cps = vec![
            (0, Phase::Finetune, ParamVector(vec![1.5, 1.0, 1.0])),
            (1, Phase::Retrain, ParamVector(vec![1.0, 1.0, 9.0])),
            (2, Phase::Retrain, fin.clone()),
        ];
        let t = project_trajectory(&cps, &d1, &d2, &fin).unwrap();
        assert_eq!((t.points[0].alpha, t.points[0].beta), (0.5, 0.0));
        assert_eq!((t.points[1].alpha, t.points[1].beta), (0.0, 0.0));
        assert_eq!(t.endpoint(Phase::Retrain).unwrap().epoch, 2);
    }

    #[test]
    fn bands_and_interpolation() {
        assert_eq!(contour_band(&[1.0, 2.0, 3.0], 0.5), 0);
        assert_eq!(contour_band(&[1.0, 2.0, 3.0], 2.5), 2);
        let g = LandscapeGrid {
            alphas: vec![-1.0, 1.0],
            betas: vec![-1.0, 1.0],
            losses: vec![0.0, 1.0, 2.0, 3.0],
        };
        assert_eq!(g.interpolate(0.0, 0.0), 1.5);
        assert_eq!(g.interpolate(-1.0, 1.0), 1.0);
        assert_eq!(g.interpolate(5.0, -5.0), 2.0);
    }
}
