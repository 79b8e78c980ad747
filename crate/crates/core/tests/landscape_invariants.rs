use proptest::prelude::*;
use wmlab::data::{synth_generate, SynthSpec};
use wmlab::landscape::{loss_grid, pca_directions, project_trajectory, random_direction, GridSpec};
use wmlab::nn::{Model, ModelSpec, ParamVector};
use wmlab::training::Phase;
use wmlab::triggers::{build_trigger_set, LabelScheme, TriggerSources, TriggerType};

fn vecs(seed: u64, rows: usize, dim: usize) -> Vec<ParamVector> {
    let mut x = seed | 1;
    (0..rows)
        .map(|_| {
            ParamVector(
                (0..dim)
                    .map(|_| {
                        x ^= x << 13;
                        x ^= x >> 7;
                        x ^= x << 17;
                        (x >> 40) as f32 / (1u64 << 23) as f32 - 1.0
                    })
                    .collect(),
            )
        })
        .collect()
}

proptest! {
    #[test]
    fn pca_basis_is_orthonormal_and_centered(seed in any::<u64>(), rows in 3usize..12, dim in 3usize..60) {
        let mut cps = vecs(seed, rows + 1, dim);
        let theta = cps.pop().unwrap();
        let b = pca_directions(&cps, &theta).unwrap();
        prop_assert!((b.d1.dot(&b.d1) - 1.0).abs() < 1e-6);
        prop_assert!((b.d2.dot(&b.d2) - 1.0).abs() < 1e-6);
        prop_assert!(b.d1.dot(&b.d2).abs() < 1e-6);
        prop_assert!(b.explained[0] >= b.explained[1] && b.explained[0] + b.explained[1] <= 1.0 + 1e-9);
        let p = project_trajectory(&[(0, Phase::Retrain, theta.clone())], &b.d1, &b.d2, &theta).unwrap();
        prop_assert_eq!((p.points[0].alpha, p.points[0].beta), (0.0, 0.0));
    }

    #[test]
    fn filter_norms_follow_the_center(seed in any::<u64>(), cnn in any::<bool>()) {
        let spec = if cnn { ModelSpec::small_cnn([8, 8, 1], 4) } else { ModelSpec::mlp([6, 6, 1], 4) };
        let center = Model::init(spec, seed).unwrap();
        let d = random_direction(&center, seed ^ 0x55).unwrap();
        let norm = |v: &[f32]| v.iter().map(|&t| f64::from(t).powi(2)).sum::<f64>().sqrt();
        for info in center.layout().entries() {
            for r in info.filter_ranges() {
                prop_assert!((norm(&d.0[r.clone()]) - norm(&center.params()[r])).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn one_dimensional_trajectory_has_all_variance_on_pc1() {
    let theta = ParamVector(vec![0.5, -1.0, 2.0, 0.25]);
    let cps: Vec<ParamVector> = [1.0f32, 2.0, 3.0]
        .iter()
        .map(|a| ParamVector(theta.0.iter().enumerate().map(|(i, t)| t + if i == 0 { *a } else { 0.0 }).collect()))
        .collect();
    let b = pca_directions(&cps, &theta).unwrap();
    assert!((b.d1.0[0].abs() - 1.0).abs() < 1e-6);
    assert!((b.explained[0] - 1.0).abs() < 1e-9);
    let half = ParamVector(theta.0.iter().zip(&b.d1.0).map(|(t, d)| t + 0.5 * d).collect());
    // An offset orthogonal to both directions does not move the projection.
    let mut off = ParamVector(vec![0.0; 4]);
    for i in 0..4 {
        off.0[i] = if i == 3 { 0.7 } else { 0.0 };
    }
    let ortho = off.dot(&b.d1).abs() < 1e-9 && off.dot(&b.d2).abs() < 1e-9;
    let shifted = ParamVector(half.0.iter().zip(&off.0).map(|(a, o)| a + o).collect());
    let p = project_trajectory(
        &[(1, Phase::Finetune, half), (2, Phase::Finetune, shifted)],
        &b.d1,
        &b.d2,
        &theta,
    )
    .unwrap();
    assert!((p.points[0].alpha - 0.5).abs() < 1e-6 && p.points[0].beta.abs() < 1e-6);
    if ortho {
        assert!((p.points[1].alpha - p.points[0].alpha).abs() < 1e-6);
        assert!((p.points[1].beta - p.points[0].beta).abs() < 1e-6);
    }
}

fn grid_inputs() -> (Model, ParamVector, ParamVector, wmlab::triggers::TriggerSet) {
    let base = synth_generate(&SynthSpec::desk(3, 10), 2).unwrap();
    let set = build_trigger_set(
        &TriggerType::Noise { strength: 0.15 },
        LabelScheme::Single { target: 1 },
        TriggerSources {
            base: &base,
            ood: None,
            clean_model: None,
        },
        3,
    )
    .unwrap();
    let spec = ModelSpec {
        widths: vec![12],
        ..ModelSpec::mlp([28, 28, 1], 3)
    };
    let m = Model::init(spec, 4).unwrap();
    let d1 = random_direction(&m, 5).unwrap();
    let d2 = random_direction(&m, 6).unwrap();
    (m, d1, d2, set)
}

#[test]
fn grid_is_independent_of_worker_count_and_mirrors() {
    let (m, d1, d2, set) = grid_inputs();
    let spec = GridSpec::square(0.8, 7);
    let on = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| loss_grid(&m, &d1, &d2, &set, &spec).unwrap())
    };
    let one = on(1);
    assert_eq!(one, on(3));
    assert_eq!(one.alphas.len() * one.betas.len(), 49);
    let neg = ParamVector(d1.0.iter().map(|v| -v).collect());
    let mirrored = loss_grid(&m, &neg, &d2, &set, &spec).unwrap();
    for i in 0..7 {
        for j in 0..7 {
            assert!((one.at(i, j) - mirrored.at(6 - i, j)).abs() < 1e-6);
        }
    }
}
