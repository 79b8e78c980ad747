use proptest::prelude::*;
use wmlab::attacks::AttackLr;
use wmlab::data::{synth_generate, SynthSpec};
use wmlab::nn::{Model, ModelSpec};
use wmlab::protocols::{
    binomial_tail, blend_schedule, blended_finetune, decide, restore, BatchKind, BlendConfig, RestoreConfig,
};
use wmlab::training::EvalSets;
use wmlab::triggers::{LabelScheme, TriggerSet, TriggerType};
use wmlab::Error;

/// Upper tail by forward pmf recursion from P[X = 0], no logarithms.
fn tail_by_recursion(k: usize, n: usize, p: f64) -> f64 {
    let mut pmf = (1.0 - p).powi(n as i32);
    let mut below = 0.0;
    for i in 0..k {
        below += pmf;
        pmf *= (n - i) as f64 / (i + 1) as f64 * p / (1.0 - p);
    }
    1.0 - below
}

#[test]
fn chance_level_hits_are_not_evidence() {
    let p = binomial_tail(20, 200, 0.1);
    assert!((p - tail_by_recursion(20, 200, 0.1)).abs() < 1e-9, "{p}");
    assert!((p - 0.54).abs() < 0.01, "{p}");
    let v = decide(20, 200, 10, 1e-6, None);
    assert!(!v.watermarked);
}

#[test]
fn perfect_and_empty_hit_counts() {
    let p = binomial_tail(200, 200, 0.1);
    assert!((p.log10() + 200.0).abs() < 1e-9, "{p}");
    assert!(decide(200, 200, 10, 1e-6, None).watermarked);
    assert_eq!(binomial_tail(0, 200, 0.1), 1.0);
    assert!(!decide(0, 200, 10, 1e-6, None).watermarked);
}

proptest! {
    #[test]
    fn tail_is_a_monotone_probability(n in 1usize..300, k in 0usize..300, kk in 2usize..20) {
        let k = k.min(n);
        let p0 = 1.0 / kk as f64;
        let p = binomial_tail(k, n, p0);
        prop_assert!((0.0..=1.0).contains(&p));
        if k < n {
            prop_assert!(binomial_tail(k + 1, n, p0) <= p);
        }
        if k <= 60 {
            prop_assert!((p - tail_by_recursion(k, n, p0)).abs() < 1e-9);
        }
        let v = decide(k, n, kk, 1e-6, None);
        prop_assert_eq!(v.watermarked, v.p_value < 1e-6);
    }

    #[test]
    fn schedule_injects_once_per_m_batches(num_batch in 0usize..500, m in 1usize..40) {
        let s = blend_schedule(num_batch, m);
        let trains: Vec<usize> = s.iter().filter_map(|k| match k { BatchKind::Train(j) => Some(*j), _ => None }).collect();
        prop_assert_eq!(trains.len(), num_batch / m);
        prop_assert_eq!(trains, (1..=num_batch / m).collect::<Vec<_>>());
        for (pos, k) in s.iter().enumerate() {
            if let BatchKind::Train(j) = k {
                prop_assert_eq!(&s[pos - 1], &BatchKind::Finetune(j * m));
            }
        }
    }
}

#[test]
fn schedule_examples() {
    let count = |n, m| blend_schedule(n, m).iter().filter(|k| matches!(k, BatchKind::Train(_))).count();
    assert_eq!(count(6, 2), 3);
    assert_eq!(count(5, 3), 1);
    assert_eq!(count(7, 1), 7);
}

#[test]
fn triggers_in_the_training_data_are_refused() {
    let data = synth_generate(&SynthSpec::desk(3, 20), 4).unwrap();
    let leaked = data.subset(&[0, 5, 9], "leak").unwrap();
    let set = TriggerSet {
        samples: leaked.samples.clone(),
        labels: vec![0; 3],
        original_labels: leaked.labels.clone(),
        y_adv: None,
        trigger_type: TriggerType::Noise { strength: 0.15 },
        scheme: LabelScheme::Single { target: 0 },
        seed: 0,
        num_classes: 3,
    };
    let spec = ModelSpec {
        widths: vec![8],
        ..ModelSpec::mlp([28, 28, 1], 3)
    };
    let model = Model::init(spec, 1).unwrap();
    let rc = RestoreConfig {
        epochs: 1,
        ..RestoreConfig::for_attack(AttackLr::Small, 1)
    };
    assert!(matches!(restore(&model, &data, &rc, &set, None), Err(Error::TriggerLeak { .. })));
    let bc = BlendConfig {
        epochs: 1,
        ..BlendConfig::desk(1)
    };
    let eval = EvalSets {
        test: None,
        trigger: Some(&set),
    };
    let err = blended_finetune(&model, &data, &data, &bc, eval).unwrap_err();
    assert!(matches!(err, Error::TriggerLeak { .. }));
}
