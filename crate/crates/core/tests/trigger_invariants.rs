use proptest::prelude::*;
use wmlab::data::{synth_generate, SynthSpec};
use wmlab::nn::Tensor;
use wmlab::triggers::{fgsm_perturb, generate, PatchSpec, TriggerSources, TriggerType};

proptest! {
    #[test]
    fn fgsm_stays_in_the_epsilon_box(
        px in prop::collection::vec(0.0f32..=1.0, 1..64),
        signs in prop::collection::vec(-1i8..=1, 64),
        eps in 0.0f32..0.5,
    ) {
        let n = px.len();
        let x = Tensor::new(vec![1, n, 1, 1], px.clone()).unwrap();
        let g = Tensor::new(vec![1, n, 1, 1], signs[..n].iter().map(|&s| f32::from(s) * 0.3).collect()).unwrap();
        let out = fgsm_perturb(&x, &g, eps).unwrap();
        for (&a, &b) in out.data().iter().zip(&px) {
            prop_assert!((0.0..=1.0).contains(&a));
            // One f32 rounding step on top of the exact box.
            prop_assert!((a - b).abs() <= eps + 1e-6);
        }
    }
}

#[test]
fn generation_is_seeded() {
    let base = synth_generate(&SynthSpec::desk(4, 50), 1).unwrap();
    let ood = synth_generate(&SynthSpec::ood(4, 60, 32), 2).unwrap();
    let src = TriggerSources {
        base: &base,
        ood: Some(&ood),
        clean_model: None,
    };
    for ty in [
        TriggerType::Noise { strength: 0.15 },
        TriggerType::Content { patch: PatchSpec::default() },
        TriggerType::Unrelated { source: "ood".into() },
    ] {
        assert_eq!(generate(&ty, src, 9).unwrap(), generate(&ty, src, 9).unwrap(), "{}", ty.name());
    }
    let noise = TriggerType::Noise { strength: 0.15 };
    assert_ne!(generate(&noise, src, 9).unwrap(), generate(&noise, src, 10).unwrap());
}
