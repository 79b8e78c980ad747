use proptest::prelude::*;
use wmlab::data::{synth_generate, SynthSpec};
use wmlab::embedding::{pretrain_clean, TrainConfig};
use wmlab::nn::{self, checkpoint, Model, ModelSpec, ParamVector, Tensor};
use wmlab::training::EvalSets;

fn small_mlp(k: usize) -> ModelSpec {
    ModelSpec {
        widths: vec![7, 5],
        ..ModelSpec::mlp([4, 3, 1], k)
    }
}

proptest! {
    #[test]
    fn flatten_inverts_unflatten(seed in any::<u64>(), cnn in any::<bool>()) {
        let spec = if cnn { ModelSpec::small_cnn([6, 6, 1], 3) } else { small_mlp(3) };
        let n = Model::zeros(spec.clone()).unwrap().num_params();
        let mut x = seed;
        let v: Vec<f32> = (0..n)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (x >> 40) as f32 / (1u64 << 24) as f32 - 0.5
            })
            .collect();
        let m = Model::from_flat(spec, ParamVector(v.clone())).unwrap();
        prop_assert_eq!(m.flatten().0, v);
    }

    #[test]
    fn uniform_logits_cost_ln_k(k in 2usize..40, rows in 1usize..6) {
        let spec = small_mlp(k);
        let model = Model::zeros(spec).unwrap();
        let x = Tensor::new(vec![rows, 4, 3, 1], vec![0.5; rows * 12]).unwrap();
        let y: Vec<usize> = (0..rows).map(|i| i % k).collect();
        let l = nn::loss(&model, &x, &y).unwrap();
        prop_assert!((l - (k as f64).ln()).abs() <= 1e-6 * (k as f64).ln());
    }
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let data = synth_generate(&SynthSpec::desk(3, 30), 2).unwrap();
    let spec = ModelSpec {
        widths: vec![16],
        ..ModelSpec::mlp([28, 28, 1], 3)
    };
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::desk(11)
    };
    let run = || {
        let (m, _) = pretrain_clean(&spec, &data, &cfg, EvalSets::default()).unwrap();
        checkpoint::encode_tensors(&m.named_tensors()).unwrap()
    };
    assert_eq!(run(), run());
}
