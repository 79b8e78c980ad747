use std::collections::HashSet;

use proptest::prelude::*;
use wmlab::data::{
    batches, encode_idx_images, encode_idx_labels, make_splits, read_idx_images, read_idx_labels, synth_generate,
    SynthSpec, TestSource, TRIGGER_BASE_SIZE,
};
use wmlab::nn::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_are_disjoint_and_exclude_trigger_base(
        per_class in 80usize..140,
        holdout in 1usize..80,
        seed in any::<u64>(),
    ) {
        let ds = synth_generate(&SynthSpec::desk(4, per_class), 5).unwrap();
        let s = make_splits(&ds, TestSource::Holdout(holdout), seed).unwrap();
        let remaining = ds.len() - holdout - TRIGGER_BASE_SIZE;
        prop_assert_eq!(s.pretrain.len(), (7 * remaining + 5) / 10);
        prop_assert_eq!(s.pretrain.len() + s.finetune.len(), remaining);
        let groups = [&s.test_indices, &s.trigger_base_indices, &s.pretrain_indices, &s.finetune_indices];
        let mut seen = HashSet::new();
        for g in groups {
            for &i in g.iter() {
                prop_assert!(seen.insert(i), "index {} in two partitions", i);
            }
        }
        prop_assert_eq!(seen.len(), ds.len());
        let base: HashSet<usize> = s.trigger_base_indices.iter().copied().collect();
        prop_assert_eq!(base.len(), TRIGGER_BASE_SIZE);
    }

    #[test]
    fn batches_are_a_permutation(len in 0usize..300, b in 1usize..70, seed in any::<u64>()) {
        let bs = batches(len, b, seed).unwrap();
        let mut all: Vec<usize> = bs.iter().flatten().copied().collect();
        prop_assert!(bs.iter().all(|x| !x.is_empty() && x.len() <= b));
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn idx_roundtrip_quantizes_to_bytes(n in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u8>()) {
        let px: Vec<f32> = (0..n * h * w).map(|i| f32::from((i as u8).wrapping_mul(31).wrapping_add(seed)) / 255.0).collect();
        let t = Tensor::new(vec![n, h, w, 1], px.clone()).unwrap();
        let back = read_idx_images(&encode_idx_images(&t)).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(&px) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 10).collect();
        prop_assert_eq!(read_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
    }
}
