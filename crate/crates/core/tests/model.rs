use edgetp::model::{
    compute_group, dense_forward, drop_experiment, init_model, l2_distance, merge_partials,
    oracle_importance, relative_error, rms_norm, Activation, BlockKind, DropStrategy, HalmReader,
    KvCache, ModelSpec, WeightStore,
};
use proptest::prelude::*;

fn small() -> ModelSpec {
    ModelSpec {
        num_layers: 2,
        hidden_dim: 32,
        num_heads: 4,
        num_kv_heads: 2,
        mlp_groups: 8,
        vocab_groups: 4,
        group_size: 8,
        seed: 3,
    }
}

/// KV cache plus the MHA and MLP block inputs of the last token at `layer`.
fn block_inputs(store: &WeightStore, tokens: &[u32], layer: usize) -> (KvCache, Vec<f32>, Vec<f32>) {
    let trace = dense_forward(store, tokens).unwrap();
    let mut kv = KvCache::new(store.spec());
    for step in &trace.steps {
        for l in 0..store.spec().num_layers {
            kv.append(store, l, &rms_norm(&step.layer_inputs[l])).unwrap();
        }
    }
    let last = trace.steps.last().unwrap();
    (kv, last.layer_inputs[layer].clone(), last.mid[layer].clone())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_of_a_subset_is_dense_minus_the_rest(
        mask in prop::collection::vec(any::<bool>(), 8),
        layer in 0usize..2,
        mlp in any::<bool>(),
        t0 in 0u32..32,
    ) {
        let store = init_model(small()).unwrap();
        let spec = *store.spec();
        let (kv, x, mid) = block_inputs(&store, &[t0, 5, 9], layer);
        let (kind, input) = if mlp { (BlockKind::Mlp, mid) } else { (BlockKind::Mha, x) };
        let input = Activation::new(input, 2, layer);
        let parts: Vec<_> = (0..spec.group_count(kind))
            .map(|g| compute_group(&store, layer, kind, g, &input, &kv).unwrap())
            .collect();
        let dense = merge_partials(&spec, &parts, kind, layer, 2).unwrap().values;
        let (kept, dropped): (Vec<_>, Vec<_>) = parts.into_iter().partition(|p| mask[p.group_id]);
        let subset = merge_partials(&spec, &kept, kind, layer, 2).unwrap().values;
        let mut expect = dense;
        for p in dropped {
            for (e, v) in expect.iter_mut().zip(&p.partial) {
                *e -= v;
            }
        }
        // an empty subset merges to exactly zero
        prop_assert!(relative_error(&subset, &expect) < 1e-5 || l2_distance(&subset, &expect) < 1e-5);
    }
}

#[test]
fn merged_groups_match_the_dense_blocks() {
    let store = init_model(ModelSpec::default()).unwrap();
    let spec = *store.spec();
    let tokens = [1, 2, 3];
    let trace = dense_forward(&store, &tokens).unwrap();
    let last = trace.steps.last().unwrap();
    for layer in 0..spec.num_layers {
        let (kv, x, mid) = block_inputs(&store, &tokens, layer);
        for (kind, input, reference) in [
            (BlockKind::Mha, x, &last.mha_out[layer]),
            (BlockKind::Mlp, mid, &last.mlp_out[layer]),
        ] {
            let input = Activation::new(input, 2, layer);
            let parts: Vec<_> = (0..spec.group_count(kind))
                .map(|g| compute_group(&store, layer, kind, g, &input, &kv).unwrap())
                .collect();
            let merged = merge_partials(&spec, &parts, kind, layer, 2).unwrap();
            assert!(relative_error(&merged.values, reference) < 1e-5);
        }
    }
}

#[test]
fn oracle_top_group_has_the_largest_norm() {
    let store = init_model(small()).unwrap();
    let (kv, x, mid) = block_inputs(&store, &[4, 8, 15], 1);
    for (kind, input) in [(BlockKind::Mha, x), (BlockKind::Mlp, mid)] {
        let input = Activation::new(input, 2, 1);
        let rank = oracle_importance(&store, 1, kind, &input, &kv).unwrap();
        assert!(rank.is_permutation());
        let norm = |g| compute_group(&store, 1, kind, g, &input, &kv).unwrap().l2_norm();
        let top = norm(rank.order[0]);
        assert!((0..rank.len()).all(|g| norm(g) <= top));
    }
}

#[test]
fn halm_file_roundtrip_and_random_access() {
    let store = init_model(small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.halm");
    store.save(&path).unwrap();
    let mut reader = HalmReader::open(&path).unwrap();
    assert_eq!(reader.header().spec, *store.spec());
    let key = store.keys()[7];
    assert_eq!(reader.read_record(key).unwrap(), store.get(key).unwrap());
    assert_eq!(reader.load_all().unwrap(), store);
    assert_eq!(WeightStore::load(&path).unwrap(), store);
}

#[test]
fn corrupt_files_are_rejected() {
    let store = init_model(small()).unwrap();
    let mut bytes = store.to_bytes();
    bytes[0] ^= 0xff;
    assert!(WeightStore::from_bytes(&bytes).is_err());
    let bytes = store.to_bytes();
    assert!(WeightStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn drop_experiment_basics() {
    let store = init_model(small()).unwrap();
    let tokens = [1, 2, 3, 4];
    for s in [DropStrategy::Random, DropStrategy::HighNorm, DropStrategy::LowNorm] {
        assert_eq!(drop_experiment(&store, &tokens, s, 0.5, 0.0, 1).unwrap(), 0.0);
        assert_eq!(drop_experiment(&store, &tokens, s, 0.0, 1.0, 1).unwrap(), 0.0);
        let a = drop_experiment(&store, &tokens, s, 0.3, 0.5, 8).unwrap();
        assert_eq!(a, drop_experiment(&store, &tokens, s, 0.3, 0.5, 8).unwrap());
    }
    assert!(drop_experiment(&store, &tokens, DropStrategy::Random, 1.5, 0.1, 0).is_err());
}

#[test]
fn dropping_high_norm_groups_hurts_most() {
    let (mut low, mut rand, mut high) = (0.0, 0.0, 0.0);
    for seed in 0..20 {
        let store = init_model(ModelSpec { seed, ..Default::default() }).unwrap();
        let tokens: Vec<u32> = (0..8).map(|i| (i * 13 + seed as u32) % 128).collect();
        let run = |s| drop_experiment(&store, &tokens, s, 0.1, 0.25, seed).unwrap();
        low += run(DropStrategy::LowNorm);
        rand += run(DropStrategy::Random);
        high += run(DropStrategy::HighNorm);
    }
    assert!(low < rand && rand < high, "{low} {rand} {high}");
}
