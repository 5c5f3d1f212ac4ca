use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{add, compute_group_normed, embed_token, rms_norm};
use super::{l2_distance, l2_norm, BlockKind, KvCache, RankList, WeightStore};
use crate::{Error, Result};

/// Which groups are exposed to loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropStrategy {
    Random,
    HighNorm,
    LowNorm,
}

/// Mean L2 distance between lossless logits and logits computed when, in
/// every MHA/MLP block, `exposed_fraction` of the groups (chosen by
/// `strategy`) are each dropped with probability `plr`.
///
/// The Bernoulli draws come from a stream that does not depend on the
/// strategy, so runs with the same seed are paired.
pub fn drop_experiment(
    store: &WeightStore,
    tokens: &[u32],
    strategy: DropStrategy,
    plr: f64,
    exposed_fraction: f64,
    seed: u64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&plr) || !(0.0..=1.0).contains(&exposed_fraction) {
        return Err(Error::Config(
            "plr and exposed_fraction must lie in [0, 1]".into(),
        ));
    }
    if tokens.is_empty() {
        return Ok(0.0);
    }
    // the reference takes the same grouped path so that no loss gives
    // exactly zero deviation
    let clean = grouped_logits(store, tokens, strategy, 0.0, 0.0, seed)?;
    let lossy = grouped_logits(store, tokens, strategy, plr, exposed_fraction, seed)?;
    let total: f64 = clean.iter().zip(&lossy).map(|(a, b)| l2_distance(a, b)).sum();
    Ok(total / tokens.len() as f64)
}

fn grouped_logits(
    store: &WeightStore,
    tokens: &[u32],
    strategy: DropStrategy,
    plr: f64,
    exposed_fraction: f64,
    seed: u64,
) -> Result<Vec<Vec<f32>>> {
    let spec = *store.spec();
    let mut loss_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut kv = KvCache::new(&spec);
    let mut out = Vec::with_capacity(tokens.len());
    for &token in tokens {
        let mut x = embed_token(store, token)?;
        for l in 0..spec.num_layers {
            let xn = rms_norm(&x);
            kv.append(store, l, &xn)?;
            let a = lossy_block(store, &kv, l, BlockKind::Mha, &xn, strategy, plr, exposed_fraction, &mut loss_rng, &mut pick_rng)?;
            let h = add(&x, &a);
            let hn = rms_norm(&h);
            let m = lossy_block(store, &kv, l, BlockKind::Mlp, &hn, strategy, plr, exposed_fraction, &mut loss_rng, &mut pick_rng)?;
            x = add(&h, &m);
        }
        let xn = rms_norm(&x);
        let mut logits = Vec::with_capacity(spec.vocab_size());
        for v in 0..spec.vocab_groups {
            logits.extend(compute_group_normed(
                store,
                spec.num_layers,
                BlockKind::LmHead,
                v,
                &xn,
                &kv,
            )?);
        }
        out.push(logits);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn lossy_block(
    store: &WeightStore,
    kv: &KvCache,
    layer: usize,
    block: BlockKind,
    normed: &[f32],
    strategy: DropStrategy,
    plr: f64,
    exposed_fraction: f64,
    loss_rng: &mut ChaCha8Rng,
    pick_rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    let spec = *store.spec();
    let count = spec.group_count(block);
    let partials = (0..count)
        .map(|g| compute_group_normed(store, layer, block, g, normed, kv))
        .collect::<Result<Vec<_>>>()?;
    let exposed_n = (exposed_fraction * count as f64).round() as usize;
    let exposed: Vec<usize> = match strategy {
        DropStrategy::Random => sample(pick_rng, count, exposed_n).into_vec(),
        DropStrategy::HighNorm | DropStrategy::LowNorm => {
            let norms: Vec<f64> = partials.iter().map(|p| l2_norm(p)).collect();
            let ranks = RankList::from_scores(&norms, block, layer);
            if strategy == DropStrategy::HighNorm {
                ranks.order[..exposed_n].to_vec()
            } else {
                ranks.order[count - exposed_n..].to_vec()
            }
        }
    };
    let mut dropped = vec![false; count];
    for &g in &exposed {
        dropped[g] = loss_rng.gen::<f64>() < plr;
    }
    let mut acc = vec![0f64; spec.hidden_dim];
    for (g, p) in partials.iter().enumerate() {
        if !dropped[g] {
            for (a, &v) in acc.iter_mut().zip(p) {
                *a += v as f64;
            }
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelSpec};

    fn tokens() -> Vec<u32> {
        (0..12).map(|i| (i * 37 % 128) as u32).collect()
    }

    #[test]
    fn no_loss_means_no_deviation() {
        let store = init_model(ModelSpec::default()).unwrap();
        for s in [DropStrategy::Random, DropStrategy::HighNorm, DropStrategy::LowNorm] {
            let d = drop_experiment(&store, &tokens(), s, 0.0, 0.25, 3).unwrap();
            assert_eq!(d, 0.0, "{s:?}");
            let d = drop_experiment(&store, &tokens(), s, 0.5, 0.0, 3).unwrap();
            assert_eq!(d, 0.0, "{s:?}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let store = init_model(ModelSpec::default()).unwrap();
        let a = drop_experiment(&store, &tokens(), DropStrategy::Random, 0.3, 0.5, 9).unwrap();
        let b = drop_experiment(&store, &tokens(), DropStrategy::Random, 0.3, 0.5, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_probabilities() {
        let store = init_model(ModelSpec::default()).unwrap();
        assert!(drop_experiment(&store, &tokens(), DropStrategy::Random, 1.5, 0.5, 0).is_err());
    }
}
