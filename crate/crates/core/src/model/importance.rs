use serde::{Deserialize, Serialize};

use super::forward::{compute_group_normed, rms_norm};
use super::{l2_norm, Activation, BlockKind, KvCache, WeightSource};
use crate::Result;

/// Group ids in descending order of importance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankList {
    pub order: Vec<usize>,
    pub block: BlockKind,
    pub layer: usize,
}

impl RankList {
    /// Sort descending by score; ties keep ascending group id.
    pub fn from_scores(scores: &[f64], block: BlockKind, layer: usize) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self {
            order,
            block,
            layer,
        }
    }

    pub fn identity(count: usize, block: BlockKind, layer: usize) -> Self {
        Self {
            order: (0..count).collect(),
            block,
            layer,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.order.len()];
        self.order
            .iter()
            .all(|&g| g < seen.len() && !std::mem::replace(&mut seen[g], true))
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.order[..k.min(self.order.len())]
    }

    /// Fraction of `truth`'s top-k present in our top-k.
    pub fn top_k_recall(&self, truth: &RankList, k: usize) -> f64 {
        if k == 0 {
            return 1.0;
        }
        let ours = self.top(k);
        let hits = truth.top(k).iter().filter(|g| ours.contains(g)).count();
        hits as f64 / k as f64
    }
}

/// Exact importance: groups ranked by the L2 norm of their additive output.
///
/// For MHA the KV cache must already contain the current token.
pub fn oracle_importance(
    src: &impl WeightSource,
    layer: usize,
    block: BlockKind,
    input: &Activation,
    kv: &KvCache,
) -> Result<RankList> {
    let spec = *src.spec();
    let normed = rms_norm(&input.values);
    let record_layer = if block == BlockKind::LmHead {
        spec.num_layers
    } else {
        layer
    };
    let norms = (0..spec.group_count(block))
        .map(|g| compute_group_normed(src, record_layer, block, g, &normed, kv).map(|p| l2_norm(&p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RankList::from_scores(&norms, block, record_layer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{compute_group, dense_forward, init_model, rms_norm, ModelSpec};

    #[test]
    fn ties_break_by_ascending_id() {
        let r = RankList::from_scores(&[1.0, 3.0, 3.0, 0.5], BlockKind::Mlp, 0);
        assert_eq!(r.order, vec![1, 2, 0, 3]);
        assert!(r.is_permutation());
    }

    #[test]
    fn zeroed_group_ranks_last() {
        let mut store = init_model(ModelSpec::default()).unwrap();
        store.zero_group(1, BlockKind::Mlp, 6);
        let trace = dense_forward(&store, &[11]).unwrap();
        let input = Activation::new(trace.steps[0].mid[1].clone(), 0, 1);
        let kv = KvCache::new(store.spec());
        let r = oracle_importance(&store, 1, BlockKind::Mlp, &input, &kv).unwrap();
        assert!(r.is_permutation());
        assert_eq!(*r.order.last().unwrap(), 6);
    }

    #[test]
    fn top_group_has_max_norm() {
        let store = init_model(ModelSpec::default()).unwrap();
        let tokens = [4u32, 8, 15, 16, 23, 42];
        let trace = dense_forward(&store, &tokens).unwrap();
        let mut kv = KvCache::new(store.spec());
        for step in &trace.steps {
            kv.append(&store, 2, &rms_norm(&step.layer_inputs[2])).unwrap();
        }
        let input = Activation::new(trace.steps[5].layer_inputs[2].clone(), 5, 2);
        let r = oracle_importance(&store, 2, BlockKind::Mha, &input, &kv).unwrap();
        let norms: Vec<f64> = (0..8)
            .map(|h| {
                compute_group(&store, 2, BlockKind::Mha, h, &input, &kv)
                    .unwrap()
                    .l2_norm()
            })
            .collect();
        let max = norms.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(norms[r.order[0]], max);
    }

    #[test]
    fn recall_counts_overlap() {
        let truth = RankList::identity(8, BlockKind::Mha, 0);
        let pred = RankList {
            order: vec![1, 0, 5, 3, 2, 4, 6, 7],
            block: BlockKind::Mha,
            layer: 0,
        };
        assert_eq!(pred.top_k_recall(&truth, 2), 1.0);
        assert_eq!(pred.top_k_recall(&truth, 3), 2.0 / 3.0);
    }
}
