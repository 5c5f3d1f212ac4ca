//! Toy decoder-only transformer decomposed into neuron groups.
//!
//! A block's output is the sum of its groups' partial outputs (MHA, MLP) or
//! the concatenation of vocabulary chunks (LM head). The model has no biases
//! and uses gain-free RMS normalisation, so every block is exactly additive
//! over its groups.

mod drop;
mod format;
mod forward;
mod importance;
mod weights;

pub use drop::{drop_experiment, DropStrategy};
pub use format::{HalmHeader, HalmIndexEntry, HalmReader, HALM_MAGIC, HALM_VERSION};
pub use forward::{
    compute_group, dense_forward, merge_partials, rms_norm, DenseModel, DenseStep, DenseTrace,
    KvCache,
};
pub(crate) use forward::{add, argmax, embed_token};
pub use importance::{oracle_importance, RankList};
pub use weights::{init_model, GroupKey, RecordKind, WeightSource, WeightStore};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dimensions and seed of the toy transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub mlp_groups: usize,
    pub vocab_groups: usize,
    pub group_size: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 8,
            num_kv_heads: 4,
            mlp_groups: 16,
            vocab_groups: 16,
            group_size: 8,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("mlp_groups", self.mlp_groups),
            ("vocab_groups", self.vocab_groups),
            ("group_size", self.group_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Dimension(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Dimension(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return Err(Error::Dimension(format!(
                "num_kv_heads {} does not divide num_heads {}",
                self.num_kv_heads, self.num_heads
            )));
        }
        // Group ids travel as u16 on the wire.
        let max_groups = self.num_heads.max(self.mlp_groups).max(self.vocab_groups);
        if max_groups > u16::MAX as usize || self.num_layers > u16::MAX as usize {
            return Err(Error::Dimension("group or layer count exceeds u16".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_groups * self.group_size
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_groups * self.group_size
    }

    /// Query heads sharing one KV head.
    pub fn heads_per_kv(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }

    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.heads_per_kv()
    }

    pub fn group_count(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Mha => self.num_heads,
            BlockKind::Mlp => self.mlp_groups,
            BlockKind::LmHead => self.vocab_groups,
        }
    }

    /// Length of one group's partial output.
    pub fn partial_len(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Mha | BlockKind::Mlp => self.hidden_dim,
            BlockKind::LmHead => self.group_size,
        }
    }

    /// Weight count of one neuron group.
    pub fn group_params(&self, kind: BlockKind) -> usize {
        let d = self.hidden_dim;
        match kind {
            BlockKind::Mha => 2 * self.head_dim() * d,
            BlockKind::Mlp => 3 * self.group_size * d,
            BlockKind::LmHead => self.group_size * d,
        }
    }

    /// Multiply-accumulates to evaluate one group for a single token,
    /// excluding the context-length dependent attention score term.
    pub fn group_macs(&self, kind: BlockKind) -> usize {
        self.group_params(kind)
    }

    /// KV-cache elements reserved per device for `seq_len` tokens
    /// (keys and values for every KV head of every layer).
    pub fn kv_cache_elements(&self, seq_len: usize) -> usize {
        seq_len * self.num_layers * 2 * self.num_kv_heads * self.head_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Mha,
    Mlp,
    LmHead,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::Mha, BlockKind::Mlp, BlockKind::LmHead];

    pub fn as_u8(self) -> u8 {
        match self {
            BlockKind::Mha => 0,
            BlockKind::Mlp => 1,
            BlockKind::LmHead => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(BlockKind::Mha),
            1 => Some(BlockKind::Mlp),
            2 => Some(BlockKind::LmHead),
            _ => None,
        }
    }
}

/// Hidden state (length D) or logits (length vocab).
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub values: Vec<f32>,
    pub token_idx: u32,
    pub layer: usize,
}

impl Activation {
    pub fn new(values: Vec<f32>, token_idx: u32, layer: usize) -> Self {
        Self {
            values,
            token_idx,
            layer,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// One group's additive contribution to a block output.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupActivation {
    pub block: BlockKind,
    pub layer: usize,
    pub group_id: usize,
    pub partial: Vec<f32>,
    pub origin_device: usize,
}

impl GroupActivation {
    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.partial)
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||b||, tiny)`.
pub fn relative_error(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    diff / l2_norm(b).max(1e-30)
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}
