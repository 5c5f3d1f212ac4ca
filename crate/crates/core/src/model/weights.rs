use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::format::{self, HalmReader};
use super::{BlockKind, ModelSpec};
use crate::{Error, Result};

/// Record kinds in a weight file. The first three coincide with
/// [`BlockKind`]; KV projections and the embedding table are stored as
/// extra kinds so that every weight lives in some indexed record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKind {
    Mha,
    Mlp,
    LmHead,
    KvProj,
    Embedding,
}

impl RecordKind {
    pub fn as_u8(self) -> u8 {
        match self {
            RecordKind::Mha => 0,
            RecordKind::Mlp => 1,
            RecordKind::LmHead => 2,
            RecordKind::KvProj => 3,
            RecordKind::Embedding => 4,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => RecordKind::Mha,
            1 => RecordKind::Mlp,
            2 => RecordKind::LmHead,
            3 => RecordKind::KvProj,
            4 => RecordKind::Embedding,
            _ => return None,
        })
    }
}

impl From<BlockKind> for RecordKind {
    fn from(k: BlockKind) -> Self {
        match k {
            BlockKind::Mha => RecordKind::Mha,
            BlockKind::Mlp => RecordKind::Mlp,
            BlockKind::LmHead => RecordKind::LmHead,
        }
    }
}

/// Address of one weight record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub layer: usize,
    pub kind: RecordKind,
    pub group: usize,
}

impl GroupKey {
    pub fn new(layer: usize, kind: impl Into<RecordKind>, group: usize) -> Self {
        Self {
            layer,
            kind: kind.into(),
            group,
        }
    }
}

/// Anything that can hand out weight records by key.
pub trait WeightSource {
    fn spec(&self) -> &ModelSpec;
    fn record(&self, key: GroupKey) -> Result<&[f32]>;
}

/// All weight records of a model, keyed and kept in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    spec: ModelSpec,
    records: BTreeMap<GroupKey, Vec<f32>>,
}

impl WeightStore {
    pub(crate) fn from_records(spec: ModelSpec, records: BTreeMap<GroupKey, Vec<f32>>) -> Self {
        Self { spec, records }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn get(&self, key: GroupKey) -> Option<&[f32]> {
        self.records.get(&key).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, key: GroupKey) -> Option<&mut Vec<f32>> {
        self.records.get_mut(&key)
    }

    /// Zero every weight of one group. Used to build degenerate models.
    pub fn zero_group(&mut self, layer: usize, kind: BlockKind, group: usize) {
        if let Some(r) = self.records.get_mut(&GroupKey::new(layer, kind, group)) {
            r.iter_mut().for_each(|w| *w = 0.0);
        }
    }

    /// Keys in canonical file order.
    pub fn keys(&self) -> Vec<GroupKey> {
        canonical_keys(&self.spec)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::decode(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        HalmReader::open(path)?.load_all()
    }

    /// Parameter bytes of a single record.
    pub fn record_bytes(&self, key: GroupKey) -> usize {
        record_len(&self.spec, key.kind) * 4
    }
}

impl WeightSource for WeightStore {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn record(&self, key: GroupKey) -> Result<&[f32]> {
        self.get(key).ok_or(Error::Format(format!("no record for {key:?}")))
    }
}

/// Number of f32 weights in a record of `kind`.
pub(crate) fn record_len(spec: &ModelSpec, kind: RecordKind) -> usize {
    let d = spec.hidden_dim;
    match kind {
        RecordKind::Mha => spec.group_params(BlockKind::Mha),
        RecordKind::Mlp => spec.group_params(BlockKind::Mlp),
        RecordKind::LmHead => spec.group_params(BlockKind::LmHead),
        RecordKind::KvProj => 2 * spec.head_dim() * d,
        RecordKind::Embedding => spec.group_size * d,
    }
}

/// Embedding, then per layer KV projections, heads and MLP groups, then the
/// LM head (tagged with layer = L).
pub(crate) fn canonical_keys(spec: &ModelSpec) -> Vec<GroupKey> {
    let mut keys = Vec::new();
    for v in 0..spec.vocab_groups {
        keys.push(GroupKey::new(0, RecordKind::Embedding, v));
    }
    for l in 0..spec.num_layers {
        for j in 0..spec.num_kv_heads {
            keys.push(GroupKey::new(l, RecordKind::KvProj, j));
        }
        for h in 0..spec.num_heads {
            keys.push(GroupKey::new(l, RecordKind::Mha, h));
        }
        for g in 0..spec.mlp_groups {
            keys.push(GroupKey::new(l, RecordKind::Mlp, g));
        }
    }
    for v in 0..spec.vocab_groups {
        keys.push(GroupKey::new(spec.num_layers, RecordKind::LmHead, v));
    }
    keys
}

/// Deterministic toy weights, uniform in `[-1/sqrt(D), 1/sqrt(D)]`.
pub fn init_model(spec: ModelSpec) -> Result<WeightStore> {
    spec.validate()?;
    let bound = 1.0 / (spec.hidden_dim as f32).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = BTreeMap::new();
    for key in canonical_keys(&spec) {
        let n = record_len(&spec, key.kind);
        let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        records.insert(key, w);
    }
    Ok(WeightStore::from_records(spec, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_bytes() {
        let spec = ModelSpec {
            seed: 1,
            ..ModelSpec::default()
        };
        let a = init_model(spec).unwrap().to_bytes();
        let b = init_model(spec).unwrap().to_bytes();
        assert_eq!(a, b);
        let c = init_model(ModelSpec { seed: 2, ..spec }).unwrap().to_bytes();
        assert_ne!(a, c);
    }

    #[test]
    fn four_heads_give_four_mha_records_per_layer() {
        let spec = ModelSpec {
            hidden_dim: 64,
            num_heads: 4,
            num_kv_heads: 2,
            ..ModelSpec::default()
        };
        let store = init_model(spec).unwrap();
        assert_eq!(spec.head_dim(), 16);
        for l in 0..spec.num_layers {
            let n = store
                .keys()
                .iter()
                .filter(|k| k.layer == l && k.kind == RecordKind::Mha)
                .count();
            assert_eq!(n, 4);
        }
    }

    #[test]
    fn bad_dims_rejected() {
        let spec = ModelSpec {
            hidden_dim: 65,
            num_heads: 4,
            num_kv_heads: 2,
            ..ModelSpec::default()
        };
        assert!(matches!(init_model(spec), Err(Error::Dimension(_))));
    }

    #[test]
    fn weights_within_bound() {
        let spec = ModelSpec::default();
        let store = init_model(spec).unwrap();
        let bound = 1.0 / (spec.hidden_dim as f32).sqrt();
        for key in store.keys() {
            assert!(store.get(key).unwrap().iter().all(|w| w.abs() <= bound));
        }
    }
}
