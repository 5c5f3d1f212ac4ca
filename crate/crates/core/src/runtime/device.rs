use std::collections::BTreeMap;

use crate::model::{
    BlockKind, GroupKey, HalmReader, KvCache, ModelSpec, RecordKind, WeightSource, WeightStore,
};
use crate::scheduler::{CostModel, DeviceAssignment, DeviceProfile};
use crate::{Error, Result};

/// Where group records are fetched from.
pub trait GroupLoader {
    fn spec(&self) -> &ModelSpec;
    fn fetch(&mut self, key: GroupKey) -> Result<Vec<f32>>;
}

/// In-memory source; every fetch copies the record.
pub struct StoreLoader<'a>(pub &'a WeightStore);

impl GroupLoader for StoreLoader<'_> {
    fn spec(&self) -> &ModelSpec {
        self.0.spec()
    }

    fn fetch(&mut self, key: GroupKey) -> Result<Vec<f32>> {
        WeightSource::record(self.0, key).map(<[f32]>::to_vec)
    }
}

impl GroupLoader for HalmReader {
    fn spec(&self) -> &ModelSpec {
        &self.header().spec
    }

    fn fetch(&mut self, key: GroupKey) -> Result<Vec<f32>> {
        self.read_record(key)
    }
}

fn block_of(kind: RecordKind) -> Option<BlockKind> {
    match kind {
        RecordKind::Mha => Some(BlockKind::Mha),
        RecordKind::Mlp => Some(BlockKind::Mlp),
        RecordKind::LmHead => Some(BlockKind::LmHead),
        RecordKind::KvProj | RecordKind::Embedding => None,
    }
}

/// Weights resident on one device. KV projections and the embedding table
/// are always present and not charged to the budget; neuron groups are
/// loaded on demand within `budget_mb`.
#[derive(Debug, Clone)]
pub struct ResidentStore {
    spec: ModelSpec,
    shared: BTreeMap<GroupKey, Vec<f32>>,
    groups: BTreeMap<GroupKey, Vec<f32>>,
    used_mb: f64,
    budget_mb: f64,
}

impl ResidentStore {
    pub fn new(loader: &mut impl GroupLoader, budget_mb: f64) -> Result<Self> {
        let spec = *loader.spec();
        let mut shared = BTreeMap::new();
        for g in 0..spec.vocab_groups {
            let key = GroupKey::new(0, RecordKind::Embedding, g);
            shared.insert(key, loader.fetch(key)?);
        }
        for l in 0..spec.num_layers {
            for j in 0..spec.num_kv_heads {
                let key = GroupKey::new(l, RecordKind::KvProj, j);
                shared.insert(key, loader.fetch(key)?);
            }
        }
        Ok(Self {
            spec,
            shared,
            groups: BTreeMap::new(),
            used_mb: 0.0,
            budget_mb,
        })
    }

    pub fn is_resident(&self, layer: usize, kind: BlockKind, group: usize) -> bool {
        self.groups.contains_key(&GroupKey::new(layer, kind, group))
    }

    pub fn resident_count(&self) -> usize {
        self.groups.len()
    }

    pub fn used_mb(&self) -> f64 {
        self.used_mb
    }
}

impl WeightSource for ResidentStore {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn record(&self, key: GroupKey) -> Result<&[f32]> {
        let found = match key.kind {
            RecordKind::KvProj | RecordKind::Embedding => self.shared.get(&key),
            _ => self.groups.get(&key),
        };
        found.map(Vec::as_slice).ok_or_else(|| match block_of(key.kind) {
            Some(kind) => Error::LoadMiss {
                layer: key.layer,
                kind,
                group: key.group,
            },
            None => Error::Format(format!("missing record {key:?}")),
        })
    }
}

/// One worker: its profile, priority-index slice, resident weights and
/// local KV cache.
#[derive(Debug, Clone)]
pub struct DeviceRuntime {
    pub profile: DeviceProfile,
    pub assignment: DeviceAssignment,
    pub store: ResidentStore,
    pub kv: KvCache,
}

impl DeviceRuntime {
    pub fn new(
        profile: DeviceProfile,
        assignment: DeviceAssignment,
        loader: &mut impl GroupLoader,
    ) -> Result<Self> {
        let store = ResidentStore::new(loader, profile.memory_mb)?;
        let kv = KvCache::new(&store.spec);
        Ok(Self {
            profile,
            assignment,
            store,
            kv,
        })
    }

    /// Make `groups` of `(layer, kind)` resident, evicting other groups of
    /// the same `(layer, kind)` when the budget requires it. Returns how
    /// many groups were actually fetched.
    pub fn load_groups(
        &mut self,
        loader: &mut impl GroupLoader,
        layer: usize,
        kind: BlockKind,
        groups: &[usize],
        cost: &CostModel,
    ) -> Result<usize> {
        let spec = self.store.spec;
        let count = spec.group_count(kind);
        if let Some(&g) = groups.iter().find(|&&g| g >= count) {
            return Err(Error::GroupOutOfRange {
                kind,
                group: g,
                count,
            });
        }
        let record_layer = if kind == BlockKind::LmHead {
            spec.num_layers
        } else {
            layer
        };
        let unit = cost.mem(kind);
        let key = |g| GroupKey::new(record_layer, kind, g);
        let missing: Vec<usize> = groups
            .iter()
            .copied()
            .filter(|&g| !self.store.groups.contains_key(&key(g)))
            .collect();
        let needed = self.store.used_mb + missing.len() as f64 * unit;
        let tol = self.store.budget_mb * 1e-9;
        if needed > self.store.budget_mb + tol {
            let evictable: Vec<usize> = (0..count)
                .filter(|g| !groups.contains(g) && self.store.groups.contains_key(&key(*g)))
                .collect();
            let mut excess = needed - self.store.budget_mb;
            for g in evictable {
                if excess <= tol {
                    break;
                }
                self.store.groups.remove(&key(g));
                self.store.used_mb -= unit;
                excess -= unit;
            }
            if excess > tol {
                return Err(Error::OutOfMemory {
                    device: self.profile.id,
                    required: self.store.used_mb + missing.len() as f64 * unit,
                    budget: self.store.budget_mb,
                });
            }
        }
        for &g in &missing {
            let rec = loader.fetch(key(g))?;
            self.store.groups.insert(key(g), rec);
            self.store.used_mb += unit;
        }
        Ok(missing.len())
    }
}
