use serde::{Deserialize, Serialize};

use super::algorithms::ratios_to_counts;
use super::{CostModel, DeviceProfile, Ratios, Workload};
use crate::model::{BlockKind, ModelSpec};
use crate::{Error, Result};

/// Group counts the mapping partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDims {
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub mlp_groups: usize,
    pub vocab_groups: usize,
}

impl From<&ModelSpec> for GroupDims {
    fn from(s: &ModelSpec) -> Self {
        Self {
            num_heads: s.num_heads,
            num_kv_heads: s.num_kv_heads,
            mlp_groups: s.mlp_groups,
            vocab_groups: s.vocab_groups,
        }
    }
}

impl GroupDims {
    pub fn count(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Mha => self.num_heads,
            BlockKind::Mlp => self.mlp_groups,
            BlockKind::LmHead => self.vocab_groups,
        }
    }
}

/// Per-device group counts for each block kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub mha: Vec<usize>,
    pub mlp: Vec<usize>,
    pub lm_head: Vec<usize>,
}

impl KindCounts {
    pub fn from_ratios(ratios: &[f64], dims: &GroupDims) -> Self {
        Self {
            mha: ratios_to_counts(ratios, dims.num_heads),
            mlp: ratios_to_counts(ratios, dims.mlp_groups),
            lm_head: ratios_to_counts(ratios, dims.vocab_groups),
        }
    }

    pub fn get(&self, kind: BlockKind) -> &[usize] {
        match kind {
            BlockKind::Mha => &self.mha,
            BlockKind::Mlp => &self.mlp,
            BlockKind::LmHead => &self.lm_head,
        }
    }

    pub fn get_mut(&mut self, kind: BlockKind) -> &mut Vec<usize> {
        match kind {
            BlockKind::Mha => &mut self.mha,
            BlockKind::Mlp => &mut self.mlp,
            BlockKind::LmHead => &mut self.lm_head,
        }
    }
}

/// One device's slice of the plan. Index lists hold 1-based priority
/// indices into the importance order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceAssignment {
    pub id: usize,
    pub ratio: f64,
    pub mha: Vec<usize>,
    pub mlp: Vec<usize>,
    pub lm_head: Vec<usize>,
    /// KV heads owned for bookkeeping: the owner of a KV head is the owner
    /// of the first query head mapped onto it. Every device still reserves
    /// the full KV cache.
    pub kv: Vec<usize>,
}

impl DeviceAssignment {
    pub fn indices(&self, kind: BlockKind) -> &[usize] {
        match kind {
            BlockKind::Mha => &self.mha,
            BlockKind::Mlp => &self.mlp,
            BlockKind::LmHead => &self.lm_head,
        }
    }

    pub fn is_active(&self) -> bool {
        !(self.mha.is_empty() && self.mlp.is_empty() && self.lm_head.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub dims: GroupDims,
    #[serde(rename = "device")]
    pub devices: Vec<DeviceAssignment>,
}

impl Schedule {
    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn counts(&self) -> KindCounts {
        let c = |k| self.devices.iter().map(|d| d.indices(k).len()).collect();
        KindCounts {
            mha: c(BlockKind::Mha),
            mlp: c(BlockKind::Mlp),
            lm_head: c(BlockKind::LmHead),
        }
    }

    /// Same counts in every layer.
    pub fn workload(&self, num_layers: usize) -> Workload {
        let c = self.counts();
        Workload::uniform(num_layers, &c.mha, &c.mlp)
    }

    /// Each kind's index lists must partition `1..=N_k`.
    pub fn validate(&self) -> Result<()> {
        for kind in BlockKind::ALL {
            let n = self.dims.count(kind);
            let mut seen = vec![false; n];
            for d in &self.devices {
                for &p in d.indices(kind) {
                    if p == 0 || p > n || std::mem::replace(&mut seen[p - 1], true) {
                        return Err(Error::Infeasible(format!(
                            "{kind:?} priority index {p} invalid or repeated"
                        )));
                    }
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Infeasible(format!("{kind:?} indices not covered")));
            }
        }
        Ok(())
    }

    /// Memory each device needs for its share of the model.
    pub fn device_memory(&self, cost: &CostModel) -> Vec<f64> {
        let l = cost.num_layers as f64;
        self.devices
            .iter()
            .map(|d| {
                l * (d.mha.len() as f64 * cost.mem_h + d.mlp.len() as f64 * cost.mem_g)
                    + d.lm_head.len() as f64 * cost.mem_v
            })
            .collect()
    }

    /// Fail with an out-of-memory error on the first device whose share
    /// exceeds its budget.
    pub fn check_memory(&self, profiles: &[DeviceProfile], cost: &CostModel) -> Result<()> {
        for (i, (need, p)) in self.device_memory(cost).iter().zip(profiles).enumerate() {
            if *need > p.memory_mb * (1.0 + 1e-9) {
                return Err(Error::OutOfMemory {
                    device: i,
                    required: *need,
                    budget: p.memory_mb,
                });
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schedule serialises")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let sched: Schedule = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        sched.validate()?;
        Ok(sched)
    }
}

/// Map ratios to priority indices: the most reliable device gets the
/// first (most important) contiguous chunk, and so on.
pub fn plr_map(dims: &GroupDims, ratios: &Ratios, plrs: &[f64]) -> Result<Schedule> {
    let counts = KindCounts::from_ratios(ratios.as_slice(), dims);
    plr_map_counts(dims, ratios, &counts, plrs)
}

/// As [`plr_map`] with explicit per-device counts.
pub fn plr_map_counts(
    dims: &GroupDims,
    ratios: &Ratios,
    counts: &KindCounts,
    plrs: &[f64],
) -> Result<Schedule> {
    let n = ratios.len();
    if plrs.len() != n || BlockKind::ALL.iter().any(|&k| counts.get(k).len() != n) {
        return Err(Error::LengthMismatch(format!(
            "{n} ratios, {} PLRs",
            plrs.len()
        )));
    }
    for kind in BlockKind::ALL {
        if counts.get(kind).iter().sum::<usize>() != dims.count(kind) {
            return Err(Error::Infeasible(format!("{kind:?} counts do not sum to the group count")));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| plrs[a].total_cmp(&plrs[b]).then(a.cmp(&b)));

    let mut devices: Vec<DeviceAssignment> = (0..n)
        .map(|i| DeviceAssignment {
            id: i,
            ratio: ratios.as_slice()[i],
            mha: Vec::new(),
            mlp: Vec::new(),
            lm_head: Vec::new(),
            kv: Vec::new(),
        })
        .collect();
    for kind in BlockKind::ALL {
        let mut next = 1;
        for &dev in &order {
            let c = counts.get(kind)[dev];
            let chunk: Vec<usize> = (next..next + c).collect();
            next += c;
            match kind {
                BlockKind::Mha => devices[dev].mha = chunk,
                BlockKind::Mlp => devices[dev].mlp = chunk,
                BlockKind::LmHead => devices[dev].lm_head = chunk,
            }
        }
    }
    let per_kv = dims.num_heads / dims.num_kv_heads.max(1);
    for j in 1..=dims.num_kv_heads {
        let first_head = (j - 1) * per_kv + 1;
        if let Some(d) = devices.iter_mut().find(|d| d.mha.contains(&first_head)) {
            d.kv.push(j);
        }
    }
    let sched = Schedule { dims: *dims, devices };
    sched.validate()?;
    Ok(sched)
}
