use serde::{Deserialize, Serialize};

use super::DeviceProfile;
use crate::model::{BlockKind, ModelSpec};
use crate::{Error, Result};

/// Per-block synchronisation time for a 4096-wide f32 activation (16 KB) on
/// a 1 Gbps link: upload plus broadcast, 2 x 16 KB x 8 / 1e9 s.
pub const REFERENCE_SYNC_SECONDS: f64 = 0.262e-3;

/// Maps toy parameter and MAC counts onto virtual hardware units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostScale {
    /// Work units per multiply-accumulate.
    pub work_per_mac: f64,
    /// MB of memory per parameter.
    pub mb_per_param: f64,
    /// Per-block synchronisation time in seconds.
    pub sync_seconds: f64,
}

impl Default for CostScale {
    fn default() -> Self {
        Self {
            work_per_mac: 1.0,
            mb_per_param: 4.0 / (1024.0 * 1024.0),
            sync_seconds: REFERENCE_SYNC_SECONDS,
        }
    }
}

/// Compute and memory cost per neuron group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub tau_h: f64,
    pub tau_g: f64,
    pub tau_v: f64,
    pub mem_h: f64,
    pub mem_g: f64,
    pub mem_v: f64,
    pub sync_seconds: f64,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_groups: usize,
    pub vocab_groups: usize,
}

impl CostModel {
    /// Costs proportional to each group's parameter and MAC counts.
    pub fn from_spec(spec: &ModelSpec, scale: CostScale) -> Self {
        let tau = |k| spec.group_macs(k) as f64 * scale.work_per_mac;
        let mem = |k| spec.group_params(k) as f64 * scale.mb_per_param;
        Self {
            tau_h: tau(BlockKind::Mha),
            tau_g: tau(BlockKind::Mlp),
            tau_v: tau(BlockKind::LmHead),
            mem_h: mem(BlockKind::Mha),
            mem_g: mem(BlockKind::Mlp),
            mem_v: mem(BlockKind::LmHead),
            sync_seconds: scale.sync_seconds,
            num_layers: spec.num_layers,
            num_heads: spec.num_heads,
            mlp_groups: spec.mlp_groups,
            vocab_groups: spec.vocab_groups,
        }
    }

    pub fn tau(&self, kind: BlockKind) -> f64 {
        match kind {
            BlockKind::Mha => self.tau_h,
            BlockKind::Mlp => self.tau_g,
            BlockKind::LmHead => self.tau_v,
        }
    }

    pub fn mem(&self, kind: BlockKind) -> f64 {
        match kind {
            BlockKind::Mha => self.mem_h,
            BlockKind::Mlp => self.mem_g,
            BlockKind::LmHead => self.mem_v,
        }
    }

    pub fn count(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Mha => self.num_heads,
            BlockKind::Mlp => self.mlp_groups,
            BlockKind::LmHead => self.vocab_groups,
        }
    }

    /// Total model memory `M_t`, LM head included.
    pub fn total_memory(&self) -> f64 {
        self.num_layers as f64
            * (self.num_heads as f64 * self.mem_h + self.mlp_groups as f64 * self.mem_g)
            + self.vocab_groups as f64 * self.mem_v
    }

    /// Largest single-group compute time on the slowest device.
    pub fn group_quantum(&self, profiles: &[DeviceProfile]) -> f64 {
        let c_min = profiles
            .iter()
            .map(|p| p.compute)
            .fold(f64::INFINITY, f64::min);
        self.tau_h.max(self.tau_g) / c_min
    }
}

/// Integer workload `W[l][i] = [heads, mlp groups]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub layers: Vec<Vec<[usize; 2]>>,
}

impl Workload {
    /// The same per-device counts in every layer.
    pub fn uniform(num_layers: usize, heads: &[usize], groups: &[usize]) -> Self {
        let row: Vec<[usize; 2]> = heads.iter().zip(groups).map(|(&h, &g)| [h, g]).collect();
        Self {
            layers: vec![row; num_layers],
        }
    }

    pub fn num_devices(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// Memory used by device `i` (MHA and MLP groups only).
    pub fn device_memory(&self, i: usize, cost: &CostModel) -> f64 {
        self.layers
            .iter()
            .map(|row| row[i][0] as f64 * cost.mem_h + row[i][1] as f64 * cost.mem_g)
            .sum()
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.layers.iter().any(|row| row[i][0] + row[i][1] > 0)
    }
}

/// Check the partition and memory constraints of `W`.
pub(crate) fn check_feasible(w: &Workload, profiles: &[DeviceProfile], cost: &CostModel) -> Result<()> {
    if w.layers.len() != cost.num_layers {
        return Err(Error::Infeasible(format!(
            "workload covers {} layers, model has {}",
            w.layers.len(),
            cost.num_layers
        )));
    }
    for (l, row) in w.layers.iter().enumerate() {
        if row.len() != profiles.len() {
            return Err(Error::Infeasible(format!("layer {l} has {} devices", row.len())));
        }
        let heads: usize = row.iter().map(|c| c[0]).sum();
        let groups: usize = row.iter().map(|c| c[1]).sum();
        if heads != cost.num_heads || groups != cost.mlp_groups {
            return Err(Error::Infeasible(format!(
                "layer {l} assigns {heads} heads / {groups} groups"
            )));
        }
    }
    for (i, p) in profiles.iter().enumerate() {
        let used = w.device_memory(i, cost);
        if used > p.memory_mb * (1.0 + 1e-9) {
            return Err(Error::Infeasible(format!(
                "device {i} needs {used} MB of {} MB",
                p.memory_mb
            )));
        }
    }
    Ok(())
}

/// Straggler compute time per block plus `2L(n-1)` synchronisations, where
/// `n` counts only devices with work.
pub fn estimate_latency(w: &Workload, profiles: &[DeviceProfile], cost: &CostModel) -> Result<f64> {
    check_feasible(w, profiles, cost)?;
    Ok(latency_unchecked(w, profiles, cost))
}

pub(crate) fn latency_unchecked(w: &Workload, profiles: &[DeviceProfile], cost: &CostModel) -> f64 {
    let mut compute = 0.0;
    for row in &w.layers {
        for (k, tau) in [cost.tau_h, cost.tau_g].into_iter().enumerate() {
            compute += row
                .iter()
                .zip(profiles)
                .map(|(c, p)| tau * c[k] as f64 / p.compute)
                .fold(0.0, f64::max);
        }
    }
    let active = (0..profiles.len()).filter(|&i| w.is_active(i)).count();
    compute + comm_term(cost.num_layers, active, cost.sync_seconds)
}

pub(crate) fn comm_term(num_layers: usize, active: usize, sync_seconds: f64) -> f64 {
    2.0 * num_layers as f64 * active.saturating_sub(1) as f64 * sync_seconds
}
