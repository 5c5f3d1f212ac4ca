//! Workload ratios, priority-index mapping and the latency cost model.

mod algorithms;
mod cost;
mod ilp;
mod mapping;

pub use algorithms::{
    comp_greedy, fit_counts_to_memory, min_max, min_max_threshold, ratios_to_counts,
    refine_counts, workload_from_ratios,
};
pub use cost::{estimate_latency, CostModel, CostScale, Workload, REFERENCE_SYNC_SECONDS};
pub use ilp::{brute_force_ilp, IlpSolution};
pub use mapping::{plr_map, plr_map_counts, DeviceAssignment, GroupDims, KindCounts, Schedule};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One edge device as the scheduler sees it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: usize,
    /// Memory budget in MB.
    pub memory_mb: f64,
    /// Work units per second.
    pub compute: f64,
    /// Packet loss rate of the device's upload link.
    pub plr: f64,
}

impl DeviceProfile {
    pub fn new(id: usize, memory_mb: f64, compute: f64, plr: f64) -> Self {
        Self {
            id,
            memory_mb,
            compute,
            plr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.memory_mb > 0.0 && self.compute > 0.0 && (0.0..=1.0).contains(&self.plr)) {
            return Err(Error::Config(format!("invalid device profile {self:?}")));
        }
        Ok(())
    }
}

/// Memory allocation ratios; non-negative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ratios(Vec<f64>);

impl Ratios {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        let sum: f64 = r.iter().sum();
        if r.is_empty() || r.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("invalid ratios {r:?}")));
        }
        Ok(Self(r))
    }

    /// Normalise non-negative weights.
    pub fn from_weights(u: &[f64]) -> Result<Self> {
        let total: f64 = u.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("allocation weights sum to zero".into()));
        }
        Self::new(u.iter().map(|x| x / total).collect())
    }

    pub fn even(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub(crate) fn check_total_memory(profiles: &[DeviceProfile], required: f64) -> Result<()> {
    let available: f64 = profiles.iter().map(|p| p.memory_mb).sum();
    if available < required {
        return Err(Error::InsufficientMemory {
            available,
            required,
        });
    }
    Ok(())
}
