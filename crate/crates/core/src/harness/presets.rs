//! Ready-made configurations for the standard experiments.

use super::{BaselineSelector, ExperimentConfig, MatrixAxes, SapSetup, ScenarioSet, SchedulerKind};
use crate::model::ModelSpec;
use crate::runtime::{MappingMode, SyncMode};
use crate::scheduler::DeviceProfile;

/// Seconds per token on a device of compute 1, roughly a 7B-parameter
/// model on a single-board computer. With eight devices this gives about
/// two seconds per token, far above the ~10 ms link latencies.
pub const EDGE_TOKEN_SECONDS: f64 = 16.0;

const CALIBRATION_SEED_OFFSET: u64 = 1 << 32;

fn equal_devices(n: usize) -> Vec<DeviceProfile> {
    (0..n).map(|i| DeviceProfile::new(i, 1e6, 1.0, 0.0)).collect()
}

/// Relaxed against reliable synchronisation over a loss-rate grid: a
/// 22-layer model on eight identical devices.
pub fn sync_latency(seeds: usize) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelSpec {
            num_layers: 22,
            ..Default::default()
        },
        devices: equal_devices(8),
        token_seconds: Some(EDGE_TOKEN_SECONDS),
        prompt_len: 2,
        num_tokens: 4,
        seeds: (0..seeds as u64).collect(),
        matrix: MatrixAxes {
            plr: vec![0.0, 0.01, 0.02, 0.05],
            sync: vec![SyncMode::Relaxed, SyncMode::Reliable],
            baseline: Some(BaselineSelector {
                sync: Some(SyncMode::Reliable),
                ..Default::default()
            }),
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Importance-aware against random mapping with eight devices, where all
/// but the master's groups are exposed to loss.
pub fn mapping_accuracy(model_seed: u64, plr: f64) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelSpec {
            seed: model_seed,
            ..Default::default()
        },
        // Calibration prompts come from a different stream than the
        // evaluated prompt, which is drawn from the run seed.
        sap: Some(SapSetup {
            seed: model_seed + CALIBRATION_SEED_OFFSET,
            train: crate::sap::TrainConfig {
                seed: model_seed,
                ..SapSetup::default().train
            },
            ..Default::default()
        }),
        devices: equal_devices(8),
        // Several loss realisations per model; the gap between mappings
        // is small next to the noise of a single run.
        seeds: (0..5).map(|k| model_seed + 1000 * k).collect(),
        matrix: MatrixAxes {
            plr: vec![plr],
            mapping: vec![MappingMode::Halo, MappingMode::Random],
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Layer widths close to a real decoder (32 heads, 64 MLP groups), so that
/// integer rounding of eight-way splits does not swamp the allocation.
pub fn wide_model() -> ModelSpec {
    ModelSpec {
        hidden_dim: 128,
        num_heads: 32,
        num_kv_heads: 8,
        mlp_groups: 64,
        vocab_groups: 32,
        ..Default::default()
    }
}

/// Schedulers on generated heterogeneous device sets of size `n`.
///
/// Runs lossless with reliable gathers: a relaxed gather would drop any
/// partial finishing more than the timeout after the master's own, which
/// rewards starving the master rather than balancing the load.
pub fn heterogeneous_schedulers(n: usize, scenarios: usize, seed: u64) -> ExperimentConfig {
    let mut set = ScenarioSet {
        count: scenarios,
        seed,
        ..Default::default()
    };
    set.params.num_devices = n;
    ExperimentConfig {
        model: wide_model(),
        scenario: Some(set),
        total_memory_mb: Some(set.params.total_memory_mb),
        token_seconds: Some(EDGE_TOKEN_SECONDS),
        prompt_len: 4,
        num_tokens: 4,
        matrix: MatrixAxes {
            plr: vec![0.0],
            sync: vec![SyncMode::Reliable],
            scheduler: vec![
                SchedulerKind::MinMax,
                SchedulerKind::GalaxyTwoStep,
                SchedulerKind::VanillaEven,
            ],
            baseline: Some(BaselineSelector {
                scheduler: Some(SchedulerKind::GalaxyTwoStep),
                ..Default::default()
            }),
            ..Default::default()
        },
        ..Default::default()
    }
}
