//! Message layer for partial activations: a deterministic discrete-event
//! network with per-link loss, latency and bandwidth, plus an optional
//! loopback UDP mode that speaks the same wire format.

mod clock;
pub mod loopback;
mod sim;
mod wire;

pub use clock::SimClock;
pub use sim::{DeliveryEvent, LinkId, SimNetwork, TraceEvent, TraceKind, EVENT_GRANULARITY};
pub use wire::{
    fragment, Datagram, DatagramHeader, Reassembler, DEFAULT_MAX_PAYLOAD, HEADER_LEN, MERGED_GROUP,
};

use serde::{Deserialize, Serialize};

use crate::model::GroupActivation;
use crate::{Error, Result};

/// Attributes of one directed link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    /// Independent drop probability per datagram.
    pub plr: f64,
    /// Seconds.
    pub one_way_latency: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            plr: 0.0,
            one_way_latency: 0.5e-3,
            // 1 Gbps
            bandwidth: 125e6,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn with_plr(self, plr: f64) -> Self {
        Self { plr, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.plr) || !(self.one_way_latency >= 0.0) || !(self.bandwidth > 0.0) {
            return Err(Error::Config(format!("invalid channel {self:?}")));
        }
        Ok(())
    }

    pub fn serialization_delay(&self, bytes: usize) -> f64 {
        bytes as f64 / self.bandwidth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeoutPolicy {
    /// Seconds the merging node waits after posting a gather.
    pub gather_timeout: f64,
    /// Seconds between a lost fragment and its retransmission.
    pub reliable_retry_interval: f64,
    /// `None` retries forever.
    pub reliable_max_retries: Option<u32>,
}

impl Default for TimeoutPolicy {
    fn default() -> Self {
        Self {
            gather_timeout: 0.010,
            reliable_retry_interval: 0.200,
            reliable_max_retries: None,
        }
    }
}

impl TimeoutPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.gather_timeout > 0.0) || !(self.reliable_retry_interval > 0.0) {
            return Err(Error::Config(format!("invalid timeout policy {self:?}")));
        }
        Ok(())
    }
}

/// Outcome of a timeout-gated gather.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherResult {
    pub received: Vec<GroupActivation>,
    /// `(origin, group_id)` pairs that did not arrive in time.
    pub missing_groups: Vec<(usize, usize)>,
    /// Seconds from posting the gather to its completion.
    pub elapsed: f64,
    pub timed_out: bool,
    /// Absolute completion time.
    pub completed_at: f64,
}
