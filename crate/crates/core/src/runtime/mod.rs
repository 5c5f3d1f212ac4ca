//! Distributed decoding over the simulated network.
//!
//! Device 0 is the master: it merges every block's partial outputs and
//! broadcasts the merged hidden state. Layer 0 and the LM head always
//! synchronise reliably; in relaxed mode the other blocks merge whatever
//! arrived before the gather timeout and treat the rest as zero.

mod device;
mod metrics;
mod pipeline;

pub use device::{DeviceRuntime, GroupLoader, ResidentStore, StoreLoader};
pub use metrics::{Metrics, StageRecord, TokenMetrics};
pub use pipeline::{pipeline_schedule, LayerStages, Lanes, Overlap, Stage, StageSpan, Timeline};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    add, argmax, compute_group, embed_token, l2_distance, merge_partials, relative_error, rms_norm,
    Activation, BlockKind, DenseModel, GroupActivation, ModelSpec, RankList, WeightStore,
};
use crate::sap::{predict_ranks, PredictorParams};
use crate::scheduler::{CostModel, CostScale, DeviceProfile, GroupDims, Schedule};
use crate::transport::{
    fragment, ChannelConfig, Datagram, SimNetwork, TimeoutPolicy, DEFAULT_MAX_PAYLOAD,
    MERGED_GROUP,
};
use crate::{Error, Result};

pub const MASTER: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    Relaxed,
    Reliable,
}

/// How priority indices become concrete group ids after the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingMode {
    /// Predicted importance order (identity when no predictors are given).
    Halo,
    /// A fresh seeded random order per token, layer and kind.
    Random,
}

/// Converts work into simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingModel {
    /// Seconds per multiply-accumulate on a device of compute 1.
    pub seconds_per_mac: f64,
    /// Seconds per weight byte fetched into memory.
    pub seconds_per_byte: f64,
    /// Seconds per predictor call.
    pub predict_seconds: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            seconds_per_mac: 1e-9,
            seconds_per_byte: 1e-8,
            predict_seconds: 1e-5,
        }
    }
}

impl TimingModel {
    pub fn compute(&self, spec: &ModelSpec, kind: BlockKind, groups: usize, compute: f64) -> f64 {
        (groups * spec.group_macs(kind)) as f64 * self.seconds_per_mac / compute
    }

    pub fn load(&self, spec: &ModelSpec, kind: BlockKind, groups: usize) -> f64 {
        (groups * spec.group_params(kind) * 4) as f64 * self.seconds_per_byte
    }

    /// Scheduler cost scale with matching compute units.
    pub fn cost_scale(&self, base: CostScale) -> CostScale {
        CostScale {
            work_per_mac: self.seconds_per_mac,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub sync: SyncMode,
    pub mapping: MappingMode,
    pub overlap: Overlap,
    pub timing: TimingModel,
    /// Memory accounting for budgets and the out-of-memory check.
    pub cost_scale: CostScale,
    /// Downlinks and the template for uplinks, whose loss rate comes from
    /// each device profile.
    pub channel: ChannelConfig,
    pub policy: TimeoutPolicy,
    pub max_payload: usize,
    pub request_id: u64,
    /// Seeds link losses and random mapping.
    pub seed: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            sync: SyncMode::Relaxed,
            mapping: MappingMode::Halo,
            overlap: Overlap::BOTH,
            timing: TimingModel::default(),
            cost_scale: CostScale::default(),
            channel: ChannelConfig::default(),
            policy: TimeoutPolicy::default(),
            max_payload: DEFAULT_MAX_PAYLOAD,
            request_id: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated tokens, prompt excluded.
    pub tokens: Vec<u32>,
    /// Logits of every step.
    pub logits: Vec<Vec<f32>>,
    pub metrics: Metrics,
    /// Point-to-point messages sent over the network.
    pub messages: usize,
    /// Bytes each device reserves for the full KV cache of the run.
    pub kv_reserved_bytes: usize,
}

/// Replace each device's 1-based priority indices with the group ids at
/// those positions of `rank`.
pub fn resolve_assignment(priorities: &[&[usize]], rank: &RankList) -> Result<Vec<Vec<usize>>> {
    if !rank.is_permutation() {
        return Err(Error::Infeasible("rank list is not a permutation".into()));
    }
    let n = rank.len();
    let mut seen = vec![false; n];
    for &p in priorities.iter().flat_map(|p| p.iter()) {
        if p == 0 || p > n || std::mem::replace(&mut seen[p - 1], true) {
            return Err(Error::Infeasible(format!("priority index {p} invalid or repeated")));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Infeasible("priority indices do not cover every group".into()));
    }
    Ok(priorities
        .iter()
        .map(|p| p.iter().map(|&i| rank.order[i - 1]).collect())
        .collect())
}

const KINDS: [BlockKind; 2] = [BlockKind::Mha, BlockKind::Mlp];
const MAPPING_SALT: u64 = 0x6d61_7070_696e_6721;

struct Run<'a> {
    spec: ModelSpec,
    cfg: &'a RuntimeConfig,
    store: &'a WeightStore,
    cost: CostModel,
    net: SimNetwork,
    devices: Vec<DeviceRuntime>,
    ready: Vec<f64>,
    metrics: Metrics,
    messages: usize,
}

struct BlockSync {
    merged: Activation,
    missing: usize,
}

impl Run<'_> {
    fn n(&self) -> usize {
        self.devices.len()
    }

    fn stage(
        &mut self,
        token_idx: u32,
        device: usize,
        layer: usize,
        block: Option<BlockKind>,
        stage: Stage,
        start: f64,
        end: f64,
    ) {
        self.metrics.stages.push(StageRecord {
            token_idx,
            device,
            layer,
            block,
            stage,
            start,
            end,
        });
    }

    /// Make each device's groups of `(layer, kind)` resident. Returns the
    /// simulated load time per device.
    fn load(&mut self, layer: usize, kind: BlockKind, groups: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut loader = StoreLoader(self.store);
        let mut times = Vec::with_capacity(self.n());
        for (dev, g) in self.devices.iter_mut().zip(groups) {
            let fetched = dev.load_groups(&mut loader, layer, kind, g, &self.cost)?;
            times.push(self.cfg.timing.load(&self.spec, kind, fetched));
        }
        Ok(times)
    }

    fn datagrams(
        &self,
        token_idx: u32,
        layer: usize,
        kind: BlockKind,
        group: u16,
        origin: usize,
        values: &[f32],
    ) -> Result<Vec<Datagram>> {
        fragment(
            self.cfg.request_id,
            token_idx,
            layer,
            kind,
            group,
            origin,
            values,
            self.cfg.max_payload,
        )
    }

    /// Upload partials to the master, merge, and broadcast `next(merged)`
    /// back. Updates `ready` and records Comm stages.
    #[allow(clippy::too_many_arguments)]
    fn sync(
        &mut self,
        token_idx: u32,
        layer: usize,
        kind: BlockKind,
        partials: Vec<Vec<GroupActivation>>,
        finish: &[f64],
        reliable: bool,
        next: impl FnOnce(&Activation) -> Result<Vec<f32>>,
    ) -> Result<BlockSync> {
        let tag_layer = if kind == BlockKind::LmHead {
            self.spec.num_layers
        } else {
            layer
        };
        let mut expected = BTreeSet::new();
        let mut all: Vec<GroupActivation> = Vec::new();
        for (i, parts) in partials.into_iter().enumerate() {
            if i == MASTER {
                all.extend(parts);
                continue;
            }
            if parts.is_empty() {
                continue;
            }
            let mut ds = Vec::new();
            for p in &parts {
                expected.insert((i, p.group_id));
                ds.extend(self.datagrams(token_idx, tag_layer, kind, p.group_id as u16, i, &p.partial)?);
            }
            self.messages += 1;
            if reliable {
                self.net
                    .send_reliable(i, MASTER, ds, finish[i], &self.cfg.policy)?;
            } else {
                self.net.send_unreliable(i, MASTER, ds, finish[i])?;
            }
        }
        let post = finish[MASTER];
        let (done, missing) = if expected.is_empty() {
            (post, 0)
        } else {
            let (rid, tag) = (self.cfg.request_id, (token_idx, tag_layer));
            let r = if reliable {
                self.net
                    .gather_all(MASTER, &expected, rid, tag.0, tag.1, kind, post)?
            } else {
                self.net.gather_with_timeout(
                    MASTER,
                    &expected,
                    rid,
                    tag.0,
                    tag.1,
                    kind,
                    post,
                    &self.cfg.policy,
                )?
            };
            all.extend(r.received);
            (r.completed_at, r.missing_groups.len())
        };
        let merged = merge_partials(&self.spec, &all, kind, tag_layer, token_idx)?;
        let payload = next(&merged)?;
        let mut ready = vec![done; self.n()];
        for (i, slot) in ready.iter_mut().enumerate().skip(1) {
            let ds = self.datagrams(token_idx, tag_layer, kind, MERGED_GROUP, MASTER, &payload)?;
            self.messages += 1;
            // A device whose partial missed the gather is still busy until
            // its own compute ends.
            *slot = self
                .net
                .send_reliable(MASTER, i, ds, done, &self.cfg.policy)?
                .max(finish[i]);
        }
        for i in 0..self.n() {
            self.stage(token_idx, i, layer, Some(kind), Stage::Comm, finish[i], ready[i]);
        }
        self.ready = ready;
        Ok(BlockSync { merged, missing })
    }

    /// Every device computes its groups of one block from `input`.
    fn compute(
        &mut self,
        token_idx: u32,
        layer: usize,
        kind: BlockKind,
        groups: &[Vec<usize>],
        input: &Activation,
        start: &[f64],
    ) -> Result<(Vec<Vec<GroupActivation>>, Vec<f64>)> {
        let mut partials = Vec::with_capacity(self.n());
        let mut finish = Vec::with_capacity(self.n());
        for i in 0..self.n() {
            let dev = &self.devices[i];
            let mut parts = Vec::with_capacity(groups[i].len());
            for &g in &groups[i] {
                let mut p = compute_group(&dev.store, layer, kind, g, input, &dev.kv)?;
                p.origin_device = i;
                parts.push(p);
            }
            let t = self
                .cfg
                .timing
                .compute(&self.spec, kind, groups[i].len(), dev.profile.compute);
            partials.push(parts);
            finish.push(start[i] + t);
            if !groups[i].is_empty() {
                self.stage(token_idx, i, layer, Some(kind), Stage::Comp, start[i], start[i] + t);
            }
        }
        Ok((partials, finish))
    }
}

fn validate_inputs(
    spec: &ModelSpec,
    schedule: &Schedule,
    profiles: &[DeviceProfile],
    predictors: Option<&PredictorParams>,
    prompt: &[u32],
) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::Config("empty prompt".into()));
    }
    if let Some(&t) = prompt.iter().find(|&&t| t as usize >= spec.vocab_size()) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab: spec.vocab_size(),
        });
    }
    if schedule.dims != GroupDims::from(spec) {
        return Err(Error::Infeasible("schedule built for other model dimensions".into()));
    }
    if schedule.num_devices() != profiles.len() || profiles.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} schedule entries, {} device profiles",
            schedule.num_devices(),
            profiles.len()
        )));
    }
    schedule.validate()?;
    if let Some(p) = predictors {
        p.validate()?;
        if p.num_layers != spec.num_layers
            || p.hidden_dim != spec.hidden_dim
            || p.mha_groups != spec.num_heads
            || p.mlp_groups != spec.mlp_groups
        {
            return Err(Error::Config("predictors built for another model".into()));
        }
    }
    Ok(())
}

/// Decode `num_tokens` tokens greedily after feeding `prompt` one position
/// at a time.
///
/// Metrics compare every step's logits with a dense model fed the same
/// tokens. Fails with an out-of-memory error before any work if a device's
/// share of the model exceeds its budget.
pub fn generate(
    model: &WeightStore,
    schedule: &Schedule,
    profiles: &[DeviceProfile],
    predictors: Option<&PredictorParams>,
    cfg: &RuntimeConfig,
    prompt: &[u32],
    num_tokens: usize,
) -> Result<Generation> {
    let spec = *model.spec();
    validate_inputs(&spec, schedule, profiles, predictors, prompt)?;
    cfg.policy.validate()?;
    let cost = CostModel::from_spec(&spec, cfg.cost_scale);
    schedule.check_memory(profiles, &cost)?;

    let mut net = SimNetwork::new(ChannelConfig {
        seed: cfg.seed,
        ..cfg.channel
    })?;
    for p in profiles.iter().skip(1) {
        let up = ChannelConfig {
            plr: p.plr,
            seed: cfg.seed,
            ..cfg.channel
        };
        net.set_link(p.id, MASTER, up)?;
    }
    let mut loader = StoreLoader(model);
    let devices = profiles
        .iter()
        .zip(&schedule.devices)
        .map(|(p, a)| DeviceRuntime::new(*p, a.clone(), &mut loader))
        .collect::<Result<Vec<_>>>()?;
    let n = devices.len();
    let mut run = Run {
        spec,
        cfg,
        store: model,
        cost,
        net,
        devices,
        ready: vec![0.0; n],
        metrics: Metrics::default(),
        messages: 0,
    };

    let priorities = |kind: BlockKind| -> Vec<&[usize]> {
        schedule.devices.iter().map(|d| d.indices(kind)).collect()
    };
    let identity = |kind: BlockKind, layer: usize| {
        let groups = resolve_assignment(
            &priorities(kind),
            &RankList::identity(spec.group_count(kind), kind, layer),
        );
        groups
    };
    let uses_pred = cfg.mapping == MappingMode::Halo && predictors.is_some();
    let mut map_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MAPPING_SALT);
    let lm_groups = identity(BlockKind::LmHead, spec.num_layers)?;

    let mut dense = DenseModel::new(model)?;
    let steps = prompt.len() + num_tokens.saturating_sub(1);
    let mut input_token = prompt[0];
    let mut generated = Vec::new();
    let mut all_logits = Vec::with_capacity(steps);

    for s in 0..steps {
        let token_idx = s as u32;
        let step_start = run.ready[MASTER];
        let mut missing = 0;
        let mut x = embed_token(&run.devices[MASTER].store, input_token)?;

        // concrete groups for the current layer, [mha, mlp]
        let mut current = [identity(BlockKind::Mha, 0)?, identity(BlockKind::Mlp, 0)?];
        let mut pred_done = vec![0.0; n];
        let mut load_done = vec![0.0; n];
        let mut prefetched = false;

        for l in 0..spec.num_layers {
            let has_next = l + 1 < spec.num_layers;
            // preparation of this layer unless it was overlapped with the
            // previous one
            let needs_pred = uses_pred && l > 0;
            let mut lt = vec![0.0; n];
            if !prefetched {
                for (k, kind) in KINDS.into_iter().enumerate() {
                    for (t, d) in lt.iter_mut().zip(run.load(l, kind, &current[k])?) {
                        *t += d;
                    }
                }
                load_done = vec![0.0; n];
            }
            let mut comp_start = vec![0.0; n];
            for i in 0..n {
                let r = run.ready[i];
                let p_end = if needs_pred && !cfg.overlap.pred_comm {
                    let e = r + 2.0 * cfg.timing.predict_seconds;
                    run.stage(token_idx, i, l, None, Stage::Pred, r, e);
                    e
                } else {
                    r.max(pred_done[i])
                };
                let l_end = p_end + lt[i];
                if lt[i] > 0.0 {
                    run.stage(token_idx, i, l, None, Stage::Load, p_end, l_end);
                }
                comp_start[i] = l_end.max(load_done[i]);
            }

            prefetched = false;
            let reliable = cfg.sync == SyncMode::Reliable || l == 0;

            // attention
            let normed = rms_norm(&x);
            for dev in &mut run.devices {
                dev.kv.append(&dev.store, l, &normed)?;
            }
            let input = Activation::new(x.clone(), token_idx, l);
            let (parts, finish) =
                run.compute(token_idx, l, BlockKind::Mha, &current[0], &input, &comp_start)?;
            let xr = x.clone();
            let sync = run.sync(token_idx, l, BlockKind::Mha, parts, &finish, reliable, |m| {
                Ok(add(&xr, &m.values))
            })?;
            missing += sync.missing;
            x = add(&x, &sync.merged.values);

            // ranks for the next layer come from the attention-merged state
            let upcoming = if has_next {
                let mut out = Vec::with_capacity(2);
                for kind in KINDS {
                    let count = spec.group_count(kind);
                    let rank = match (cfg.mapping, predictors) {
                        (MappingMode::Halo, Some(p)) => {
                            let f = Activation::new(x.clone(), token_idx, l);
                            predict_ranks(p, &f, l, kind)?
                        }
                        (MappingMode::Halo, None) => RankList::identity(count, kind, l + 1),
                        (MappingMode::Random, _) => {
                            let mut order: Vec<usize> = (0..count).collect();
                            order.shuffle(&mut map_rng);
                            RankList {
                                order,
                                block: kind,
                                layer: l + 1,
                            }
                        }
                    };
                    out.push(resolve_assignment(&priorities(kind), &rank)?);
                }
                let mlp = out.pop().unwrap();
                let mha = out.pop().unwrap();
                Some([mha, mlp])
            } else {
                None
            };

            // feed-forward, with the next layer prefetched alongside
            let start = run.ready.clone();
            if let (Some(next), true) = (&upcoming, cfg.overlap.load_comp) {
                let mut lt = vec![0.0; n];
                for (k, kind) in KINDS.into_iter().enumerate() {
                    for (t, d) in lt.iter_mut().zip(run.load(l + 1, kind, &next[k])?) {
                        *t += d;
                    }
                }
                for i in 0..n {
                    load_done[i] = start[i] + lt[i];
                    if lt[i] > 0.0 {
                        run.stage(token_idx, i, l + 1, None, Stage::Load, start[i], load_done[i]);
                    }
                }
                prefetched = true;
            }
            let input = Activation::new(x.clone(), token_idx, l);
            let (parts, finish) =
                run.compute(token_idx, l, BlockKind::Mlp, &current[1], &input, &start)?;
            if upcoming.is_some() && uses_pred && cfg.overlap.pred_comm {
                for i in 0..n {
                    pred_done[i] = finish[i] + 2.0 * cfg.timing.predict_seconds;
                    run.stage(token_idx, i, l + 1, None, Stage::Pred, finish[i], pred_done[i]);
                }
            } else {
                pred_done = vec![0.0; n];
            }
            let xr = x.clone();
            let sync = run.sync(token_idx, l, BlockKind::Mlp, parts, &finish, reliable, |m| {
                Ok(add(&xr, &m.values))
            })?;
            missing += sync.missing;
            x = add(&x, &sync.merged.values);

            if let Some(next) = upcoming {
                current = next;
            }
        }

        // LM head, always reliable
        let lt = run.load(spec.num_layers, BlockKind::LmHead, &lm_groups)?;
        let mut start = run.ready.clone();
        for i in 0..n {
            if lt[i] > 0.0 {
                run.stage(token_idx, i, spec.num_layers, None, Stage::Load, start[i], start[i] + lt[i]);
                start[i] += lt[i];
            }
        }
        let input = Activation::new(x.clone(), token_idx, spec.num_layers);
        let (parts, finish) = run.compute(
            token_idx,
            spec.num_layers,
            BlockKind::LmHead,
            &lm_groups,
            &input,
            &start,
        )?;
        let mut chosen = 0u32;
        let sync = run.sync(
            token_idx,
            spec.num_layers,
            BlockKind::LmHead,
            parts,
            &finish,
            true,
            |m| {
                chosen = argmax(&m.values) as u32;
                Ok(vec![chosen as f32])
            },
        )?;
        let logits = sync.merged.values;

        let reference = dense.step(input_token)?;
        let is_generated = s + 1 >= prompt.len();
        run.metrics.tokens.push(TokenMetrics {
            token_idx,
            input: input_token,
            output: chosen,
            tpt: run.ready[MASTER] - step_start,
            deviation: l2_distance(&logits, &reference.logits),
            relative_error: relative_error(&logits, &reference.logits),
            missing_groups: missing,
            generated: is_generated,
        });
        if is_generated {
            generated.push(chosen);
        }
        all_logits.push(logits);
        input_token = if s + 1 < prompt.len() {
            prompt[s + 1]
        } else {
            chosen
        };
        for i in 1..n {
            run.net.clear_inbox(i);
        }
    }

    Ok(Generation {
        tokens: generated,
        logits: all_logits,
        metrics: run.metrics,
        messages: run.messages,
        kv_reserved_bytes: crate::model::KvCache::reserved_bytes(&spec, steps),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_ranks_give_priority_minus_one() {
        let p: Vec<&[usize]> = vec![&[1, 2, 3], &[6, 7, 8], &[4, 5]];
        let r = RankList::identity(8, BlockKind::Mlp, 1);
        let g = resolve_assignment(&p, &r).unwrap();
        assert_eq!(g, vec![vec![0, 1, 2], vec![5, 6, 7], vec![3, 4]]);
    }

    #[test]
    fn malformed_inputs_rejected() {
        let r = RankList::identity(4, BlockKind::Mlp, 1);
        assert!(resolve_assignment(&[&[1, 2], &[2, 3, 4]], &r).is_err());
        assert!(resolve_assignment(&[&[1, 2]], &r).is_err());
        assert!(resolve_assignment(&[&[1, 2, 3, 5]], &r).is_err());
        let bad = RankList {
            order: vec![0, 0, 1, 2],
            block: BlockKind::Mlp,
            layer: 1,
        };
        assert!(resolve_assignment(&[&[1, 2, 3, 4]], &bad).is_err());
    }
}
