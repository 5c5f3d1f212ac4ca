use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::clock::SimClock;
use super::wire::{Datagram, DatagramHeader, Reassembler};
use super::{ChannelConfig, GatherResult, TimeoutPolicy};
use crate::model::BlockKind;
use crate::{Error, Result};

/// Directed link `(from, to)`.
pub type LinkId = (usize, usize);

/// Floating-point slack allowed on gather deadlines.
pub const EVENT_GRANULARITY: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Sent,
    Lost,
    Delivered,
    Accepted,
    Discarded,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub time: f64,
    pub kind: TraceKind,
    pub from: usize,
    pub to: usize,
    pub header: Option<DatagramHeader>,
}

/// Fate of one datagram handed to [`SimNetwork::send_unreliable`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeliveryEvent {
    pub sent_at: f64,
    /// `None` when the datagram was dropped.
    pub arrive_at: Option<f64>,
}

struct Link {
    config: ChannelConfig,
    rng: ChaCha8Rng,
    busy_until: f64,
}

struct Deliver {
    from: usize,
    to: usize,
    datagram: Datagram,
}

/// Deterministic single-threaded network of numbered endpoints.
pub struct SimNetwork {
    default: ChannelConfig,
    overrides: HashMap<LinkId, ChannelConfig>,
    links: HashMap<LinkId, Link>,
    clock: SimClock<Deliver>,
    inboxes: HashMap<usize, Vec<(f64, usize, Datagram)>>,
    trace: Option<Vec<TraceEvent>>,
}

impl SimNetwork {
    pub fn new(default: ChannelConfig) -> Result<Self> {
        default.validate()?;
        Ok(Self {
            default,
            overrides: HashMap::new(),
            links: HashMap::new(),
            clock: SimClock::new(),
            inboxes: HashMap::new(),
            trace: None,
        })
    }

    /// Keep every send, loss and delivery in an in-memory trace.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn set_link(&mut self, from: usize, to: usize, config: ChannelConfig) -> Result<()> {
        config.validate()?;
        self.overrides.insert((from, to), config);
        self.links.remove(&(from, to));
        Ok(())
    }

    pub fn link_config(&self, from: usize, to: usize) -> ChannelConfig {
        self.overrides
            .get(&(from, to))
            .copied()
            .unwrap_or(self.default)
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    fn record(&mut self, time: f64, kind: TraceKind, from: usize, to: usize, h: Option<DatagramHeader>) {
        if let Some(t) = &mut self.trace {
            t.push(TraceEvent {
                time,
                kind,
                from,
                to,
                header: h,
            });
        }
    }

    fn link(&mut self, from: usize, to: usize) -> &mut Link {
        let config = self.link_config(from, to);
        self.links.entry((from, to)).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(((from as u64) << 32) | to as u64);
            Link {
                config,
                rng,
                busy_until: 0.0,
            }
        })
    }

    /// Serialize one copy onto the link. Returns (serialization end, lost).
    fn transmit(&mut self, from: usize, to: usize, d: &Datagram, ready: f64) -> (f64, bool) {
        let link = self.link(from, to);
        let start = ready.max(link.busy_until);
        let end = start + link.config.serialization_delay(d.wire_len());
        link.busy_until = end;
        let plr = link.config.plr;
        // always draw so the loss sequence does not depend on plr edge cases
        let draw: f64 = link.rng.gen();
        let lost = draw < plr;
        self.record(start, TraceKind::Sent, from, to, Some(d.header));
        if lost {
            self.record(end, TraceKind::Lost, from, to, Some(d.header));
        }
        (end, lost)
    }

    fn schedule_delivery(&mut self, from: usize, to: usize, d: Datagram, at: f64) -> Result<()> {
        self.clock.schedule_event(
            at,
            Deliver {
                from,
                to,
                datagram: d,
            },
        )?;
        Ok(())
    }

    /// Fire-and-forget send starting at time `at`.
    pub fn send_unreliable(
        &mut self,
        from: usize,
        to: usize,
        datagrams: Vec<Datagram>,
        at: f64,
    ) -> Result<Vec<DeliveryEvent>> {
        let mut out = Vec::with_capacity(datagrams.len());
        for d in datagrams {
            let (end, lost) = self.transmit(from, to, &d, at);
            let arrive_at = if lost {
                None
            } else {
                let arrive = end + self.link_config(from, to).one_way_latency;
                self.schedule_delivery(from, to, d, arrive)?;
                Some(arrive)
            };
            out.push(DeliveryEvent {
                sent_at: at,
                arrive_at,
            });
        }
        Ok(out)
    }

    /// Send all fragments starting at `at`; each lost copy is resent
    /// `reliable_retry_interval` after its serialization ends. Returns the
    /// time the last fragment arrives.
    pub fn send_reliable(
        &mut self,
        from: usize,
        to: usize,
        datagrams: Vec<Datagram>,
        at: f64,
        policy: &TimeoutPolicy,
    ) -> Result<f64> {
        let latency = self.link_config(from, to).one_way_latency;
        // (ready time, fragment index, retries so far)
        let mut pending: Vec<(f64, usize, u32)> =
            (0..datagrams.len()).map(|i| (at, i, 0)).collect();
        let mut completion = at;
        let mut slots: Vec<Option<Datagram>> = datagrams.into_iter().map(Some).collect();
        while !pending.is_empty() {
            let pos = (0..pending.len())
                .min_by(|&a, &b| {
                    pending[a]
                        .0
                        .total_cmp(&pending[b].0)
                        .then(pending[a].1.cmp(&pending[b].1))
                })
                .unwrap();
            let (ready, idx, retries) = pending.swap_remove(pos);
            let d = slots[idx].clone().unwrap();
            let (end, lost) = self.transmit(from, to, &d, ready);
            if lost {
                if policy.reliable_max_retries.is_some_and(|m| retries >= m) {
                    return Err(Error::DeliveryFailure {
                        from,
                        to,
                        retries,
                    });
                }
                pending.push((end + policy.reliable_retry_interval, idx, retries + 1));
            } else {
                let arrive = end + latency;
                completion = completion.max(arrive);
                self.schedule_delivery(from, to, slots[idx].take().unwrap(), arrive)?;
            }
        }
        Ok(completion)
    }

    /// Drop anything already delivered to `endpoint` but not consumed.
    pub fn clear_inbox(&mut self, endpoint: usize) {
        self.inboxes.remove(&endpoint);
    }

    /// Wait at `endpoint` for the expected `(origin, group_id)` messages
    /// tagged `(request_id, token_idx, layer, block)`, giving up
    /// `gather_timeout` after `post_time`.
    #[allow(clippy::too_many_arguments)]
    pub fn gather_with_timeout(
        &mut self,
        endpoint: usize,
        expected: &BTreeSet<(usize, usize)>,
        request_id: u64,
        token_idx: u32,
        layer: usize,
        block: BlockKind,
        post_time: f64,
        policy: &TimeoutPolicy,
    ) -> Result<GatherResult> {
        self.collect(
            endpoint,
            expected,
            (request_id, token_idx, layer, block),
            post_time,
            Some(policy.gather_timeout),
        )
    }

    /// Like [`Self::gather_with_timeout`] with no deadline, for messages
    /// sent with [`Self::send_reliable`].
    pub fn gather_all(
        &mut self,
        endpoint: usize,
        expected: &BTreeSet<(usize, usize)>,
        request_id: u64,
        token_idx: u32,
        layer: usize,
        block: BlockKind,
        post_time: f64,
    ) -> Result<GatherResult> {
        let r = self.collect(
            endpoint,
            expected,
            (request_id, token_idx, layer, block),
            post_time,
            None,
        )?;
        if let Some(&(origin, _)) = r.missing_groups.first() {
            return Err(Error::DeliveryFailure {
                from: origin,
                to: endpoint,
                retries: 0,
            });
        }
        Ok(r)
    }

    fn collect(
        &mut self,
        endpoint: usize,
        expected: &BTreeSet<(usize, usize)>,
        tag: (u64, u32, usize, BlockKind),
        post_time: f64,
        timeout: Option<f64>,
    ) -> Result<GatherResult> {
        let deadline = timeout.map(|t| post_time + t);
        let mut partial: BTreeMap<(usize, usize), (Reassembler, DatagramHeader)> = BTreeMap::new();
        let mut done: BTreeMap<(usize, usize), _> = BTreeMap::new();
        let mut last_arrival = f64::NEG_INFINITY;

        let matches = |h: &DatagramHeader| {
            h.request_id == tag.0
                && h.token_idx == tag.1
                && h.layer as usize == tag.2
                && h.block == tag.3.as_u8()
        };

        let mut backlog = self.inboxes.remove(&endpoint).unwrap_or_default();
        backlog.reverse();
        loop {
            if done.len() == expected.len() {
                break;
            }
            let (time, from, d) = if let Some(item) = backlog.pop() {
                item
            } else {
                match self.clock.peek_time() {
                    Some(t) if deadline.map_or(true, |dl| t <= dl) => {}
                    _ => break,
                }
                let (t, ev) = self.clock.next_event().unwrap();
                self.record(t, TraceKind::Delivered, ev.from, ev.to, Some(ev.datagram.header));
                if ev.to != endpoint {
                    self.inboxes
                        .entry(ev.to)
                        .or_default()
                        .push((t, ev.from, ev.datagram));
                    continue;
                }
                (t, ev.from, ev.datagram)
            };
            let h = d.header;
            let key = (h.origin as usize, h.group_id as usize);
            if !matches(&h) || !expected.contains(&key) || done.contains_key(&key) {
                self.record(time, TraceKind::Discarded, from, endpoint, Some(h));
                continue;
            }
            let entry = partial
                .entry(key)
                .or_insert_with(|| (Reassembler::new(), h));
            if entry.0.push(&d)? {
                let (r, h0) = partial.remove(&key).unwrap();
                let group = r.into_group(&h0)?;
                done.insert(key, group);
                last_arrival = last_arrival.max(time);
                self.record(time, TraceKind::Accepted, from, endpoint, Some(h));
            }
        }

        let timed_out = done.len() < expected.len();
        let completed_at = if timed_out {
            // reliable gathers without a deadline only end early if the
            // queue drained
            deadline.unwrap_or(self.clock.now().max(post_time))
        } else {
            post_time.max(last_arrival)
        };
        if timed_out {
            self.record(completed_at, TraceKind::TimedOut, endpoint, endpoint, None);
        }
        self.clock.advance(completed_at);
        let missing_groups = expected
            .iter()
            .filter(|k| !done.contains_key(k))
            .copied()
            .collect();
        Ok(GatherResult {
            received: done.into_values().collect(),
            missing_groups,
            elapsed: completed_at - post_time,
            timed_out,
            completed_at,
        })
    }
}
