//! Real datagram sockets on 127.0.0.1 using the simulated wire format.
//! Timing here is wall-clock, so nothing in this module is deterministic.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::wire::{Datagram, Reassembler, HEADER_LEN};
use super::{GatherResult, TimeoutPolicy};
use crate::model::BlockKind;
use crate::Result;

type Queue = Arc<(Mutex<VecDeque<Datagram>>, Condvar)>;

/// One bound socket with a background receive thread. Any number of
/// threads may send; a single consumer gathers.
pub struct UdpEndpoint {
    socket: UdpSocket,
    queue: Queue,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
}

impl UdpEndpoint {
    pub fn bind() -> Result<Self> {
        let socket = UdpSocket::bind("127.0.0.1:0")?;
        let rx = socket.try_clone()?;
        rx.set_read_timeout(Some(Duration::from_millis(20)))?;
        let queue: Queue = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));
        let (q, s) = (queue.clone(), stop.clone());
        let worker = std::thread::spawn(move || {
            let mut buf = vec![0u8; 65536];
            while !s.load(Ordering::Relaxed) {
                let Ok(n) = rx.recv(&mut buf) else { continue };
                // malformed datagrams are dropped like lost ones
                if let Ok(d) = Datagram::decode(&buf[..n]) {
                    q.0.lock().unwrap().push_back(d);
                    q.1.notify_one();
                }
            }
        });
        Ok(Self {
            socket,
            queue,
            stop,
            worker: Some(worker),
        })
    }

    pub fn addr(&self) -> Result<SocketAddr> {
        Ok(self.socket.local_addr()?)
    }

    pub fn send(&self, to: SocketAddr, datagrams: &[Datagram]) -> Result<()> {
        for d in datagrams {
            debug_assert!(d.wire_len() >= HEADER_LEN);
            self.socket.send_to(&d.encode(), to)?;
        }
        Ok(())
    }

    /// Wall-clock counterpart of the simulated gather. The timer starts
    /// when this is called.
    pub fn gather_with_timeout(
        &self,
        expected: &BTreeSet<(usize, usize)>,
        request_id: u64,
        token_idx: u32,
        layer: usize,
        block: BlockKind,
        policy: &TimeoutPolicy,
    ) -> Result<GatherResult> {
        let start = Instant::now();
        let deadline = start + Duration::from_secs_f64(policy.gather_timeout);
        let mut partial: BTreeMap<(usize, usize), (Reassembler, _)> = BTreeMap::new();
        let mut done = BTreeMap::new();
        let (lock, cvar) = &*self.queue;
        let mut q = lock.lock().unwrap();
        while done.len() < expected.len() {
            let Some(d) = q.pop_front() else {
                let now = Instant::now();
                if now >= deadline {
                    break;
                }
                q = cvar.wait_timeout(q, deadline - now).unwrap().0;
                continue;
            };
            let h = d.header;
            let key = (h.origin as usize, h.group_id as usize);
            let fresh = h.request_id == request_id
                && h.token_idx == token_idx
                && h.layer as usize == layer
                && h.block == block.as_u8();
            if !fresh || !expected.contains(&key) || done.contains_key(&key) {
                continue;
            }
            let entry = partial.entry(key).or_insert_with(|| (Reassembler::new(), h));
            if entry.0.push(&d)? {
                let (r, h0) = partial.remove(&key).unwrap();
                done.insert(key, r.into_group(&h0)?);
            }
        }
        drop(q);
        let elapsed = start.elapsed().as_secs_f64();
        let missing_groups: Vec<_> = expected
            .iter()
            .filter(|k| !done.contains_key(k))
            .copied()
            .collect();
        Ok(GatherResult {
            timed_out: !missing_groups.is_empty(),
            received: done.into_values().collect(),
            missing_groups,
            elapsed,
            completed_at: elapsed,
        })
    }
}

impl Drop for UdpEndpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
