use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::{Error, Result};

struct Entry<E> {
    at: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Single-threaded event queue ordered by (time, insertion order).
pub struct SimClock<E> {
    now: f64,
    next_seq: u64,
    queue: BinaryHeap<Entry<E>>,
}

impl<E> Default for SimClock<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> SimClock<E> {
    pub fn new() -> Self {
        Self {
            now: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule_event(&mut self, at: f64, event: E) -> Result<u64> {
        if at < self.now {
            return Err(Error::EventInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Entry { at, seq, event });
        Ok(seq)
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.queue.peek().map(|e| e.at)
    }

    /// Pop the next event and move the clock to its time.
    pub fn next_event(&mut self) -> Option<(f64, E)> {
        let e = self.queue.pop()?;
        self.now = e.at;
        Some((e.at, e.event))
    }

    /// Move the clock forward without running events. Moving backwards is
    /// a no-op.
    pub fn advance(&mut self, to: f64) {
        if to > self.now {
            self.now = to;
        }
    }
}
