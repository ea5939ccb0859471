//! Deterministic discrete-event kernel.
//!
//! Events are ordered by `(time, sequence)`, so equal-time events pop in
//! insertion order. All randomness comes from one ChaCha8 stream per
//! simulation instance, which makes traces reproducible across platforms.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::Topology;
use crate::utility::UtilityKind;

/// Signal speed in fiber, km/s.
pub const FIBER_KM_PER_S: f64 = 2.0e5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("cannot schedule at t = {at} before the clock ({now})")]
    Past { at: f64, now: f64 },
    #[error("event time {0} is not finite")]
    NonFinite(f64),
    #[error("link has zero generation capacity (w = {w})")]
    StalledLink { w: f64 },
    #[error("negative fiber length {0}")]
    NegativeLength(f64),
    #[error("intervention references unknown link {0}")]
    UnknownLink(usize),
    #[error("intervention references unknown session {0}")]
    UnknownSession(usize),
}

/// Seeded generator owned by one simulation instance.
pub type SimRng = ChaCha8Rng;

pub fn sim_rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Entry<E> {
    time: f64,
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
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Priority queue of timestamped events with a monotone clock.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    next_seq: u64,
    now: f64,
    dispatched: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self { heap: BinaryHeap::new(), next_seq: 0, now: 0.0, dispatched: 0 }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Events popped so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    /// Schedules `event` at absolute time `at`; returns its sequence number.
    pub fn schedule(&mut self, at: f64, event: E) -> Result<u64, SimError> {
        if !at.is_finite() {
            return Err(SimError::NonFinite(at));
        }
        if at < self.now {
            return Err(SimError::Past { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry { time: at, seq, event });
        Ok(seq)
    }

    /// Schedules `event` `delay` seconds from now.
    pub fn schedule_in(&mut self, delay: f64, event: E) -> Result<u64, SimError> {
        self.schedule(self.now + delay.max(0.0), event)
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    /// Pops the next event and advances the clock to its time.
    pub fn pop(&mut self) -> Option<(f64, E)> {
        let e = self.heap.pop()?;
        self.now = e.time;
        self.dispatched += 1;
        Some((e.time, e.event))
    }

    /// Pops the next event only if it is due at or before `t_end`.
    pub fn pop_until(&mut self, t_end: f64) -> Option<(f64, E)> {
        match self.peek_time() {
            Some(t) if t <= t_end => self.pop(),
            _ => None,
        }
    }

    /// Dispatches every event due at or before `t_end` in order, then moves
    /// the clock to `t_end`. The handler may schedule further events.
    pub fn run_until<F>(&mut self, t_end: f64, mut handler: F)
    where
        F: FnMut(&mut Self, f64, E),
    {
        while let Some((t, e)) = self.pop_until(t_end) {
            handler(self, t, e);
        }
        if t_end > self.now {
            self.now = t_end;
        }
    }
}

/// Time until the next link-level entanglement: geometric number of
/// attempts (`k >= 1`) with success probability `d (1 - w) / chi`, each
/// attempt lasting `1/chi`.
pub fn sample_lle_time<G: rand::Rng + ?Sized>(d: f64, w: f64, chi: f64, rng: &mut G) -> Result<f64, SimError> {
    let p = (d * (1.0 - w) / chi).min(1.0);
    if !(p > 0.0) {
        return Err(SimError::StalledLink { w });
    }
    let failures = Geometric::new(p).expect("probability in (0, 1]").sample(rng);
    Ok((failures as f64 + 1.0) / chi)
}

/// One-way classical delay over `length_km` of fiber.
pub fn propagation_delay(length_km: f64) -> Result<f64, SimError> {
    if !(length_km >= 0.0) {
        return Err(SimError::NegativeLength(length_km));
    }
    Ok(length_km / FIBER_KM_PER_S)
}

/// A scheduled change to the network or workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intervention {
    LinkFailure { link: usize },
    LinkRestore { link: usize },
    SessionStart { session: usize },
    SessionTerminate { session: usize },
    UtilitySwitch { sessions: Vec<usize>, utility: UtilityKind },
}

impl Intervention {
    pub fn validate(&self, topo: &Topology, n_sessions: usize) -> Result<(), SimError> {
        let link = |l: usize| if l < topo.link_count() { Ok(()) } else { Err(SimError::UnknownLink(l)) };
        let session = |s: usize| if s < n_sessions { Ok(()) } else { Err(SimError::UnknownSession(s)) };
        match self {
            Self::LinkFailure { link: l } | Self::LinkRestore { link: l } => link(*l),
            Self::SessionStart { session: s } | Self::SessionTerminate { session: s } => session(*s),
            Self::UtilitySwitch { sessions, .. } => sessions.iter().try_for_each(|&s| session(s)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::LinkFailure { link } => format!("l{link}:failure"),
            Self::LinkRestore { link } => format!("l{link}:restore"),
            Self::SessionStart { session } => format!("s{session}:start"),
            Self::SessionTerminate { session } => format!("s{session}:terminate"),
            Self::UtilitySwitch { utility, .. } => format!("workload:switch_{utility}"),
        }
    }
}

/// An intervention and its firing time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedIntervention {
    pub time_s: f64,
    #[serde(flatten)]
    pub action: Intervention,
}
