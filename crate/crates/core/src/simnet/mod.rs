//! Deterministic discrete-event simulation of a home deployment.
//!
//! Time is virtual seconds. All randomness comes from ChaCha8 streams
//! derived from the scenario seed, so a run is a pure function of its
//! configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::durable_queue::QueueError;
use crate::provisioner::ProvisionError;

mod report;
mod scenario;

pub use report::{verify_report_dir, MetricsReport, OutageSummary, Snapshot, VerifyError, VerifySummary};
pub use scenario::{run_provisioning, run_scenario, ProvisionOutcome, ProvisionReport};

pub const GATEWAY: &str = "gateway";
/// Virtual t=0 as a wall-clock epoch, used for `measured_at`.
pub const EPOCH_BASE: u64 = 1_600_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event at {at} is before now={now}")]
    PastEvent { at: u64, now: u64 },
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Provision(#[from] ProvisionError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Virtual clock plus pending events, ordered by (time, insertion order).
#[derive(Debug, Clone)]
pub struct EventQueue<E> {
    now: u64,
    next_seq: u64,
    pending: BTreeMap<(u64, u64), E>,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue { now: 0, next_seq: 0, pending: BTreeMap::new() }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn schedule(&mut self, at: u64, event: E) -> Result<(), SimError> {
        if at < self.now {
            return Err(SimError::PastEvent { at, now: self.now });
        }
        self.pending.insert((at, self.next_seq), event);
        self.next_seq += 1;
        Ok(())
    }

    /// Removes the earliest event and advances the clock to it.
    pub fn pop(&mut self) -> Option<(u64, E)> {
        let ((at, _), event) = self.pending.pop_first()?;
        self.now = at;
        Some((at, event))
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.pending.first_key_value().map(|((t, _), _)| *t)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Delivered,
    Dropped,
}

/// i.i.d. Bernoulli loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossModel {
    pub p: f64,
    pub seed: u64,
}

impl LossModel {
    pub fn new(p: f64, seed: u64) -> Option<Self> {
        (0.0..=1.0).contains(&p).then_some(LossModel { p, seed })
    }

    /// Independent stream for one listener or link.
    pub fn stream(&self, id: u64) -> LossStream {
        LossStream { p: self.p, rng: rng_stream(self.seed, id) }
    }
}

#[derive(Debug, Clone)]
pub struct LossStream {
    p: f64,
    rng: ChaCha8Rng,
}

impl LossStream {
    /// Every call consumes exactly one draw.
    pub fn deliver(&mut self) -> Delivery {
        let x: f64 = self.rng.gen();
        if x < self.p {
            Delivery::Dropped
        } else {
            Delivery::Delivered
        }
    }
}

pub(crate) fn rng_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Measured loss rates shipped as named presets, as fractions.
pub const PRESETS: &[(&str, f64)] = &[
    ("table-loss/loc1/close", 0.37),
    ("table-loss/loc1/medium", 0.70),
    ("table-loss/loc1/far", 0.93),
    ("table-loss/loc2/close", 0.54),
    ("table-loss/loc2/medium", 0.36),
    ("table-loss/loc2/far", 0.99),
    ("table-loss/loc3/close", 0.90),
    ("table-loss/loc3/medium", 0.99),
    ("table-loss/loc3/far", 1.00),
    ("pi-vs-bbb/bbb/close", 0.37),
    ("pi-vs-bbb/bbb/medium", 0.70),
    ("pi-vs-bbb/bbb/far", 0.93),
    ("pi-vs-bbb/pi/close", 0.018),
    ("pi-vs-bbb/pi/medium", 0.108),
    ("pi-vs-bbb/pi/far", 0.079),
];

pub fn preset(name: &str) -> Option<f64> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, p)| *p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FaultKind {
    /// Target process dies; durable files survive; restarts at window end.
    PowerLoss,
    /// Target drops all home-network traffic.
    NetDisconnect,
    /// Gateway loses its uplink to the sink only.
    InternetDisconnect,
}

impl FaultKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FaultKind::PowerLoss => "power_loss",
            FaultKind::NetDisconnect => "net_disconnect",
            FaultKind::InternetDisconnect => "internet_disconnect",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FaultKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "power_loss" => Ok(FaultKind::PowerLoss),
            "net_disconnect" => Ok(FaultKind::NetDisconnect),
            "internet_disconnect" => Ok(FaultKind::InternetDisconnect),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultWindow {
    pub target: String,
    pub kind: FaultKind,
    pub start: u64,
    pub end: u64,
}

impl FaultWindow {
    pub fn new(target: impl Into<String>, kind: FaultKind, start: u64, end: u64) -> Option<Self> {
        (start < end).then(|| FaultWindow { target: target.into(), kind, start, end })
    }

    pub fn contains(&self, t: u64) -> bool {
        self.start <= t && t < self.end
    }
}
