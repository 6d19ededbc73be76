//! Gateway-driven collection: discovery, the acknowledged pull exchange,
//! round-robin scheduling with a per-sensor cap, and a deduplicating sink.
//!
//! Every pull request carries two counts: how many samples the gateway
//! wants and how many samples from the previous response it has stored.
//! A sensor deletes samples only when they are acknowledged this way, so a
//! lost response or a gateway crash costs duplicates, never data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use thiserror::Error;

use crate::durable_queue::{DataSample, DurableQueue, QueueError};

/// CoAP all-nodes discovery group.
pub const DISCOVERY_GROUP: Ipv4Addr = Ipv4Addr::new(224, 0, 1, 187);
pub const DISCOVERY_PATH: &str = ".well-known/core";

pub const DEFAULT_WANT: u32 = 10;
pub const DEFAULT_ROUND_CAP: u32 = 120;
pub const DEFAULT_PULL_INTERVAL: u64 = 15;
pub const DEFAULT_DISCOVERY_INTERVAL: u64 = 300;
pub const DEFAULT_BACKLOG_INTERVAL: u64 = 60;
pub const DEFAULT_TIMEOUT: u64 = 2;
pub const DEFAULT_RETRIES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SensorDescriptor {
    pub sensor_id: String,
    pub address: String,
    pub resources: Vec<String>,
}

impl SensorDescriptor {
    pub fn new(sensor_id: impl Into<String>, address: impl Into<String>, resources: Vec<String>) -> Self {
        SensorDescriptor { sensor_id: sensor_id.into(), address: address.into(), resources }
    }

    pub fn is_well_formed(&self) -> bool {
        !self.sensor_id.is_empty() && !self.resources.is_empty() && self.resources.iter().all(|r| !r.is_empty())
    }

    /// Link-format listing, one link per resource:
    /// `</small_particles>;rt="small_particles";ep="dylos-1"`.
    pub fn to_link_format(&self) -> String {
        self.resources
            .iter()
            .map(|r| format!("</{r}>;rt=\"{r}\";ep=\"{}\"", self.sensor_id))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_link_format(address: impl Into<String>, text: &str) -> Option<Self> {
        let mut sensor_id = None;
        let mut resources = Vec::new();
        for link in text.split(',').filter(|l| !l.trim().is_empty()) {
            let mut parts = link.trim().split(';');
            let target = parts.next()?.strip_prefix("</")?.strip_suffix('>')?;
            resources.push(target.to_string());
            for attr in parts {
                if let Some(ep) = attr.strip_prefix("ep=") {
                    let ep = ep.trim_matches('"').to_string();
                    if sensor_id.get_or_insert_with(|| ep.clone()) != &ep {
                        return None;
                    }
                }
            }
        }
        let d = SensorDescriptor { sensor_id: sensor_id?, address: address.into(), resources };
        d.is_well_formed().then_some(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PullRequest {
    pub want: u32,
    pub ack: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PullResponse {
    /// Oldest first.
    pub samples: Vec<DataSample>,
    /// Queue depth beyond this batch.
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PullError {
    #[error("no response")]
    Timeout,
    #[error("ack of {requested} exceeds the {outstanding} samples last served")]
    AckOverrun { requested: u32, outstanding: u32 },
    #[error("sensor storage failure: {0}")]
    Storage(String),
}

/// Sensor side of the exchange: a queue plus the size of the last batch.
#[derive(Debug)]
pub struct SensorAgent {
    descriptor: SensorDescriptor,
    queue: DurableQueue,
    outstanding: u32,
}

impl SensorAgent {
    pub fn new(descriptor: SensorDescriptor, queue: DurableQueue) -> Self {
        SensorAgent { descriptor, queue, outstanding: 0 }
    }

    pub fn descriptor(&self) -> &SensorDescriptor {
        &self.descriptor
    }

    pub fn queue(&self) -> &DurableQueue {
        &self.queue
    }

    pub fn into_queue(self) -> DurableQueue {
        self.queue
    }

    pub fn record(&self, sample: DataSample) -> Result<u64, QueueError> {
        self.queue.push(sample)
    }

    /// Applies the piggybacked ack, then serves the oldest samples without
    /// deleting them.
    pub fn handle_pull(&mut self, req: PullRequest) -> Result<PullResponse, PullError> {
        if req.ack > self.outstanding {
            return Err(PullError::AckOverrun { requested: req.ack, outstanding: self.outstanding });
        }
        self.queue.ack(req.ack as usize).map_err(|e| PullError::Storage(e.to_string()))?;
        self.outstanding = 0;
        let samples: Vec<DataSample> = self.queue.peek(req.want as usize).into_iter().map(|(_, s)| s).collect();
        self.outstanding = samples.len() as u32;
        let remaining = self.queue.len() - samples.len();
        Ok(PullResponse { samples, remaining })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WriteSummary {
    pub stored: usize,
    pub duplicates: usize,
}

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("sink unavailable")]
    Unavailable,
    #[error("sink storage: {0}")]
    Storage(String),
}

/// Anything the gateway can durably hand pulled samples to.
pub trait SampleSink {
    fn store(&mut self, samples: &[DataSample]) -> Result<WriteSummary, SinkError>;
}

impl SampleSink for DurableQueue {
    fn store(&mut self, samples: &[DataSample]) -> Result<WriteSummary, SinkError> {
        for s in samples {
            self.push(s.clone()).map_err(|e| SinkError::Storage(e.to_string()))?;
        }
        Ok(WriteSummary { stored: samples.len(), duplicates: 0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkRow {
    pub home_id: String,
    pub sensor_id: String,
    pub metric: String,
    pub measured_at: u64,
    pub value: f64,
}

pub const SINK_CSV_HEADER: [&str; 5] = ["home_id", "sensor_id", "metric", "measured_at", "value"];

/// Time-series store keyed by (home, sensor, metric, measured_at). The
/// first value written for a key wins; later writes count as duplicates.
#[derive(Debug)]
pub struct DedupSink {
    home_id: String,
    store: BTreeMap<(String, String, u64), f64>,
    journal: Option<File>,
    available: bool,
}

impl DedupSink {
    pub fn new(home_id: impl Into<String>) -> Self {
        DedupSink { home_id: home_id.into(), store: BTreeMap::new(), journal: None, available: true }
    }

    /// Journal-backed sink; rows already in `path` are loaded first.
    pub fn open(home_id: impl Into<String>, path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref();
        let mut sink = DedupSink::new(home_id);
        if path.exists() {
            let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
            for rec in reader.records() {
                let rec = rec.map_err(io::Error::other)?;
                let bad = || io::Error::new(io::ErrorKind::InvalidData, format!("bad journal row {rec:?}"));
                if rec.len() != 5 {
                    return Err(bad());
                }
                let t: u64 = rec[3].parse().map_err(|_| bad())?;
                let v: f64 = rec[4].parse().map_err(|_| bad())?;
                sink.store.entry((rec[1].to_string(), rec[2].to_string(), t)).or_insert(v);
            }
        }
        sink.journal = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(sink)
    }

    pub fn home_id(&self) -> &str {
        &self.home_id
    }

    pub fn set_available(&mut self, available: bool) {
        self.available = available;
    }

    pub fn is_available(&self) -> bool {
        self.available
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn contains(&self, sample: &DataSample) -> bool {
        self.store.contains_key(&sample.key())
    }

    pub fn write(&mut self, samples: &[DataSample]) -> Result<WriteSummary, SinkError> {
        if !self.available {
            return Err(SinkError::Unavailable);
        }
        let mut fresh = Vec::new();
        let mut summary = WriteSummary::default();
        let mut batch_keys = BTreeSet::new();
        for s in samples {
            let key = s.key();
            if self.store.contains_key(&key) || !batch_keys.insert(key) {
                summary.duplicates += 1;
            } else {
                fresh.push(s);
            }
        }
        if let Some(journal) = self.journal.as_mut() {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            for s in &fresh {
                w.write_record([
                    self.home_id.as_str(),
                    &s.sensor_id,
                    &s.metric,
                    &s.measured_at.to_string(),
                    &s.value.to_string(),
                ])
                .map_err(|e| SinkError::Storage(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| SinkError::Storage(e.to_string()))?;
            journal
                .write_all(&bytes)
                .and_then(|_| journal.sync_data())
                .map_err(|e| SinkError::Storage(e.to_string()))?;
        }
        for s in fresh {
            self.store.insert(s.key(), s.value);
            summary.stored += 1;
        }
        Ok(summary)
    }

    /// Rows sorted by (sensor_id, metric, measured_at).
    pub fn rows(&self) -> Vec<SinkRow> {
        self.store
            .iter()
            .map(|((sensor_id, metric, measured_at), value)| SinkRow {
                home_id: self.home_id.clone(),
                sensor_id: sensor_id.clone(),
                metric: metric.clone(),
                measured_at: *measured_at,
                value: *value,
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows())
    }
}

pub fn rows_to_csv(rows: &[SinkRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SINK_CSV_HEADER).expect("in-memory csv");
    for r in rows {
        w.write_record([&r.home_id, &r.sensor_id, &r.metric, &r.measured_at.to_string(), &r.value.to_string()])
            .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 fields")
}

impl SampleSink for DedupSink {
    fn store(&mut self, samples: &[DataSample]) -> Result<WriteSummary, SinkError> {
        self.write(samples)
    }
}

/// How the gateway reaches sensors on the home network.
pub trait Transport {
    /// Multicast discovery probe; returns whatever answered.
    fn probe(&mut self) -> Vec<SensorDescriptor>;
    fn pull(&mut self, sensor: &SensorDescriptor, req: PullRequest) -> Result<PullResponse, PullError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchedulerConfig {
    pub want_per_request: u32,
    pub round_cap: u32,
    pub pull_interval: u64,
    pub discovery_interval: u64,
    pub backlog_interval: u64,
    pub timeout: u64,
    pub retries: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            want_per_request: DEFAULT_WANT,
            round_cap: DEFAULT_ROUND_CAP,
            pull_interval: DEFAULT_PULL_INTERVAL,
            discovery_interval: DEFAULT_DISCOVERY_INTERVAL,
            backlog_interval: DEFAULT_BACKLOG_INTERVAL,
            timeout: DEFAULT_TIMEOUT,
            retries: DEFAULT_RETRIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PollKind {
    Idle,
    Pulled { received: usize, stored: usize, duplicates: usize, remaining: usize },
    Timeout,
    SinkFailure { received: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PollOutcome {
    pub sensor: Option<String>,
    pub kind: PollKind,
    pub attempts: u32,
    pub timeouts: u32,
    /// The response filled the request.
    pub full: bool,
    /// The scheduler moved on to the next sensor.
    pub advanced: bool,
    /// The move wrapped around to the first sensor.
    pub cycle_complete: bool,
}

#[derive(Debug, Clone, Default)]
pub struct DiscoveryResult {
    pub responded: Vec<SensorDescriptor>,
    pub added: Vec<String>,
    pub rejected: Vec<String>,
}

/// Gateway-side polling state. Volatile: a gateway restart builds a new one.
#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    ring: Vec<SensorDescriptor>,
    cursor: usize,
    session: u32,
    pending_ack: BTreeMap<String, u32>,
    expected: Option<BTreeSet<String>>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Self {
        Scheduler { config, ring: Vec::new(), cursor: 0, session: 0, pending_ack: BTreeMap::new(), expected: None }
    }

    /// Only sensors in `ids` are admitted by discovery.
    pub fn with_expected(mut self, ids: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.expected = Some(ids.into_iter().map(Into::into).collect());
        self
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn ring(&self) -> &[SensorDescriptor] {
        &self.ring
    }

    /// Samples pulled from the current sensor in this visit.
    pub fn session(&self) -> u32 {
        self.session
    }

    /// Ack that will ride on the next request to `sensor_id`.
    pub fn pending_ack(&self, sensor_id: &str) -> u32 {
        self.pending_ack.get(sensor_id).copied().unwrap_or(0)
    }

    /// Probes for sensors and appends newly seen, valid ones to the ring
    /// in arrival order.
    pub fn discover<T: Transport + ?Sized>(&mut self, net: &mut T) -> DiscoveryResult {
        let mut result = DiscoveryResult::default();
        let mut seen = BTreeSet::new();
        for d in net.probe() {
            if !seen.insert(d.sensor_id.clone()) {
                continue;
            }
            let admitted = d.is_well_formed() && self.expected.as_ref().is_none_or(|e| e.contains(&d.sensor_id));
            if !admitted {
                result.rejected.push(d.sensor_id.clone());
                continue;
            }
            if !self.ring.iter().any(|r| r.sensor_id == d.sensor_id) {
                self.ring.push(d.clone());
                result.added.push(d.sensor_id.clone());
            }
            result.responded.push(d);
        }
        result
    }

    fn advance(&mut self) -> bool {
        self.session = 0;
        self.cursor = (self.cursor + 1) % self.ring.len();
        self.cursor == 0
    }

    /// One request/response exchange with the current ring member.
    pub fn poll_step<T: Transport + ?Sized, S: SampleSink + ?Sized>(&mut self, net: &mut T, sink: &mut S) -> PollOutcome {
        if self.ring.is_empty() {
            return PollOutcome {
                sensor: None,
                kind: PollKind::Idle,
                attempts: 0,
                timeouts: 0,
                full: false,
                advanced: false,
                cycle_complete: true,
            };
        }
        self.cursor %= self.ring.len();
        let target = self.ring[self.cursor].clone();
        let id = target.sensor_id.clone();
        let want = self.config.want_per_request.min(self.config.round_cap.saturating_sub(self.session)).max(1);
        let mut ack = self.pending_ack.remove(&id).unwrap_or(0);

        let mut attempts = 0;
        let mut timeouts = 0;
        let response = loop {
            attempts += 1;
            match net.pull(&target, PullRequest { want, ack }) {
                Ok(r) => break Some(r),
                Err(e) => {
                    if e == PullError::Timeout {
                        timeouts += 1;
                    }
                    // the previous ack may or may not have been applied
                    ack = 0;
                    if attempts > self.config.retries {
                        break None;
                    }
                }
            }
        };

        let mut outcome = PollOutcome {
            sensor: Some(id.clone()),
            kind: PollKind::Timeout,
            attempts,
            timeouts,
            full: false,
            advanced: false,
            cycle_complete: false,
        };
        let Some(response) = response else {
            outcome.cycle_complete = self.advance();
            outcome.advanced = true;
            return outcome;
        };

        let received = response.samples.len();
        match sink.store(&response.samples) {
            Ok(summary) => {
                self.pending_ack.insert(id, received as u32);
                self.session += received as u32;
                outcome.kind = PollKind::Pulled {
                    received,
                    stored: summary.stored,
                    duplicates: summary.duplicates,
                    remaining: response.remaining,
                };
                outcome.full = received as u32 >= want;
                if !outcome.full || self.session >= self.config.round_cap {
                    outcome.cycle_complete = self.advance();
                    outcome.advanced = true;
                }
            }
            Err(e) => {
                log::debug!("sink rejected {received} samples from {id}: {e}");
                outcome.kind = PollKind::SinkFailure { received };
                outcome.cycle_complete = self.advance();
                outcome.advanced = true;
            }
        }
        outcome
    }
}

/// In-process transport over a set of agents. Sensors listed in
/// `unreachable` time out.
#[derive(Debug, Default)]
pub struct LocalNetwork {
    pub agents: Vec<SensorAgent>,
    pub unreachable: BTreeSet<String>,
}

impl LocalNetwork {
    pub fn new(agents: Vec<SensorAgent>) -> Self {
        LocalNetwork { agents, unreachable: BTreeSet::new() }
    }

    pub fn agent(&self, sensor_id: &str) -> Option<&SensorAgent> {
        self.agents.iter().find(|a| a.descriptor.sensor_id == sensor_id)
    }
}

impl Transport for LocalNetwork {
    fn probe(&mut self) -> Vec<SensorDescriptor> {
        self.agents
            .iter()
            .filter(|a| !self.unreachable.contains(&a.descriptor.sensor_id))
            .map(|a| a.descriptor.clone())
            .collect()
    }

    fn pull(&mut self, sensor: &SensorDescriptor, req: PullRequest) -> Result<PullResponse, PullError> {
        if self.unreachable.contains(&sensor.sensor_id) {
            return Err(PullError::Timeout);
        }
        self.agents
            .iter_mut()
            .find(|a| a.descriptor.sensor_id == sensor.sensor_id)
            .ok_or(PullError::Timeout)?
            .handle_pull(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(sensor: &str, i: u64) -> DataSample {
        DataSample::new(sensor, "small_particles", i as f64, 1_000 + i * 60).unwrap()
    }

    fn agent(dir: &tempfile::TempDir, id: &str, backlog: u64) -> SensorAgent {
        let q = DurableQueue::recover(dir.path().join(format!("{id}.log"))).unwrap();
        for i in 0..backlog {
            q.push(sample(id, i)).unwrap();
        }
        SensorAgent::new(SensorDescriptor::new(id, format!("10.0.0.{}", id.len()), vec!["small_particles".into()]), q)
    }

    #[test]
    fn link_format_roundtrip() {
        let d = SensorDescriptor::new("dylos-1", "10.0.0.5", vec!["small_particles".into(), "large_particles".into()]);
        let text = d.to_link_format();
        assert_eq!(
            text,
            "</small_particles>;rt=\"small_particles\";ep=\"dylos-1\",</large_particles>;rt=\"large_particles\";ep=\"dylos-1\""
        );
        assert_eq!(SensorDescriptor::from_link_format("10.0.0.5", &text), Some(d));
        assert_eq!(SensorDescriptor::from_link_format("x", "</a>;rt=\"a\""), None);
        assert_eq!(SensorDescriptor::from_link_format("x", "</a>;ep=\"s\",</b>;ep=\"t\""), None);
    }

    #[test]
    fn serves_what_it_has() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(&dir, "s", 5);
        let r = a.handle_pull(PullRequest { want: 10, ack: 0 }).unwrap();
        assert_eq!((r.samples.len(), r.remaining), (5, 0));

        let mut b = agent(&dir, "t", 40);
        let r = b.handle_pull(PullRequest { want: 10, ack: 0 }).unwrap();
        assert_eq!((r.samples.len(), r.remaining), (10, 30));
        assert_eq!(r.samples[0], sample("t", 0));
        assert_eq!(b.queue().len(), 40, "serving never deletes");
        let r = b.handle_pull(PullRequest { want: 10, ack: 10 }).unwrap();
        assert_eq!(r.samples[0], sample("t", 10));
        assert_eq!(b.queue().len(), 30);
    }

    #[test]
    fn lost_response_is_reserved() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(&dir, "s", 20);
        let first = a.handle_pull(PullRequest { want: 10, ack: 0 }).unwrap();
        // response lost: the gateway retries without an ack
        let again = a.handle_pull(PullRequest { want: 10, ack: 0 }).unwrap();
        assert_eq!(first, again);
    }

    #[test]
    fn ack_overrun_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = agent(&dir, "s", 20);
        a.handle_pull(PullRequest { want: 5, ack: 0 }).unwrap();
        assert_eq!(
            a.handle_pull(PullRequest { want: 5, ack: 6 }),
            Err(PullError::AckOverrun { requested: 6, outstanding: 5 })
        );
        assert_eq!(a.queue().len(), 20);
    }

    #[test]
    fn sink_dedups() {
        let mut sink = DedupSink::new("home-1");
        let batch: Vec<_> = (0..4).map(|i| sample("s", i)).collect();
        assert_eq!(sink.write(&batch).unwrap(), WriteSummary { stored: 4, duplicates: 0 });
        assert_eq!(sink.write(&batch).unwrap(), WriteSummary { stored: 0, duplicates: 4 });
        assert_eq!(sink.write(&[]).unwrap(), WriteSummary::default());
        let pm = DataSample::new("s", "small_particles", 1.0, 5).unwrap();
        let temp = DataSample::new("s", "temperature", 20.5, 5).unwrap();
        assert_eq!(sink.write(&[pm, temp]).unwrap().stored, 2);
        let mut altered = sample("s", 0);
        altered.value = 99.0;
        assert_eq!(sink.write(&[altered]).unwrap().duplicates, 1);
        let row = sink.rows().into_iter().find(|r| r.measured_at == 1_000).unwrap();
        assert_eq!(row.value, 0.0);
        assert_eq!(sink.len(), 6);
    }

    #[test]
    fn sink_csv_sorted() {
        let mut sink = DedupSink::new("h");
        sink.write(&[sample("b", 1), sample("a", 2), sample("a", 1)]).unwrap();
        assert_eq!(
            sink.to_csv(),
            "home_id,sensor_id,metric,measured_at,value\n\
             h,a,small_particles,1060,1\n\
             h,a,small_particles,1120,2\n\
             h,b,small_particles,1060,1\n"
        );
    }

    #[test]
    fn journal_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sink.csv");
        {
            let mut sink = DedupSink::open("h", &path).unwrap();
            sink.write(&[sample("a", 1), sample("a", 2)]).unwrap();
        }
        let mut sink = DedupSink::open("h", &path).unwrap();
        assert_eq!(sink.len(), 2);
        assert_eq!(sink.write(&[sample("a", 2), sample("a", 3)]).unwrap(), WriteSummary { stored: 1, duplicates: 1 });
    }

    #[test]
    fn unavailable_sink_fails() {
        let mut sink = DedupSink::new("h");
        sink.set_available(false);
        assert!(matches!(sink.write(&[sample("a", 1)]), Err(SinkError::Unavailable)));
        assert!(sink.is_empty());
    }

    struct Probes(Vec<Vec<SensorDescriptor>>);

    impl Transport for Probes {
        fn probe(&mut self) -> Vec<SensorDescriptor> {
            self.0.remove(0)
        }
        fn pull(&mut self, _: &SensorDescriptor, _: PullRequest) -> Result<PullResponse, PullError> {
            Err(PullError::Timeout)
        }
    }

    #[test]
    fn discovery_merges_in_arrival_order() {
        let d = |id: &str| SensorDescriptor::new(id, "addr", vec!["m".into()]);
        let mut net = Probes(vec![
            vec![d("a"), d("b"), d("c")],
            vec![d("c"), d("a"), d("d"), d("d")],
            vec![SensorDescriptor::new("e", "addr", vec![]), d("rogue")],
        ]);
        let mut sched = Scheduler::new(SchedulerConfig::default()).with_expected(["a", "b", "c", "d", "e"]);
        assert_eq!(sched.discover(&mut net).responded.len(), 3);
        let second = sched.discover(&mut net);
        assert_eq!(second.added, ["d"]);
        assert_eq!(second.responded.len(), 3);
        let third = sched.discover(&mut net);
        assert_eq!(third.rejected, ["e", "rogue"]);
        let order: Vec<_> = sched.ring().iter().map(|d| d.sensor_id.as_str()).collect();
        assert_eq!(order, ["a", "b", "c", "d"]);
    }

    #[test]
    fn late_sensor_joins_on_next_discovery() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = LocalNetwork::new(vec![agent(&dir, "a", 0)]);
        let mut sched = Scheduler::new(SchedulerConfig::default());
        sched.discover(&mut net);
        net.agents.push(agent(&dir, "b", 0));
        assert_eq!(sched.ring().len(), 1);
        sched.discover(&mut net);
        assert_eq!(sched.ring().len(), 2);
    }

    #[test]
    fn empty_ring_is_idle() {
        let mut sched = Scheduler::new(SchedulerConfig::default());
        let out = sched.poll_step(&mut LocalNetwork::default(), &mut DedupSink::new("h"));
        assert_eq!(out.kind, PollKind::Idle);
    }

    #[test]
    fn fairness_cap_trace() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = LocalNetwork::new(vec![agent(&dir, "A", 300), agent(&dir, "B", 5)]);
        let mut sched = Scheduler::new(SchedulerConfig::default());
        let mut sink = DedupSink::new("h");
        sched.discover(&mut net);
        let mut trace = Vec::new();
        for _ in 0..14 {
            let out = sched.poll_step(&mut net, &mut sink);
            let PollKind::Pulled { received, .. } = out.kind else { panic!("{out:?}") };
            trace.push((out.sensor.unwrap(), received));
        }
        let mut expected: Vec<(String, usize)> = vec![("A".into(), 10); 12];
        expected.push(("B".into(), 5));
        expected.push(("A".into(), 10));
        assert_eq!(trace, expected);
    }

    #[test]
    fn empty_sensor_advances_immediately() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = LocalNetwork::new(vec![agent(&dir, "A", 0), agent(&dir, "B", 3)]);
        let mut sched = Scheduler::new(SchedulerConfig::default());
        sched.discover(&mut net);
        let out = sched.poll_step(&mut net, &mut DedupSink::new("h"));
        assert!(out.advanced && !out.full);
        assert!(matches!(out.kind, PollKind::Pulled { received: 0, .. }));
    }

    #[test]
    fn sink_failure_resets_ack() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = LocalNetwork::new(vec![agent(&dir, "A", 25)]);
        let mut sched = Scheduler::new(SchedulerConfig::default());
        let mut sink = DedupSink::new("h");
        sched.discover(&mut net);
        sched.poll_step(&mut net, &mut sink);
        assert_eq!(sched.pending_ack("A"), 10);
        sink.set_available(false);
        let out = sched.poll_step(&mut net, &mut sink);
        assert_eq!(out.kind, PollKind::SinkFailure { received: 10 });
        assert_eq!(sched.pending_ack("A"), 0);
        // the first batch was acked; the failed one is served again
        sink.set_available(true);
        sched.poll_step(&mut net, &mut sink);
        assert_eq!(net.agent("A").unwrap().queue().len(), 15);
        assert_eq!(sink.len(), 20);
    }

    #[test]
    fn unreachable_sensor_times_out_with_retries() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = LocalNetwork::new(vec![agent(&dir, "A", 5), agent(&dir, "B", 5)]);
        let mut sched = Scheduler::new(SchedulerConfig::default());
        sched.discover(&mut net);
        net.unreachable.insert("A".into());
        let out = sched.poll_step(&mut net, &mut DedupSink::new("h"));
        assert_eq!((out.kind, out.attempts, out.timeouts, out.advanced), (PollKind::Timeout, 3, 3, true));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn bounded_starvation(
            backlogs in proptest::collection::vec(0u64..150, 2..5),
            cap in 1u32..60,
            want in 1u32..15,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let ids: Vec<String> = (0..backlogs.len()).map(|i| format!("s{i}")).collect();
            let agents = ids.iter().zip(&backlogs).map(|(id, b)| agent(&dir, id, *b)).collect();
            let mut net = LocalNetwork::new(agents);
            let config = SchedulerConfig { round_cap: cap, want_per_request: want, ..Default::default() };
            let mut sched = Scheduler::new(config);
            let mut sink = DedupSink::new("h");
            sched.discover(&mut net);
            let mut since_last: BTreeMap<String, usize> = BTreeMap::new();
            let bound = cap as usize * (ids.len() - 1);
            let total: u64 = backlogs.iter().sum();
            let mut steps = 0;
            while (sink.len() as u64) < total {
                let out = sched.poll_step(&mut net, &mut sink);
                let sensor = out.sensor.unwrap();
                let PollKind::Pulled { received, .. } = out.kind else { panic!() };
                prop_assert!(since_last.get(&sensor).copied().unwrap_or(0) <= bound);
                since_last.insert(sensor.clone(), 0);
                for (id, n) in since_last.iter_mut() {
                    if *id != sensor {
                        *n += received;
                    }
                }
                steps += 1;
                prop_assert!(steps < 10_000);
            }
        }
    }
}
