use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::report::{MetricsReport, OutageSummary, Snapshot};
use super::{rng_stream, Delivery, EventQueue, FaultKind, LossModel, LossStream, SimError, EPOCH_BASE, GATEWAY};
use crate::collect_proto::{
    DedupSink, PollKind, PullError, PullRequest, PullResponse, Scheduler, SensorAgent, SensorDescriptor, Transport,
};
use crate::config::{ProvisioningConfig, ScenarioConfig, SensorConfig};
use crate::durable_queue::{append_torn_record, DataSample, DurableQueue};
use crate::provisioner::{event_line, GatewayProvisionState, ProvisionEvent, SensorProvisionState};

const STREAM_IV: u64 = 0;
const STREAM_AIR: u64 = 100;
const STREAM_LINK: u64 = 500;
const STREAM_VALUES: u64 = 1000;
/// Cap on the post-duration drain phase.
const SETTLE_LIMIT: u64 = 7 * 24 * 3600;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvisionOutcome {
    pub sensor_id: String,
    /// Virtual time and round of recovery.
    pub recovered: Option<(u64, u64)>,
}

#[derive(Debug, Clone, Default)]
pub struct ProvisionReport {
    pub outcomes: Vec<ProvisionOutcome>,
    pub rounds_sent: u64,
    pub final_loss_index: u8,
    pub events: Vec<String>,
}

impl ProvisionReport {
    pub fn all_recovered(&self) -> bool {
        self.outcomes.iter().all(|o| o.recovered.is_some())
    }
}

/// Broadcasts rounds until every sensor has joined or `max_rounds` is
/// reached. A sensor hears a round only while its scan is on the gateway
/// channel and locks there after the first frame it buffers.
pub fn run_provisioning(
    cfg: &ProvisioningConfig,
    sensors: &[String],
    air: &LossModel,
) -> Result<ProvisionReport, SimError> {
    let mut gateway =
        GatewayProvisionState::new(cfg.keys.clone(), cfg.id, cfg.loss_table, cfg.escalation_period, sensors.iter().cloned())?;
    let mut iv_rng = rng_stream(air.seed, STREAM_IV);
    let mut listeners: Vec<(SensorProvisionState, LossStream)> = sensors
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let state = SensorProvisionState::new(s.clone(), cfg.keys.clone(), cfg.id, cfg.loss_table, cfg.dwell);
            (state, air.stream(STREAM_AIR + i as u64))
        })
        .collect();
    let mut report = ProvisionReport {
        outcomes: sensors.iter().map(|s| ProvisionOutcome { sensor_id: s.clone(), recovered: None }).collect(),
        ..Default::default()
    };

    for n in 0..cfg.max_rounds {
        if gateway.status().done {
            break;
        }
        let now = n * cfg.round_interval;
        let round = gateway.emit_round(&cfg.credentials, EPOCH_BASE + now, &mut iv_rng)?;
        for (i, (sensor, air)) in listeners.iter_mut().enumerate() {
            if report.outcomes[i].recovered.is_some() {
                continue;
            }
            let channel = sensor.scan_step(now);
            if channel != cfg.channel {
                continue;
            }
            for frame in &round.frames {
                if air.deliver() == Delivery::Dropped {
                    continue;
                }
                let event = sensor.ingest(frame, now);
                match &event {
                    ProvisionEvent::Ignored => {}
                    ProvisionEvent::Buffered(_) => sensor.lock_channel(channel),
                    ProvisionEvent::CredentialsRecovered(_) => {
                        report.events.push(event_line(now, sensor.name(), &event));
                        report.outcomes[i].recovered = Some((now, round.number));
                        gateway.note_connected(sensor.name())?;
                        break;
                    }
                    _ => report.events.push(event_line(now, sensor.name(), &event)),
                }
            }
        }
    }
    report.rounds_sent = gateway.rounds_sent();
    report.final_loss_index = gateway.loss_index();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Attach(usize),
    Sample(usize),
    Poll,
    Upload,
    Discovery { periodic: bool },
    FaultStart(usize),
    FaultEnd(usize),
}

struct SimSensor {
    cfg: SensorConfig,
    log_path: PathBuf,
    agent: Option<SensorAgent>,
    attached: bool,
    net_up: bool,
    values: ChaCha8Rng,
}

impl SimSensor {
    fn descriptor(&self) -> SensorDescriptor {
        SensorDescriptor::new(&self.cfg.sensor_id, format!("sim://{}", self.cfg.sensor_id), self.cfg.metrics.clone())
    }

    fn depth(&self) -> usize {
        self.agent.as_ref().map_or(0, |a| a.queue().len())
    }

    fn reachable(&self) -> bool {
        self.attached && self.net_up && self.agent.is_some()
    }
}

struct SimTransport<'a> {
    sensors: &'a mut [SimSensor],
    gateway_net_up: bool,
    loss: &'a mut LossStream,
}

impl Transport for SimTransport<'_> {
    fn probe(&mut self) -> Vec<SensorDescriptor> {
        if !self.gateway_net_up {
            return Vec::new();
        }
        let mut found = Vec::new();
        for s in self.sensors.iter().filter(|s| s.reachable()) {
            if self.loss.deliver() == Delivery::Delivered && self.loss.deliver() == Delivery::Delivered {
                found.push(s.descriptor());
            }
        }
        found
    }

    fn pull(&mut self, sensor: &SensorDescriptor, req: PullRequest) -> Result<PullResponse, PullError> {
        let Some(s) = self.sensors.iter_mut().find(|s| s.cfg.sensor_id == sensor.sensor_id) else {
            return Err(PullError::Timeout);
        };
        if !self.gateway_net_up || !s.reachable() || self.loss.deliver() == Delivery::Dropped {
            return Err(PullError::Timeout);
        }
        let response = s.agent.as_mut().expect("reachable").handle_pull(req)?;
        if self.loss.deliver() == Delivery::Dropped {
            return Err(PullError::Timeout);
        }
        Ok(response)
    }
}

struct Gateway {
    scheduler: Option<Scheduler>,
    queue: Option<DurableQueue>,
    log_path: PathBuf,
    net_up: bool,
    internet_up: bool,
}

struct OutageTracker {
    drained_at: Option<u64>,
}

struct Sim<'c> {
    cfg: &'c ScenarioConfig,
    events: EventQueue<Event>,
    sensors: Vec<SimSensor>,
    gateway: Gateway,
    sink: DedupSink,
    link: LossStream,
    generated: Vec<DataSample>,
    report: MetricsReport,
    outages: Vec<OutageTracker>,
}

/// Runs the deployment described by `cfg`, keeping queue files under
/// `workdir`. After `cfg.duration` sampling stops and the run continues
/// until every queue has drained.
pub fn run_scenario(cfg: &ScenarioConfig, workdir: &Path) -> Result<MetricsReport, SimError> {
    let dep = &cfg.deployment;
    for f in &cfg.faults {
        if f.target != GATEWAY && !dep.sensors.iter().any(|s| s.sensor_id == f.target) {
            return Err(SimError::UnknownNode(f.target.clone()));
        }
    }
    let queue_dir = workdir.join("queues");
    fs::create_dir_all(&queue_dir)?;

    let ids: Vec<String> = dep.sensors.iter().map(|s| s.sensor_id.clone()).collect();
    let provisioning = match &dep.provisioning {
        Some(p) => {
            let air = LossModel { p: cfg.loss, seed: cfg.seed };
            Some(run_provisioning(p, &ids, &air)?)
        }
        None => None,
    };

    let mut report = MetricsReport { home_id: dep.home_id.clone(), sensor_ids: ids.clone(), ..Default::default() };
    let mut events = EventQueue::new();
    let mut sensors = Vec::new();
    for (i, s) in dep.sensors.iter().enumerate() {
        let log_path = queue_dir.join(format!("{}.log", s.sensor_id));
        let agent = SensorAgent::new(
            SensorDescriptor::new(&s.sensor_id, format!("sim://{}", s.sensor_id), s.metrics.clone()),
            DurableQueue::recover(&log_path)?,
        );
        let attach_at = match &provisioning {
            None => Some(s.attach_at),
            Some(p) => p.outcomes[i].recovered.map(|(t, _)| t.max(s.attach_at)),
        };
        match attach_at {
            Some(t) if t < cfg.duration => events.schedule(t, Event::Attach(i))?,
            _ => report.events.push(format!("t=0 node={} event=never_attached", s.sensor_id)),
        }
        sensors.push(SimSensor {
            cfg: s.clone(),
            log_path,
            agent: Some(agent),
            attached: false,
            net_up: true,
            values: rng_stream(cfg.seed, STREAM_VALUES + i as u64),
        });
    }
    if let Some(p) = &provisioning {
        report.events.extend(p.events.iter().cloned());
    }
    report.provisioning = provisioning;

    let gw_log = queue_dir.join("gateway.log");
    let gateway = Gateway {
        scheduler: Some(Scheduler::new(dep.gateway.clone()).with_expected(ids.iter().cloned())),
        queue: Some(DurableQueue::recover(&gw_log)?),
        log_path: gw_log,
        net_up: true,
        internet_up: true,
    };

    events.schedule(0, Event::Discovery { periodic: true })?;
    events.schedule(0, Event::Poll)?;
    events.schedule(0, Event::Upload)?;
    for (i, f) in cfg.faults.iter().enumerate() {
        events.schedule(f.start, Event::FaultStart(i))?;
        events.schedule(f.end, Event::FaultEnd(i))?;
    }

    let mut sim = Sim {
        cfg,
        events,
        sensors,
        gateway,
        sink: DedupSink::new(&dep.home_id),
        link: LossModel { p: cfg.link_loss, seed: cfg.seed }.stream(STREAM_LINK),
        generated: Vec::new(),
        report,
        outages: cfg.faults.iter().map(|_| OutageTracker { drained_at: None }).collect(),
    };
    sim.run()?;
    Ok(sim.finish())
}

impl Sim<'_> {
    fn run(&mut self) -> Result<(), SimError> {
        let limit = self.cfg.duration + SETTLE_LIMIT;
        let mut next_snapshot = 0;
        while let Some((t, event)) = self.events.pop() {
            while next_snapshot <= t {
                self.snapshot(next_snapshot);
                next_snapshot += self.cfg.report_interval;
            }
            if t >= self.cfg.duration && (self.drained() || t > limit) {
                if !self.drained() {
                    self.report.violations.push(format!("queues not drained by t={t}"));
                }
                self.snapshot(t);
                self.report.end_time = t;
                break;
            }
            self.handle(t, event)?;
            self.track_outages(t);
        }
        Ok(())
    }

    fn drained(&self) -> bool {
        self.sensors.iter().all(|s| s.depth() == 0) && self.gateway.queue.as_ref().is_none_or(|q| q.is_empty())
    }

    fn log(&mut self, t: u64, node: &str, event: &str) {
        self.report.events.push(format!("t={t} node={node} event={event}"));
    }

    fn handle(&mut self, t: u64, event: Event) -> Result<(), SimError> {
        let g = self.cfg.deployment.gateway.clone();
        match event {
            Event::Attach(i) => {
                self.sensors[i].attached = true;
                let id = self.sensors[i].cfg.sensor_id.clone();
                self.log(t, &id, "attached");
                self.events.schedule(t, Event::Sample(i))?;
            }
            Event::Sample(i) => {
                if t >= self.cfg.duration {
                    return Ok(());
                }
                let s = &mut self.sensors[i];
                if let Some(agent) = &s.agent {
                    for metric in &s.cfg.metrics {
                        let value = f64::from(s.values.gen_range(0u32..5000)) / 10.0;
                        let sample = DataSample::new(&s.cfg.sensor_id, metric, value, EPOCH_BASE + t)?;
                        agent.record(sample.clone())?;
                        self.generated.push(sample);
                    }
                }
                let next = t + s.cfg.sample_period;
                self.events.schedule(next, Event::Sample(i))?;
            }
            Event::Poll => {
                let delay = self.poll(t);
                self.events.schedule(t + delay, Event::Poll)?;
            }
            Event::Upload => {
                self.upload(t)?;
                self.events.schedule(t + g.pull_interval, Event::Upload)?;
            }
            Event::Discovery { periodic } => {
                self.discover(t);
                if periodic {
                    self.events.schedule(t + g.discovery_interval, Event::Discovery { periodic: true })?;
                }
            }
            Event::FaultStart(j) => self.fault(t, j, true)?,
            Event::FaultEnd(j) => self.fault(t, j, false)?,
        }
        Ok(())
    }

    /// Returns the delay until the next poll.
    fn poll(&mut self, t: u64) -> u64 {
        let g = &self.cfg.deployment.gateway;
        let (Some(scheduler), Some(queue)) = (self.gateway.scheduler.as_mut(), self.gateway.queue.as_mut()) else {
            return g.pull_interval;
        };
        let mut net =
            SimTransport { sensors: &mut self.sensors, gateway_net_up: self.gateway.net_up, loss: &mut self.link };
        let out = scheduler.poll_step(&mut net, queue);
        let sensor = out.sensor.clone().unwrap_or_default();
        match &out.kind {
            PollKind::Idle => {}
            PollKind::Pulled { received, remaining, .. } if *received > 0 => {
                let line = format!("pull sensor={sensor} received={received} remaining={remaining}");
                self.log(t, GATEWAY, &line);
            }
            PollKind::Pulled { .. } => {}
            PollKind::Timeout => self.log(t, GATEWAY, &format!("timeout sensor={sensor}")),
            PollKind::SinkFailure { received } => {
                self.log(t, GATEWAY, &format!("store_failed sensor={sensor} received={received}"))
            }
        }
        let waited = u64::from(out.timeouts) * g.timeout;
        let delay = if out.kind == PollKind::Idle {
            g.pull_interval
        } else if !out.advanced {
            g.backlog_interval
        } else if !out.cycle_complete {
            0
        } else if out.full {
            g.backlog_interval
        } else {
            g.pull_interval
        };
        (waited + delay).max(if out.cycle_complete { 1 } else { 0 })
    }

    fn upload(&mut self, t: u64) -> Result<(), SimError> {
        let Some(queue) = &self.gateway.queue else { return Ok(()) };
        if !self.gateway.internet_up || queue.is_empty() {
            return Ok(());
        }
        let batch: Vec<DataSample> = queue.peek(queue.len()).into_iter().map(|(_, s)| s).collect();
        match self.sink.write(&batch) {
            Ok(summary) => {
                queue.ack(batch.len())?;
                let line = format!("upload stored={} duplicates={}", summary.stored, summary.duplicates);
                self.log(t, GATEWAY, &line);
            }
            Err(e) => self.log(t, GATEWAY, &format!("upload_failed reason={e}")),
        }
        Ok(())
    }

    fn discover(&mut self, t: u64) {
        let Some(scheduler) = self.gateway.scheduler.as_mut() else { return };
        let mut net =
            SimTransport { sensors: &mut self.sensors, gateway_net_up: self.gateway.net_up, loss: &mut self.link };
        let found = scheduler.discover(&mut net);
        for id in found.added {
            self.log(t, GATEWAY, &format!("discovered sensor={id}"));
        }
    }

    fn fault(&mut self, t: u64, j: usize, starting: bool) -> Result<(), SimError> {
        let f = &self.cfg.faults[j];
        let phase = if starting { "start" } else { "end" };
        self.report.events.push(format!("t={t} node={} event={}_{phase}", f.target, f.kind));
        let is_gateway = f.target == GATEWAY;
        let sensor = self.sensors.iter().position(|s| s.cfg.sensor_id == f.target);
        match (f.kind, is_gateway, sensor) {
            (FaultKind::InternetDisconnect, true, _) => self.gateway.internet_up = !starting,
            (FaultKind::NetDisconnect, true, _) => self.gateway.net_up = !starting,
            (FaultKind::NetDisconnect, false, Some(i)) => self.sensors[i].net_up = !starting,
            (FaultKind::PowerLoss, true, _) => {
                if starting {
                    self.gateway.scheduler = None;
                    self.gateway.queue = None;
                    let torn = DataSample::new(GATEWAY, "in_flight", 0.0, EPOCH_BASE + t)?;
                    append_torn_record(&self.gateway.log_path, &torn, 9)?;
                } else {
                    let ids = self.sensors.iter().map(|s| s.cfg.sensor_id.clone());
                    self.gateway.scheduler =
                        Some(Scheduler::new(self.cfg.deployment.gateway.clone()).with_expected(ids));
                    self.gateway.queue = Some(DurableQueue::recover(&self.gateway.log_path)?);
                    self.events.schedule(t, Event::Discovery { periodic: false })?;
                }
            }
            (FaultKind::PowerLoss, false, Some(i)) => {
                let s = &mut self.sensors[i];
                if starting {
                    s.agent = None;
                    let metric = s.cfg.metrics[0].clone();
                    let torn = DataSample::new(&s.cfg.sensor_id, metric, 0.0, EPOCH_BASE + t)?;
                    append_torn_record(&s.log_path, &torn, 9)?;
                } else {
                    s.agent = Some(SensorAgent::new(s.descriptor(), DurableQueue::recover(&s.log_path)?));
                }
            }
            _ => return Err(SimError::UnknownNode(f.target.clone())),
        }
        Ok(())
    }

    /// Depth of the queue a fault window is expected to back up.
    fn outage_depth(&self, j: usize) -> usize {
        let f = &self.cfg.faults[j];
        match (f.kind, f.target == GATEWAY) {
            (FaultKind::InternetDisconnect, _) => self.gateway.queue.as_ref().map_or(0, |q| q.len()),
            (_, true) => self.sensors.iter().map(|s| s.depth()).sum(),
            (_, false) => self.sensors.iter().find(|s| s.cfg.sensor_id == f.target).map_or(0, |s| s.depth()),
        }
    }

    fn track_outages(&mut self, t: u64) {
        for j in 0..self.outages.len() {
            let (start, end) = (self.cfg.faults[j].start, self.cfg.faults[j].end);
            if t < start || self.outages[j].drained_at.is_some() {
                continue;
            }
            if t >= end && self.outage_depth(j) == 0 {
                self.outages[j].drained_at = Some(t);
            }
        }
    }

    fn snapshot(&mut self, t: u64) {
        let row = Snapshot {
            t,
            sensor_depths: self.sensors.iter().map(|s| s.depth()).collect(),
            gateway_depth: self.gateway.queue.as_ref().map_or(0, |q| q.len()),
            sink_count: self.sink.len(),
        };
        if self.report.timeseries.last().is_some_and(|r| r.t == t) {
            self.report.timeseries.pop();
        }
        self.report.timeseries.push(row);
        self.check_conservation(t);
    }

    /// Every generated sample is held by some sensor queue, the gateway
    /// queue, or the sink, and the sink holds nothing else.
    fn check_conservation(&mut self, t: u64) {
        let mut held: BTreeSet<(String, String, u64)> = self.sink.rows().into_iter().map(|r| (r.sensor_id, r.metric, r.measured_at)).collect();
        let sink_keys = held.clone();
        let queues = self.sensors.iter().filter_map(|s| s.agent.as_ref().map(|a| a.queue())).chain(self.gateway.queue.as_ref());
        for q in queues {
            held.extend(q.peek(q.len()).into_iter().map(|(_, s)| s.key()));
        }
        let generated: BTreeSet<_> = self.generated.iter().map(|s| s.key()).collect();
        let missing = generated.iter().filter(|k| !held.contains(*k)).count();
        let extra = sink_keys.iter().filter(|k| !generated.contains(*k)).count();
        // a powered-off sensor's queue is on disk but not visible here
        let offline = self.sensors.iter().any(|s| s.agent.is_none()) || self.gateway.queue.is_none();
        if (missing > 0 && !offline) || extra > 0 {
            self.report.violations.push(format!("t={t} conservation missing={missing} extra={extra}"));
        }
    }

    fn finish(mut self) -> MetricsReport {
        let mut remaining = Vec::new();
        for q in self.sensors.iter().filter_map(|s| s.agent.as_ref().map(|a| a.queue())).chain(self.gateway.queue.as_ref()) {
            remaining.extend(q.peek(q.len()).into_iter().map(|(_, s)| s));
        }
        remaining.sort_by_key(|a| a.key());
        remaining.dedup_by(|a, b| a.key() == b.key());
        self.generated.sort_by_key(|a| a.key());

        let sensor_ids = &self.report.sensor_ids;
        self.report.outages = self
            .cfg
            .faults
            .iter()
            .zip(&self.outages)
            .map(|(f, o)| {
                let until = o.drained_at.unwrap_or(u64::MAX);
                let peak_depth = self
                    .report
                    .timeseries
                    .iter()
                    .filter(|r| f.start <= r.t && r.t <= until)
                    .map(|r| match (f.kind, f.target == GATEWAY) {
                        (FaultKind::InternetDisconnect, _) => r.gateway_depth,
                        (_, true) => r.sensor_depths.iter().sum(),
                        (_, false) => sensor_ids.iter().position(|id| *id == f.target).map_or(0, |i| r.sensor_depths[i]),
                    })
                    .max()
                    .unwrap_or(0);
                OutageSummary { fault: f.clone(), peak_depth, drained_at: o.drained_at }
            })
            .collect();
        self.report.generated = self.generated;
        self.report.sink = self.sink.rows();
        self.report.remaining = remaining;
        self.report
    }
}
