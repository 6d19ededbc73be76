#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use homesense::collect_proto::{
    DedupSink, PollKind, PullError, PullRequest, PullResponse, Scheduler, SchedulerConfig, SensorAgent,
    SensorDescriptor, Transport,
};
use homesense::durable_queue::{append_torn_record, DataSample, DurableQueue};

pub const GOLDEN_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden");

/// The three samples in `queue_three.log`.
pub fn golden_samples() -> Vec<DataSample> {
    vec![
        DataSample::new("dylos-1", "small_particles", 12.5, 1_600_000_000).unwrap(),
        DataSample::new("dylos-1", "large_particles", 3.0, 1_600_000_000).unwrap(),
        DataSample::new("thermo-1", "temperature", -4.25, 1_600_000_060).unwrap(),
    ]
}

// GF(2^8) arithmetic from first principles, for checking the table-driven code.

pub fn slow_mul(mut a: u8, mut b: u8) -> u8 {
    let mut p = 0u8;
    while b != 0 {
        if b & 1 != 0 {
            p ^= a;
        }
        let carry = a & 0x80 != 0;
        a <<= 1;
        if carry {
            a ^= 0x1d;
        }
        b >>= 1;
    }
    p
}

pub fn slow_pow(a: u8, n: usize) -> u8 {
    (0..n).fold(1, |acc, _| slow_mul(acc, a))
}

pub fn slow_inv(a: u8) -> u8 {
    (1..=255u8).find(|&b| slow_mul(a, b) == 1).expect("nonzero")
}

/// Evaluation point of block `i`: 0 for the first, then 2^(i-1).
pub fn point(i: usize) -> u8 {
    if i == 0 {
        0
    } else {
        slow_pow(2, i - 1)
    }
}

/// Value at `x` of the polynomial of degree < n through `(xs[j], ys[j])`.
pub fn lagrange(xs: &[u8], ys: &[u8], x: u8) -> u8 {
    let mut acc = 0u8;
    for j in 0..xs.len() {
        let mut num = 1u8;
        let mut den = 1u8;
        for m in 0..xs.len() {
            if m != j {
                num = slow_mul(num, x ^ xs[m]);
                den = slow_mul(den, xs[j] ^ xs[m]);
            }
        }
        acc ^= slow_mul(ys[j], slow_mul(num, slow_inv(den)));
    }
    acc
}

/// Systematic codeword by interpolation: data block j is the value at
/// point(j), block r the value at point(r).
pub fn oracle_encode(data: &[Vec<u8>], m: usize) -> Vec<Vec<u8>> {
    let k = data.len();
    let xs: Vec<u8> = (0..k).map(point).collect();
    (0..m)
        .map(|r| {
            (0..data[0].len())
                .map(|col| {
                    let ys: Vec<u8> = data.iter().map(|b| b[col]).collect();
                    lagrange(&xs, &ys, point(r))
                })
                .collect()
        })
        .collect()
}

/// Smallest even block count that carries `len` bytes plus the 2-byte
/// length prefix when `tenths`/10 of the blocks may be lost.
pub fn fec_params_oracle(len: usize, tenths: usize) -> Option<(usize, usize)> {
    (2..=126).step_by(2).find_map(|m| {
        let k = ((10 - tenths) * m).div_ceil(10);
        (7 * k >= len + 2).then_some((k, m))
    })
}

pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn sink_map(sink: &DedupSink) -> BTreeMap<(String, String, u64), f64> {
    sink.rows().into_iter().map(|r| ((r.sensor_id, r.metric, r.measured_at), r.value)).collect()
}

fn expected_map(samples: &[DataSample]) -> BTreeMap<(String, String, u64), f64> {
    samples.iter().map(|s| (s.key(), s.value)).collect()
}

fn descriptor() -> SensorDescriptor {
    SensorDescriptor::new("dylos-1", "local", vec!["small_particles".into()])
}

/// Drains `queue` through the pull protocol into a fresh sink.
pub fn drain_to_sink(queue: DurableQueue) -> DedupSink {
    let agent = SensorAgent::new(descriptor(), queue);
    let mut net = homesense::collect_proto::LocalNetwork::new(vec![agent]);
    let mut sched = Scheduler::new(SchedulerConfig::default());
    let mut sink = DedupSink::new("home");
    sched.discover(&mut net);
    while !net.agents[0].queue().is_empty() {
        sched.poll_step(&mut net, &mut sink);
    }
    sink
}

/// Recovers every byte-prefix of the golden three-record log and drains
/// it; each must yield exactly the records that were completely written.
pub fn truncation_sweep(scratch: &Path) -> Result<usize, String> {
    let bytes = std::fs::read(Path::new(GOLDEN_DIR).join("queue_three.log")).unwrap();
    let samples = golden_samples();
    let mut ends = Vec::new();
    let mut end = 8;
    for s in &samples {
        end += 8 + s.encode().len();
        ends.push(end);
    }
    assert_eq!(end, bytes.len(), "golden length");
    for cut in 0..=bytes.len() {
        let dir = scratch.join(format!("cut{cut}"));
        std::fs::create_dir_all(&dir).unwrap();
        let log = dir.join("q.log");
        std::fs::write(&log, &bytes[..cut]).unwrap();
        let q = DurableQueue::recover(&log).map_err(|e| format!("cut {cut}: {e}"))?;
        let whole = ends.iter().filter(|&&e| e <= cut).count();
        let got: Vec<DataSample> = q.peek(10).into_iter().map(|(_, s)| s).collect();
        if got != samples[..whole] {
            return Err(format!("cut {cut}: recovered {got:?}"));
        }
        let sink = drain_to_sink(q);
        if sink_map(&sink) != expected_map(&samples[..whole]) {
            return Err(format!("cut {cut}: sink differs"));
        }
    }
    Ok(bytes.len() + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// The request, carrying an ack, never reaches the sensor.
    BeforeAckSent,
    /// The sensor applies the ack and serves, but the response is lost.
    AfterAckApplied,
    /// The gateway stores the batch, then crashes before its next request.
    AfterSinkWrite,
    /// The sensor loses power mid-append and restarts before answering.
    SensorRestart,
}

pub const CRASH_POINTS: [CrashPoint; 4] =
    [CrashPoint::BeforeAckSent, CrashPoint::AfterAckApplied, CrashPoint::AfterSinkWrite, CrashPoint::SensorRestart];

struct FaultyNet {
    agent: Option<SensorAgent>,
    log_path: std::path::PathBuf,
    exchange: usize,
    crash_at: usize,
    point: CrashPoint,
}

impl Transport for FaultyNet {
    fn probe(&mut self) -> Vec<SensorDescriptor> {
        vec![descriptor()]
    }

    fn pull(&mut self, _: &SensorDescriptor, req: PullRequest) -> Result<PullResponse, PullError> {
        let n = self.exchange;
        self.exchange += 1;
        if n == self.crash_at {
            match self.point {
                CrashPoint::BeforeAckSent => return Err(PullError::Timeout),
                CrashPoint::AfterAckApplied => {
                    self.agent.as_mut().unwrap().handle_pull(req)?;
                    return Err(PullError::Timeout);
                }
                CrashPoint::SensorRestart => {
                    let queue = self.agent.take().unwrap().into_queue();
                    drop(queue);
                    let torn = DataSample::new("dylos-1", "small_particles", 0.0, 1).unwrap();
                    append_torn_record(&self.log_path, &torn, 11).unwrap();
                    let queue = DurableQueue::recover(&self.log_path).unwrap();
                    self.agent = Some(SensorAgent::new(descriptor(), queue));
                }
                CrashPoint::AfterSinkWrite => {}
            }
        }
        self.agent.as_mut().unwrap().handle_pull(req)
    }
}

/// Pulls `n` samples through one injected crash at exchange `crash_at`.
/// Checks ack safety after every step and exactly-once at the end.
pub fn handshake_crash(scratch: &Path, n: u64, point: CrashPoint, crash_at: usize) -> Result<(), String> {
    let log_path = scratch.join("sensor.log");
    let journal = scratch.join("sink.csv");
    let queue = DurableQueue::recover(&log_path).unwrap();
    let samples: Vec<DataSample> =
        (0..n).map(|i| DataSample::new("dylos-1", "small_particles", i as f64 * 0.5, 1_600_000_000 + 60 * i).unwrap()).collect();
    for s in &samples {
        queue.push(s.clone()).unwrap();
    }
    let mut net = FaultyNet { agent: Some(SensorAgent::new(descriptor(), queue)), log_path, exchange: 0, crash_at, point };
    let mut sink = DedupSink::open("home", &journal).unwrap();
    let mut sched = Scheduler::new(SchedulerConfig::default());
    sched.discover(&mut net);

    for _ in 0..200 {
        let before = net.exchange;
        let out = sched.poll_step(&mut net, &mut sink);
        let crashed_here = (before..net.exchange).contains(&crash_at);
        if point == CrashPoint::AfterSinkWrite && crashed_here && matches!(out.kind, PollKind::Pulled { .. }) {
            drop(sink);
            sink = DedupSink::open("home", &journal).unwrap();
            sched = Scheduler::new(SchedulerConfig::default());
            sched.discover(&mut net);
        }
        let left = net.agent.as_ref().unwrap().queue().len();
        let deleted = samples.len() - left;
        if let Some(s) = samples[..deleted].iter().find(|s| !sink.contains(s)) {
            return Err(format!("{point:?}@{crash_at}: deleted before stored: {s:?}"));
        }
        if left == 0 {
            break;
        }
    }
    let queued = net.agent.as_ref().unwrap().queue().len();
    if queued != 0 {
        return Err(format!("{point:?}@{crash_at}: {queued} samples never drained"));
    }
    if sink_map(&sink) != expected_map(&samples) {
        return Err(format!("{point:?}@{crash_at}: sink differs from generated"));
    }
    Ok(())
}

/// Every crash point at every exchange of a 35-sample drain.
pub fn handshake_sweep(scratch: &Path) -> Result<usize, String> {
    let mut cases = 0;
    for point in CRASH_POINTS {
        for crash_at in 0..8 {
            let dir = scratch.join(format!("{point:?}-{crash_at}"));
            std::fs::create_dir_all(&dir).unwrap();
            handshake_crash(&dir, 35, point, crash_at)?;
            cases += 1;
        }
    }
    Ok(cases)
}
