use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::scenario::ProvisionReport;
use super::{FaultKind, FaultWindow};
use crate::collect_proto::{rows_to_csv, SinkRow, SINK_CSV_HEADER};
use crate::durable_queue::DataSample;

pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const EVENTS_FILE: &str = "events.log";
pub const SINK_FILE: &str = "sink.csv";
pub const GENERATED_FILE: &str = "generated.csv";
pub const REMAINING_FILE: &str = "remaining.csv";
pub const OUTAGES_FILE: &str = "outages.csv";
pub const VIOLATIONS_FILE: &str = "violations.log";

/// Queue depths and sink size at one report tick, taken before that
/// tick's events run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub t: u64,
    pub sensor_depths: Vec<usize>,
    pub gateway_depth: usize,
    pub sink_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutageSummary {
    pub fault: FaultWindow,
    /// Largest snapshot depth of the backed-up queue from fault start until
    /// drained.
    pub peak_depth: usize,
    /// First time at or after the fault end when that queue was empty.
    pub drained_at: Option<u64>,
}

impl OutageSummary {
    pub fn drain_seconds(&self) -> Option<u64> {
        self.drained_at.map(|t| t - self.fault.end)
    }
}

#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub home_id: String,
    pub sensor_ids: Vec<String>,
    pub timeseries: Vec<Snapshot>,
    pub events: Vec<String>,
    /// Sorted by (sensor_id, metric, measured_at).
    pub generated: Vec<DataSample>,
    pub sink: Vec<SinkRow>,
    /// Samples still queued when the run ended.
    pub remaining: Vec<DataSample>,
    pub outages: Vec<OutageSummary>,
    pub violations: Vec<String>,
    pub provisioning: Option<ProvisionReport>,
    pub end_time: u64,
}

impl MetricsReport {
    pub fn outage(&self, kind: FaultKind) -> Option<&OutageSummary> {
        self.outages.iter().find(|o| o.fault.kind == kind)
    }

    pub fn max_sensor_depth(&self, sensor: usize) -> usize {
        self.timeseries.iter().map(|r| r.sensor_depths[sensor]).max().unwrap_or(0)
    }

    pub fn max_gateway_depth(&self) -> usize {
        self.timeseries.iter().map(|r| r.gateway_depth).max().unwrap_or(0)
    }

    /// Differences between what was generated and what reached the sink.
    pub fn exactly_once_problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let generated: BTreeMap<_, _> = self.generated.iter().map(|s| (s.key(), s.value)).collect();
        let mut stored = BTreeMap::new();
        for r in &self.sink {
            let key = (r.sensor_id.clone(), r.metric.clone(), r.measured_at);
            if stored.insert(key.clone(), r.value).is_some() {
                problems.push(format!("duplicate {key:?}"));
            }
            match generated.get(&key) {
                None => problems.push(format!("never generated {key:?}")),
                Some(v) if *v != r.value => problems.push(format!("value changed {key:?}")),
                _ => {}
            }
        }
        for key in generated.keys().filter(|k| !stored.contains_key(*k)) {
            problems.push(format!("missing {key:?}"));
        }
        problems
    }

    pub fn timeseries_csv(&self) -> String {
        let mut out = String::from("t");
        for id in &self.sensor_ids {
            out.push_str(&format!(",{id}_queue"));
        }
        out.push_str(",gateway_queue,sink_count\n");
        for r in &self.timeseries {
            out.push_str(&r.t.to_string());
            for d in &r.sensor_depths {
                out.push_str(&format!(",{d}"));
            }
            out.push_str(&format!(",{},{}\n", r.gateway_depth, r.sink_count));
        }
        out
    }

    pub fn events_log(&self) -> String {
        lines(&self.events)
    }

    pub fn sink_csv(&self) -> String {
        rows_to_csv(&self.sink)
    }

    fn samples_csv(&self, samples: &[DataSample]) -> String {
        let rows: Vec<SinkRow> = samples
            .iter()
            .map(|s| SinkRow {
                home_id: self.home_id.clone(),
                sensor_id: s.sensor_id.clone(),
                metric: s.metric.clone(),
                measured_at: s.measured_at,
                value: s.value,
            })
            .collect();
        rows_to_csv(&rows)
    }

    pub fn outages_csv(&self) -> String {
        let mut out = String::from("target,kind,start,end,peak_depth,drained_at\n");
        for o in &self.outages {
            let drained = o.drained_at.map(|t| t.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{drained}\n",
                o.fault.target, o.fault.kind, o.fault.start, o.fault.end, o.peak_depth
            ));
        }
        out
    }

    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TIMESERIES_FILE), self.timeseries_csv())?;
        fs::write(dir.join(EVENTS_FILE), self.events_log())?;
        fs::write(dir.join(SINK_FILE), self.sink_csv())?;
        fs::write(dir.join(GENERATED_FILE), self.samples_csv(&self.generated))?;
        fs::write(dir.join(REMAINING_FILE), self.samples_csv(&self.remaining))?;
        fs::write(dir.join(OUTAGES_FILE), self.outages_csv())?;
        fs::write(dir.join(VIOLATIONS_FILE), lines(&self.violations))?;
        Ok(())
    }
}

fn lines(items: &[String]) -> String {
    items.iter().map(|l| format!("{l}\n")).collect()
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("cannot read {file}: {source}")]
    Read { file: String, source: io::Error },
    #[error("{file}: {reason}")]
    Malformed { file: String, reason: String },
    #[error("{} invariant violation(s), first: {}", .0.len(), .0[0])]
    Violations(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifySummary {
    pub generated: usize,
    pub stored: usize,
    pub remaining: usize,
}

type Key = (String, String, u64);

fn read(dir: &Path, file: &str) -> Result<String, VerifyError> {
    fs::read_to_string(dir.join(file)).map_err(|source| VerifyError::Read { file: file.into(), source })
}

fn read_rows(dir: &Path, file: &str) -> Result<Vec<(Key, String, f64)>, VerifyError> {
    let malformed = |reason: String| VerifyError::Malformed { file: file.into(), reason };
    let text = read(dir, file)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != SINK_CSV_HEADER {
        return Err(malformed(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        if rec.len() != 5 {
            return Err(malformed(format!("row {} has {} fields", i + 1, rec.len())));
        }
        let t: u64 = rec[3].parse().map_err(|_| malformed(format!("row {}: measured_at {:?}", i + 1, &rec[3])))?;
        let v: f64 = rec[4].parse().map_err(|_| malformed(format!("row {}: value {:?}", i + 1, &rec[4])))?;
        rows.push(((rec[1].to_string(), rec[2].to_string(), t), rec[0].to_string(), v));
    }
    Ok(rows)
}

/// Re-checks a report directory without re-running anything: the sink
/// holds each generated sample at most once with its original value, every
/// generated sample is in the sink or still queued, the sink count never
/// decreases, and the run logged no violations.
pub fn verify_report_dir(dir: &Path) -> Result<VerifySummary, VerifyError> {
    let generated = read_rows(dir, GENERATED_FILE)?;
    let sink = read_rows(dir, SINK_FILE)?;
    let remaining = read_rows(dir, REMAINING_FILE)?;
    let timeseries = read(dir, TIMESERIES_FILE)?;
    let logged = read(dir, VIOLATIONS_FILE)?;

    let mut problems: Vec<String> = logged.lines().filter(|l| !l.is_empty()).map(|l| format!("logged: {l}")).collect();
    let gen_map: BTreeMap<&Key, f64> = generated.iter().map(|(k, _, v)| (k, *v)).collect();
    if gen_map.len() != generated.len() {
        problems.push("generated.csv repeats a key".into());
    }
    let homes: std::collections::BTreeSet<&str> =
        generated.iter().chain(&sink).chain(&remaining).map(|(_, h, _)| h.as_str()).collect();
    if homes.len() > 1 {
        problems.push(format!("mixed home ids {homes:?}"));
    }

    let mut stored: BTreeMap<&Key, f64> = BTreeMap::new();
    let mut prev: Option<&Key> = None;
    for (key, _, value) in &sink {
        if prev.is_some_and(|p| p >= key) {
            problems.push(format!("sink out of order or repeated at {key:?}"));
        }
        prev = Some(key);
        stored.insert(key, *value);
        match gen_map.get(key) {
            None => problems.push(format!("sink holds ungenerated {key:?}")),
            Some(v) if v != value => problems.push(format!("sink value differs for {key:?}")),
            _ => {}
        }
    }
    let queued: std::collections::BTreeSet<&Key> = remaining.iter().map(|(k, _, _)| k).collect();
    for key in gen_map.keys() {
        if !stored.contains_key(key) && !queued.contains(key) {
            problems.push(format!("lost {key:?}"));
        }
    }

    let mut last_count = 0usize;
    for (i, line) in timeseries.lines().skip(1).enumerate() {
        let count: usize = line
            .rsplit(',')
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| VerifyError::Malformed { file: TIMESERIES_FILE.into(), reason: format!("row {}", i + 1) })?;
        if count < last_count {
            problems.push(format!("sink_count decreased at timeseries row {}", i + 1));
        }
        last_count = count;
    }
    if last_count > sink.len() {
        problems.push(format!("timeseries ends at {last_count} but sink.csv has {} rows", sink.len()));
    }

    if problems.is_empty() {
        Ok(VerifySummary { generated: generated.len(), stored: sink.len(), remaining: remaining.len() })
    } else {
        Err(VerifyError::Violations(problems))
    }
}
