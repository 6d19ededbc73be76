//! One YAML file describes a deployment and the scenario it runs in.
//!
//! ```yaml
//! home_id: home-17
//! gateway:
//!   pull_interval: 15
//! sensors:
//!   - sensor_id: dylos-1
//!     metrics: [small_particles, large_particles]
//!     sample_period_seconds: 60
//! scenario:
//!   duration: 7200
//!   faults:
//!     - {target: gateway, kind: net_disconnect, start: 1800, end: 4200}
//! ```
//!
//! Every section except `home_id` and `sensors` is optional.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::collect_proto::SchedulerConfig;
use crate::cred_envelope::{Credentials, KeyPair, LossTable, DEFAULT_LOSS_TABLE};
use crate::covert_frame::MAX_ID;
use crate::provisioner::{CHANNELS, DEFAULT_DWELL_SECONDS, DEFAULT_ESCALATION_PERIOD};
use crate::simnet::{self, FaultKind, FaultWindow, GATEWAY};

pub const DEFAULT_DURATION: u64 = 3600;
pub const DEFAULT_REPORT_INTERVAL: u64 = 60;
pub const DEFAULT_SAMPLE_PERIOD: u64 = 60;
pub const DEFAULT_GATEWAY_CHANNEL: u8 = 6;
pub const DEFAULT_MAX_ROUNDS: u64 = 200;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Syntax(String),
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
}

impl ConfigError {
    fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid { key: key.into(), reason: reason.into() }
    }

    /// The offending key, when the error is about one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SensorConfig {
    pub sensor_id: String,
    pub metrics: Vec<String>,
    pub sample_period: u64,
    pub attach_at: u64,
}

#[derive(Debug, Clone)]
pub struct ProvisioningConfig {
    pub id: u8,
    pub loss_table: LossTable,
    pub escalation_period: u32,
    pub keys: KeyPair,
    pub credentials: Credentials,
    pub channel: u8,
    pub dwell: u64,
    pub round_interval: u64,
    pub max_rounds: u64,
}

#[derive(Debug, Clone)]
pub struct DeploymentConfig {
    pub home_id: String,
    pub gateway: SchedulerConfig,
    pub provisioning: Option<ProvisioningConfig>,
    pub sensors: Vec<SensorConfig>,
    pub sink_output: Option<PathBuf>,
}

impl DeploymentConfig {
    pub fn new(home_id: impl Into<String>) -> Self {
        DeploymentConfig {
            home_id: home_id.into(),
            gateway: SchedulerConfig::default(),
            provisioning: None,
            sensors: Vec::new(),
            sink_output: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub deployment: DeploymentConfig,
    pub duration: u64,
    /// Air loss during provisioning.
    pub loss: f64,
    /// Request/response loss on the home network.
    pub link_loss: f64,
    pub faults: Vec<FaultWindow>,
    pub seed: u64,
    pub report_interval: u64,
}

impl ScenarioConfig {
    pub fn new(deployment: DeploymentConfig, duration: u64) -> Self {
        ScenarioConfig {
            deployment,
            duration,
            loss: 0.0,
            link_loss: 0.0,
            faults: Vec::new(),
            seed: 0,
            report_interval: DEFAULT_REPORT_INTERVAL,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    home_id: String,
    #[serde(default)]
    hostname: Option<String>,
    #[serde(default)]
    password: Option<String>,
    #[serde(default)]
    gateway: RawGateway,
    #[serde(default)]
    provisioning: Option<RawProvisioning>,
    #[serde(default)]
    sensors: Vec<RawSensor>,
    #[serde(default)]
    sink: RawSink,
    #[serde(default)]
    scenario: RawScenario,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGateway {
    pull_interval: Option<u64>,
    discovery_interval: Option<u64>,
    want_per_request: Option<u32>,
    round_cap: Option<u32>,
    backlog_interval: Option<u64>,
    timeout: Option<u64>,
    retries: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProvisioning {
    #[serde(default = "yes")]
    enabled: bool,
    id: Option<u8>,
    loss_table: Option<Vec<f64>>,
    escalation_period: Option<u32>,
    enc_key: Option<String>,
    mac_key: Option<String>,
    ssid: Option<String>,
    password: Option<String>,
    channel: Option<u8>,
    dwell: Option<u64>,
    round_interval: Option<u64>,
    max_rounds: Option<u64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSensor {
    sensor_id: String,
    #[serde(default)]
    metrics: Vec<String>,
    sample_period_seconds: Option<u64>,
    #[serde(default)]
    attach_at: u64,
    #[serde(default)]
    hostname: Option<String>,
    #[serde(default)]
    password: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSink {
    output: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    duration: Option<u64>,
    seed: Option<u64>,
    loss: Option<RawLoss>,
    link_loss: Option<f64>,
    report_interval: Option<u64>,
    #[serde(default)]
    faults: Vec<RawFault>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawLoss {
    Rate(f64),
    Preset(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFault {
    target: String,
    kind: String,
    start: u64,
    end: u64,
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ScenarioConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
    parse_config(&text)
}

fn positive<T: PartialOrd + Default + Copy>(key: &str, value: Option<T>, default: T) -> Result<T, ConfigError> {
    let v = value.unwrap_or(default);
    if v <= T::default() {
        return Err(ConfigError::invalid(key, "must be positive"));
    }
    Ok(v)
}

fn rate(key: &str, p: f64) -> Result<f64, ConfigError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ConfigError::invalid(key, format!("{p} is not a fraction in 0..=1")));
    }
    Ok(p)
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let raw: RawConfig = serde_yaml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    if raw.home_id.is_empty() {
        return Err(ConfigError::invalid("home_id", "must not be empty"));
    }
    if raw.hostname.is_some() || raw.password.is_some() {
        log::warn!("hostname/password are image settings and are ignored");
    }

    let g = raw.gateway;
    let gateway = SchedulerConfig {
        pull_interval: positive("gateway.pull_interval", g.pull_interval, 15)?,
        discovery_interval: positive("gateway.discovery_interval", g.discovery_interval, 300)?,
        want_per_request: positive("gateway.want_per_request", g.want_per_request, 10)?,
        round_cap: positive("gateway.round_cap", g.round_cap, 120)?,
        backlog_interval: positive("gateway.backlog_interval", g.backlog_interval, 60)?,
        timeout: positive("gateway.timeout", g.timeout, 2)?,
        retries: g.retries.unwrap_or(2),
    };

    let mut sensors = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, s) in raw.sensors.into_iter().enumerate() {
        let key = |field: &str| format!("sensors[{i}].{field}");
        if s.sensor_id.is_empty() || s.sensor_id.contains(['\x1f', ',', '\n']) {
            return Err(ConfigError::invalid(key("sensor_id"), "must be a plain non-empty name"));
        }
        if !seen.insert(s.sensor_id.clone()) {
            return Err(ConfigError::invalid(key("sensor_id"), format!("duplicate sensor {}", s.sensor_id)));
        }
        if s.sensor_id == GATEWAY {
            return Err(ConfigError::invalid(key("sensor_id"), "reserved name"));
        }
        if s.hostname.is_some() || s.password.is_some() {
            log::warn!("{}: hostname/password are image settings and are ignored", s.sensor_id);
        }
        let metrics = if s.metrics.is_empty() { vec!["small_particles".to_string()] } else { s.metrics };
        let mut unique = BTreeSet::new();
        for m in &metrics {
            if m.is_empty() || m.contains(['\x1f', ',', '\n']) || !unique.insert(m) {
                return Err(ConfigError::invalid(key("metrics"), format!("bad or repeated metric {m:?}")));
            }
        }
        sensors.push(SensorConfig {
            sensor_id: s.sensor_id,
            metrics,
            sample_period: positive(&key("sample_period_seconds"), s.sample_period_seconds, DEFAULT_SAMPLE_PERIOD)?,
            attach_at: s.attach_at,
        });
    }

    let provisioning = match raw.provisioning {
        Some(p) if p.enabled => Some(provisioning(p)?),
        _ => None,
    };

    let sc = raw.scenario;
    let duration = positive("scenario.duration", sc.duration, DEFAULT_DURATION)?;
    let loss = match sc.loss {
        None => 0.0,
        Some(RawLoss::Rate(p)) => rate("scenario.loss", p)?,
        Some(RawLoss::Preset(name)) => simnet::preset(&name)
            .ok_or_else(|| ConfigError::invalid("scenario.loss", format!("unknown preset {name:?}")))?,
    };
    let mut faults = Vec::new();
    for (i, f) in sc.faults.into_iter().enumerate() {
        let key = |field: &str| format!("scenario.faults[{i}].{field}");
        let kind: FaultKind = f.kind.parse().map_err(|_| ConfigError::invalid(key("kind"), format!("unknown kind {:?}", f.kind)))?;
        if f.target != GATEWAY && !seen.contains(&f.target) {
            return Err(ConfigError::invalid(key("target"), format!("unknown node {:?}", f.target)));
        }
        if kind == FaultKind::InternetDisconnect && f.target != GATEWAY {
            return Err(ConfigError::invalid(key("target"), "internet_disconnect applies to the gateway"));
        }
        if f.start >= f.end {
            return Err(ConfigError::invalid(key("end"), "must be after start"));
        }
        if f.end > duration {
            return Err(ConfigError::invalid(key("end"), "must be within the scenario duration"));
        }
        faults.push(FaultWindow { target: f.target, kind, start: f.start, end: f.end });
    }

    Ok(ScenarioConfig {
        deployment: DeploymentConfig {
            home_id: raw.home_id,
            gateway,
            provisioning,
            sensors,
            sink_output: raw.sink.output,
        },
        duration,
        loss,
        link_loss: rate("scenario.link_loss", sc.link_loss.unwrap_or(0.0))?,
        faults,
        seed: sc.seed.unwrap_or(0),
        report_interval: positive("scenario.report_interval", sc.report_interval, DEFAULT_REPORT_INTERVAL)?,
    })
}

fn provisioning(p: RawProvisioning) -> Result<ProvisioningConfig, ConfigError> {
    let id = p.id.unwrap_or(0);
    if id > MAX_ID {
        return Err(ConfigError::invalid("provisioning.id", format!("must be at most {MAX_ID}")));
    }
    let loss_table = LossTable::from_slice(&p.loss_table.unwrap_or(DEFAULT_LOSS_TABLE.to_vec()))
        .map_err(|e| ConfigError::invalid("provisioning.loss_table", e.to_string()))?;
    let enc = p.enc_key.ok_or_else(|| ConfigError::invalid("provisioning.enc_key", "required"))?;
    let mac = p.mac_key.ok_or_else(|| ConfigError::invalid("provisioning.mac_key", "required"))?;
    let keys = KeyPair::from_hex(&enc, &mac)
        .map_err(|e| ConfigError::invalid("provisioning.enc_key", format!("keys must be 32 and 64 hex digits: {e}")))?;
    let ssid = p.ssid.ok_or_else(|| ConfigError::invalid("provisioning.ssid", "required"))?;
    let credentials = Credentials::new(ssid, p.password.unwrap_or_default())
        .map_err(|e| ConfigError::invalid("provisioning.ssid", e.to_string()))?;
    let channel = p.channel.unwrap_or(DEFAULT_GATEWAY_CHANNEL);
    if !(1..=CHANNELS).contains(&channel) {
        return Err(ConfigError::invalid("provisioning.channel", format!("must be 1..={CHANNELS}")));
    }
    Ok(ProvisioningConfig {
        id,
        loss_table,
        escalation_period: positive("provisioning.escalation_period", p.escalation_period, DEFAULT_ESCALATION_PERIOD)?,
        keys,
        credentials,
        channel,
        dwell: positive("provisioning.dwell", p.dwell, DEFAULT_DWELL_SECONDS)?,
        round_interval: positive("provisioning.round_interval", p.round_interval, 1)?,
        max_rounds: positive("provisioning.max_rounds", p.max_rounds, DEFAULT_MAX_ROUNDS)?,
    })
}
