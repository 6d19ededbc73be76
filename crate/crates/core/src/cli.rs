//! `homesense run | provision | verify`.
//!
//! Exit codes: 0 success, 1 invariant violation, 2 configuration or usage
//! error. `EPIFI_SEED` overrides the seed in the config file; `--seed`
//! overrides both.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{load_config, ConfigError, ScenarioConfig};
use crate::simnet::{self, run_provisioning, run_scenario, LossModel, VerifyError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const SEED_ENV: &str = "EPIFI_SEED";
pub const DEFAULT_OUT: &str = "report";

#[derive(Debug, Parser)]
#[command(name = "homesense", version, about = "Simulate, provision and verify an in-home sensor deployment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the scenario and write report files.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Report directory; defaults to sink.output, then ./report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run only the provisioning phase and print each sensor's recovery round.
    Provision { config: PathBuf },
    /// Re-check a report directory.
    Verify { dir: PathBuf },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I, env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_CONFIG;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    match execute(cli.command, env_seed, out) {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            let _ = writeln!(err, "config error: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Violation(msg)) => {
            let _ = writeln!(err, "{msg}");
            EXIT_VIOLATION
        }
    }
}

enum Failure {
    Config(String),
    Violation(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn load(path: &PathBuf, env_seed: Option<&str>, flag: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = load_config(path)?;
    if let Some(raw) = env_seed {
        cfg.seed = raw.trim().parse().map_err(|_| Failure::Config(format!("{SEED_ENV}: {raw:?} is not a seed")))?;
    }
    if let Some(seed) = flag {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(command: Command, env_seed: Option<&str>, out: &mut dyn Write) -> Result<i32, Failure> {
    let io = |e: std::io::Error| Failure::Violation(format!("io: {e}"));
    match command {
        Command::Run { config, seed, out: dir } => {
            let cfg = load(&config, env_seed, seed)?;
            let dir = dir.or_else(|| cfg.deployment.sink_output.clone()).unwrap_or_else(|| DEFAULT_OUT.into());
            let work = tempfile::tempdir().map_err(io)?;
            let report = run_scenario(&cfg, work.path()).map_err(|e| match e {
                simnet::SimError::UnknownNode(_) | simnet::SimError::Provision(_) => Failure::Config(e.to_string()),
                other => Failure::Violation(other.to_string()),
            })?;
            report.write_to(&dir).map_err(io)?;
            let problems = report.exactly_once_problems();
            let _ = writeln!(
                out,
                "seed={} generated={} stored={} remaining={} end={} violations={} report={}",
                cfg.seed,
                report.generated.len(),
                report.sink.len(),
                report.remaining.len(),
                report.end_time,
                report.violations.len() + problems.len(),
                dir.display()
            );
            for o in &report.outages {
                let drain = o.drain_seconds().map(|s| s.to_string()).unwrap_or_else(|| "never".into());
                let _ = writeln!(
                    out,
                    "outage target={} kind={} start={} end={} peak={} drain_seconds={drain}",
                    o.fault.target, o.fault.kind, o.fault.start, o.fault.end, o.peak_depth
                );
            }
            match report.violations.iter().chain(&problems).next() {
                Some(first) => Err(Failure::Violation(format!("invariant violation: {first}"))),
                None => Ok(EXIT_OK),
            }
        }
        Command::Provision { config } => {
            let cfg = load(&config, env_seed, None)?;
            let p = cfg
                .deployment
                .provisioning
                .as_ref()
                .ok_or_else(|| Failure::Config("provisioning: section required".into()))?;
            let ids: Vec<String> = cfg.deployment.sensors.iter().map(|s| s.sensor_id.clone()).collect();
            let air = LossModel { p: cfg.loss, seed: cfg.seed };
            let report = run_provisioning(p, &ids, &air).map_err(|e| Failure::Config(e.to_string()))?;
            for o in &report.outcomes {
                match o.recovered {
                    Some((t, round)) => writeln!(out, "sensor={} recovered_round={round} t={t}", o.sensor_id),
                    None => writeln!(out, "sensor={} recovered_round=none", o.sensor_id),
                }
                .map_err(io)?;
            }
            writeln!(out, "rounds_sent={} final_loss_index={}", report.rounds_sent, report.final_loss_index).map_err(io)?;
            if report.all_recovered() {
                Ok(EXIT_OK)
            } else {
                Err(Failure::Violation("not every sensor recovered credentials".into()))
            }
        }
        Command::Verify { dir } => match simnet::verify_report_dir(&dir) {
            Ok(s) => {
                writeln!(out, "ok generated={} stored={} remaining={}", s.generated, s.stored, s.remaining).map_err(io)?;
                Ok(EXIT_OK)
            }
            Err(VerifyError::Read { file, source }) => {
                Err(Failure::Config(format!("{}: {source}", dir.join(file).display())))
            }
            Err(e @ VerifyError::Malformed { .. }) => Err(Failure::Violation(e.to_string())),
            Err(VerifyError::Violations(list)) => {
                for v in &list {
                    writeln!(out, "violation: {v}").map_err(io)?;
                }
                Err(Failure::Violation(format!("{} invariant violation(s)", list.len())))
            }
        },
    }
}
