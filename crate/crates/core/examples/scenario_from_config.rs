//! Runs a scenario file, writes the report and re-verifies it.
//! Usage: scenario_from_config [path.yaml] [report-dir]

use std::path::PathBuf;

use homesense::config::load_config;
use homesense::simnet::{run_scenario, verify_report_dir};

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/provisioning.yaml"));
    let cfg = match load_config(&path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            std::process::exit(2);
        }
    };
    let work = tempfile::tempdir().unwrap();
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| work.path().join("report"));

    let report = run_scenario(&cfg, work.path()).unwrap();
    report.write_to(&out).unwrap();
    if let Some(p) = &report.provisioning {
        for o in &p.outcomes {
            println!("provisioned {} at {:?}", o.sensor_id, o.recovered);
        }
    }
    for o in &report.outages {
        println!("{} {} {}..{}: peak {} drain {:?}s", o.fault.target, o.fault.kind, o.fault.start, o.fault.end, o.peak_depth, o.drain_seconds());
    }
    println!("generated {} stored {} remaining {}", report.generated.len(), report.sink.len(), report.remaining.len());
    println!("verify: {:?}", verify_report_dir(&out));
}
