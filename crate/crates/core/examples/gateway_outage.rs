//! One sensor keeps sampling while the gateway is unreachable for 40
//! minutes; its queue grows and drains once the gateway returns.

use homesense::config::{DeploymentConfig, ScenarioConfig, SensorConfig};
use homesense::simnet::{run_scenario, FaultKind, FaultWindow, GATEWAY};

fn main() {
    let mut dep = DeploymentConfig::new("home-17");
    dep.sensors.push(SensorConfig {
        sensor_id: "dylos-1".into(),
        metrics: vec!["small_particles".into()],
        sample_period: 60,
        attach_at: 0,
    });
    let mut cfg = ScenarioConfig::new(dep, 7200);
    cfg.faults.push(FaultWindow::new(GATEWAY, FaultKind::NetDisconnect, 2400, 4800).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let report = run_scenario(&cfg, dir.path()).unwrap();
    for s in report.timeseries.iter().filter(|s| (2100..=5400).contains(&s.t) && s.t % 300 == 0) {
        println!("t={:5} sensor_queue={:3} sink={}", s.t, s.sensor_depths[0], s.sink_count);
    }
    let o = &report.outages[0];
    println!("peak {} samples, drained {:?}s after reconnect", o.peak_depth, o.drain_seconds());
    println!("generated {} stored {} problems {}", report.generated.len(), report.sink.len(), report.exactly_once_problems().len());
}
