//! The gateway keeps collecting while its uplink is down; samples wait in
//! the gateway's own queue instead of on the sensor.

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
    cfg.faults.push(FaultWindow::new(GATEWAY, FaultKind::InternetDisconnect, 2400, 4260).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let report = run_scenario(&cfg, dir.path()).unwrap();
    for s in report.timeseries.iter().filter(|s| (2100..=4560).contains(&s.t) && s.t % 300 == 0) {
        println!("t={:5} sensor_queue={} gateway_queue={:3} sink={}", s.t, s.sensor_depths[0], s.gateway_depth, s.sink_count);
    }
    let o = &report.outages[0];
    println!("sensor peak {}, gateway peak {}, uploaded {:?}s after reconnect", report.max_sensor_depth(0), o.peak_depth, o.drain_seconds());
}
