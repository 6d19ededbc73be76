//! Two sensors with uneven backlogs: the gateway pulls at most the round
//! cap from one before moving on to the next.

use homesense::collect_proto::{DedupSink, LocalNetwork, PollKind, Scheduler, SchedulerConfig, SensorAgent, SensorDescriptor};
use homesense::durable_queue::{DataSample, DurableQueue};

fn agent(dir: &std::path::Path, id: &str, backlog: u64) -> SensorAgent {
    let q = DurableQueue::recover(dir.join(format!("{id}.log"))).unwrap();
    for i in 0..backlog {
        q.push(DataSample::new(id, "small_particles", i as f64, 1_600_000_000 + 60 * i).unwrap()).unwrap();
    }
    SensorAgent::new(SensorDescriptor::new(id, format!("local://{id}"), vec!["small_particles".into()]), q)
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = LocalNetwork::new(vec![agent(dir.path(), "A", 300), agent(dir.path(), "B", 5)]);
    let cfg = SchedulerConfig::default();
    println!("want={} round_cap={}", cfg.want_per_request, cfg.round_cap);
    let mut sched = Scheduler::new(cfg);
    let mut sink = DedupSink::new("home-1");
    println!("{:?}", sched.discover(&mut net));

    let mut step = 0;
    while sink.len() < 305 {
        let out = sched.poll_step(&mut net, &mut sink);
        if let PollKind::Pulled { received, remaining, .. } = out.kind {
            step += 1;
            println!(
                "{step:3} {} +{received:2} remaining={remaining:3} sink={}{}",
                out.sensor.unwrap(),
                sink.len(),
                if out.cycle_complete { "  (cycle complete)" } else { "" }
            );
        }
    }
}
