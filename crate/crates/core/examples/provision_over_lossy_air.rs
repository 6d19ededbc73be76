//! Broadcasts credentials to three scanning sensors over a lossy channel.
//! Usage: provision_over_lossy_air [loss] [seed]

use homesense::config::ProvisioningConfig;
use homesense::cred_envelope::{Credentials, KeyPair, LossTable};
use homesense::simnet::{run_provisioning, LossModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut args = std::env::args().skip(1);
    let loss: f64 = args.next().map_or(0.7, |a| a.parse().expect("loss in [0, 1]"));
    let seed: u64 = args.next().map_or(1, |a| a.parse().expect("integer seed"));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ProvisioningConfig {
        id: 9,
        loss_table: LossTable::default(),
        escalation_period: 5,
        keys: KeyPair::generate(&mut rng),
        credentials: Credentials::new("Home", "secret123").unwrap(),
        channel: 6,
        dwell: 5,
        round_interval: 1,
        max_rounds: 200,
    };
    let sensors: Vec<String> = ["dylos-1", "dylos-2", "thermo-1"].map(String::from).to_vec();
    let report = run_provisioning(&cfg, &sensors, &LossModel::new(loss, seed).expect("loss in [0, 1]")).unwrap();

    println!("loss={loss} seed={seed}");
    for line in &report.events {
        println!("  {line}");
    }
    for o in &report.outcomes {
        match o.recovered {
            Some((t, round)) => println!("{}: joined at t={t}s in round {round}", o.sensor_id),
            None => println!("{}: never recovered", o.sensor_id),
        }
    }
    println!("rounds sent {}, final loss index {}", report.rounds_sent, report.final_loss_index);
}
