//! Queues samples, loses power mid-write, and recovers every complete record.

use homesense::durable_queue::{append_torn_record, DataSample, DurableQueue};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("dylos-1.log");

    let queue = DurableQueue::recover(&log).unwrap();
    for minute in 0..5 {
        let s = DataSample::new("dylos-1", "small_particles", 10.0 + minute as f64, 1_600_000_000 + 60 * minute).unwrap();
        queue.push(s).unwrap();
    }
    queue.ack(2).unwrap();
    println!("before crash: {} queued, head={} tail={} log={}B", queue.len(), queue.head(), queue.tail(), queue.log_bytes());
    drop(queue);

    let torn = DataSample::new("dylos-1", "small_particles", 99.0, 1_600_000_300).unwrap();
    append_torn_record(&log, &torn, 9).unwrap();
    println!("power lost 9 bytes into the next record");

    let queue = DurableQueue::recover(&log).unwrap();
    println!("after recovery: {} queued, head={} tail={}", queue.len(), queue.head(), queue.tail());
    for (seq, s) in queue.peek(10) {
        println!("  #{seq} {} {} {} @{}", s.sensor_id, s.metric, s.value, s.measured_at);
    }
}
