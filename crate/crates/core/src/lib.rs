//! In-home sensor network toolkit.
//!
//! - [`covert_frame`]: header/payload packing into Ethernet address pairs.
//! - [`cred_envelope`] and [`fec`]: sealed credentials and the k-of-m erasure code.
//! - [`provisioner`]: gateway broadcast and sensor listener state machines.
//! - [`durable_queue`]: crash-safe FIFO with peek / acknowledge semantics.
//! - [`collect_proto`]: discovery and the acknowledged pull protocol.
//! - [`simnet`]: deterministic discrete-event simulator and scenario runner.
//! - [`config`] and [`cli`]: single-file deployment description and the command line.

pub mod covert_frame;
pub mod cred_envelope;
pub mod fec;
pub mod provisioner;
pub mod durable_queue;
pub mod collect_proto;
pub mod simnet;
pub mod config;
pub mod cli;
