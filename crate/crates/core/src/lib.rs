//! Partially reliable video delivery over a QUIC-style transport, with a
//! deterministic network emulator and player-side quality metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fec;
pub mod harness;
pub mod media;
pub mod netem;
pub mod qoe;
pub mod ranges;
pub mod session;
pub mod time;
pub mod transport;
pub mod wire;

pub use harness::{run_matrix, run_once, ExperimentConfig, RunReport};
pub use session::ProtocolMode;
pub use time::SimTime;
