//! Live mode: the coordinator and executor-host workers as real processes
//! talking length-prefixed JSON over local TCP.
//!
//! Workers emulate training time by sleeping as if they ran alone at their
//! budget, so contention between co-running clients is not physically
//! reproduced here; the simulator remains authoritative for sharing timing.

pub mod coordinator;
pub mod wire;
pub mod worker;

pub use coordinator::{
    coordinator_bind, coordinator_serve, verify_lifecycle, LiveConfig, LiveError, LiveOutcome, WireEvent,
};
pub use wire::{read_frame, write_frame, WireError, WireMessage};
pub use worker::{worker_run, WorkerError, WorkerOptions, WorkerSummary};
