//! Simulator for federated learning under per-client compute budgets.
//!
//! Clients receive a hard cap on their share of one device. A scheduler
//! decides which participants run concurrently, a process manager launches
//! and retires one executor occupancy per client, and a discrete-event
//! engine advances training under capped max-min sharing. A small
//! federated-averaging loop couples those timings to model accuracy.

pub mod comms;
pub mod cost_model;
pub mod engine;
pub mod executor_manager;
pub mod fl;
pub mod metrics;
pub mod profiles;
pub mod recipes;
pub mod rng;
pub mod scheduler;
pub mod trace;

pub use cost_model::{maxmin_allocate, work_units, Allocation, CostCoefficients};
pub use engine::{run_experiment, run_round, EngineError, ExperimentReport, FlSettings, FlSetup};
pub use metrics::RoundReport;
pub use profiles::{
    generate_fleet, load_fleet, save_fleet, Aggregation, ClientId, ClientProfile, ConfigError,
    DistributionSpec, FleetConfig, SchedulerKind, WorkloadSpec,
};
pub use scheduler::{schedule_greedy, schedule_resource_aware, ExecutorId, Participant, ScheduleEntry, SchedulerState};
pub use trace::{Trace, TraceRecord};
