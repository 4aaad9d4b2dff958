//! Canned fleets and configuration ladders for the standard comparisons.

use serde::{Deserialize, Serialize};

use crate::engine::{run_experiment, simulate_round, EngineError};
use crate::metrics::RoundReport;
use crate::profiles::{
    generate_fleet, BudgetDistribution, ClientId, ClientProfile, DemandProfile, DistributionSpec,
    FleetConfig, SampleDistribution, SchedulerKind,
};
use crate::trace::Trace;

/// Two-phase demand: a compute-heavy stretch followed by a light one
/// (data loading, evaluation) that leaves budget idle.
pub const SHARING_DEMAND: &str = "0.7:90;0.3:20";

/// Slot count of the fixed-parallelism baseline.
pub const FIXED_EXECUTORS: usize = 4;

/// Threshold used when sharing is switched on.
pub const SHARING_THETA: f64 = 150.0;

/// Budget levels and weights of the stand-in heterogeneous fleet.
pub const STANDIN_LEVELS: [u32; 9] = [10, 15, 20, 25, 30, 40, 50, 65, 80];
pub const STANDIN_WEIGHTS: [f64; 9] = [0.15, 0.15, 0.12, 0.12, 0.12, 0.10, 0.10, 0.07, 0.07];

pub fn standin_budgets() -> BudgetDistribution {
    BudgetDistribution::Categorical {
        levels: STANDIN_LEVELS.to_vec(),
        weights: STANDIN_WEIGHTS.to_vec(),
    }
}

/// Heterogeneous budgets, sample counts between 16k and 48k, two-phase demand.
pub fn standin_distribution() -> DistributionSpec {
    DistributionSpec {
        samples: SampleDistribution::Range { min: 16_000, max: 48_000 },
        demand_profile: SHARING_DEMAND.parse().expect("valid demand profile"),
        ..DistributionSpec::new(standin_budgets())
    }
}

pub fn standin_fleet(n: usize, seed: u64) -> Vec<ClientProfile> {
    generate_fleet(&standin_distribution(), n, seed).expect("stand-in distribution is valid")
}

pub fn sharing_demand() -> DemandProfile {
    SHARING_DEMAND.parse().expect("valid demand profile")
}

/// Steps of the ablation ladder; each adds one mechanism to the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationStep {
    /// Greedy FIFO on a fixed number of slots, one relaunch per freed slot.
    B1,
    /// Plus dynamic parallelism.
    B2,
    /// Plus the resource-aware scheduler.
    B3,
    /// Plus soft-margin sharing.
    B4,
}

impl AblationStep {
    pub const ALL: [AblationStep; 4] = [AblationStep::B1, AblationStep::B2, AblationStep::B3, AblationStep::B4];

    pub fn label(self) -> &'static str {
        match self {
            AblationStep::B1 => "B1",
            AblationStep::B2 => "B2",
            AblationStep::B3 => "B3",
            AblationStep::B4 => "B4",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            AblationStep::B1 => "fixed-k greedy + process switching",
            AblationStep::B2 => "+ dynamic process manager",
            AblationStep::B3 => "+ resource-aware scheduler",
            AblationStep::B4 => "+ resource sharing",
        }
    }

    /// Derives this step's configuration from `base`, keeping seed, rounds,
    /// cost model, latencies and aggregation.
    pub fn apply(self, base: &FleetConfig) -> FleetConfig {
        let hard_theta = base.theta.min(100.0);
        let soft_theta = if base.theta > 100.0 { base.theta } else { SHARING_THETA };
        let mut c = base.clone();
        match self {
            AblationStep::B1 => {
                c.scheduler_kind = SchedulerKind::Greedy;
                c.dynamic_parallelism = false;
                c.max_executors = FIXED_EXECUTORS.min(base.max_executors);
                c.theta = hard_theta;
            }
            AblationStep::B2 => {
                c.scheduler_kind = SchedulerKind::Greedy;
                c.dynamic_parallelism = true;
                c.theta = hard_theta;
            }
            AblationStep::B3 => {
                c.scheduler_kind = SchedulerKind::ResourceAware;
                c.dynamic_parallelism = true;
                c.theta = hard_theta;
            }
            AblationStep::B4 => {
                c.scheduler_kind = SchedulerKind::ResourceAware;
                c.dynamic_parallelism = true;
                c.theta = soft_theta;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub step: AblationStep,
    pub participants: usize,
    pub round: u32,
    pub makespan: f64,
}

/// Runs every ladder step at every participant count on the same fleet and
/// seed, one row per round.
pub fn run_ablation(
    base: &FleetConfig,
    fleet: &[ClientProfile],
    participant_counts: &[usize],
) -> Result<Vec<AblationRow>, EngineError> {
    let mut rows = Vec::new();
    for &n in participant_counts {
        for step in AblationStep::ALL {
            let cfg = FleetConfig {
                participants_per_round: n,
                ..step.apply(base)
            };
            let (report, _) = run_experiment(&cfg, fleet, None)?;
            rows.extend(report.rounds.iter().map(|r| AblationRow {
                step,
                participants: n,
                round: r.round,
                makespan: r.makespan,
            }));
        }
    }
    Ok(rows)
}

/// Mean round time of one (step, participants) cell.
pub fn mean_makespan(rows: &[AblationRow], step: AblationStep, participants: usize) -> f64 {
    let cell: Vec<f64> = rows
        .iter()
        .filter(|r| r.step == step && r.participants == participants)
        .map(|r| r.makespan)
        .collect();
    if cell.is_empty() {
        return f64::NAN;
    }
    cell.iter().sum::<f64>() / cell.len() as f64
}

/// Simulates one round of the same participants under each scheduler.
pub fn compare_schedulers(
    base: &FleetConfig,
    fleet: &[ClientProfile],
    participants: &[ClientId],
    kinds: &[SchedulerKind],
) -> Result<Vec<(SchedulerKind, RoundReport, Trace)>, EngineError> {
    kinds
        .iter()
        .map(|&kind| {
            let cfg = FleetConfig {
                scheduler_kind: kind,
                ..base.clone()
            };
            let (report, trace) = simulate_round(0, fleet, participants, &cfg)?;
            Ok((kind, report, trace))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_differs_one_knob_at_a_time() {
        let base = FleetConfig::default();
        let [b1, b2, b3, b4] = AblationStep::ALL.map(|s| s.apply(&base));
        assert_eq!(b1.max_executors, FIXED_EXECUTORS);
        assert!(!b1.dynamic_parallelism);
        assert_eq!(FleetConfig { dynamic_parallelism: false, max_executors: FIXED_EXECUTORS, ..b2.clone() }, b1);
        assert_eq!(FleetConfig { scheduler_kind: SchedulerKind::Greedy, ..b3.clone() }, b2);
        assert_eq!(FleetConfig { theta: 100.0, ..b4.clone() }, b3);
        assert_eq!(b4.theta, SHARING_THETA);
    }

    #[test]
    fn standin_fleet_uses_listed_levels() {
        let fleet = standin_fleet(500, 7);
        assert_eq!(fleet.len(), 500);
        assert!(fleet.iter().all(|p| STANDIN_LEVELS.contains(&p.resource_budget)));
        assert!(fleet.iter().all(|p| (16_000..=48_000).contains(&p.workload.num_samples)));
        assert_eq!(fleet, standin_fleet(500, 7));
    }

    #[test]
    fn ablation_shape() {
        let fleet = standin_fleet(50, 1);
        let base = FleetConfig { rounds: 2, ..FleetConfig::default() };
        let rows = run_ablation(&base, &fleet, &[3, 10]).unwrap();
        assert_eq!(rows.len(), 4 * 2 * 2);
        assert!(mean_makespan(&rows, AblationStep::B4, 10) <= mean_makespan(&rows, AblationStep::B1, 10));
    }
}
