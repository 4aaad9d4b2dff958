//! Clients, workloads and fleet configuration.
//!
//! A fleet is an ordered list of [`ClientProfile`]s. Fleets are either
//! generated from a [`DistributionSpec`] (pure in `(spec, n, seed)`) or
//! loaded from the fleet CSV format:
//!
//! ```text
//! client_id,budget,num_samples,batch_size,layers,seq_len,extra_factor,demand_profile
//! 0,10,32000,64,2,128,1,
//! 1,80,32000,64,2,128,1,0.7:90;0.3:20
//! ```

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::CostCoefficients;
use crate::rng::{stream_rng, Stream};

/// Tolerance used when checking that fractions or weights sum to one.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

impl ConfigError {
    pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// The configuration key the error refers to.
    pub fn key(&self) -> &str {
        match self {
            ConfigError::Invalid { key, .. } => key,
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("fleet file: {0}")]
    Io(#[from] std::io::Error),
    #[error("fleet file row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("fleet file: {0}")]
    Csv(#[from] csv::Error),
}

/// Shape of one client's local training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub num_samples: u64,
    pub batch_size: u64,
    pub model_layers: u32,
    /// Tokens per sample.
    pub seq_len: u32,
    /// Multiplier for extra per-client computation such as a local
    /// personalization model. Always `>= 1`.
    pub extra_model_factor: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            num_samples: 32_000,
            batch_size: 64,
            model_layers: 2,
            seq_len: 128,
            extra_model_factor: 1.0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size < 1 {
            return Err(ConfigError::invalid("workload.batch_size", "must be >= 1"));
        }
        if self.model_layers < 1 {
            return Err(ConfigError::invalid("workload.layers", "must be >= 1"));
        }
        if self.seq_len < 1 {
            return Err(ConfigError::invalid("workload.seq_len", "must be >= 1"));
        }
        if !(self.extra_model_factor >= 1.0) || !self.extra_model_factor.is_finite() {
            return Err(ConfigError::invalid(
                "workload.extra_factor",
                "must be a finite number >= 1",
            ));
        }
        Ok(())
    }

    /// Number of mini-batches in one pass over the local data.
    pub fn num_batches(&self) -> u64 {
        self.num_samples.div_ceil(self.batch_size)
    }
}

/// A slice of a client's work executed at a fixed compute demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandPhase {
    /// Fraction of the client's total work, in `(0, 1]`.
    pub work_fraction: f64,
    /// Percent of physical capacity the phase can use, in `(0, 100]`.
    pub demand: f64,
}

/// Ordered demand phases whose work fractions sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DemandProfile(Vec<DemandPhase>);

impl Default for DemandProfile {
    fn default() -> Self {
        DemandProfile(vec![DemandPhase {
            work_fraction: 1.0,
            demand: 100.0,
        }])
    }
}

impl DemandProfile {
    pub fn new(phases: Vec<DemandPhase>) -> Result<Self, ConfigError> {
        if phases.is_empty() {
            return Err(ConfigError::invalid("demand_profile", "no phases"));
        }
        let mut total = 0.0;
        for p in &phases {
            if !(p.work_fraction > 0.0 && p.work_fraction <= 1.0) {
                return Err(ConfigError::invalid(
                    "demand_profile",
                    format!("work fraction {} outside (0,1]", p.work_fraction),
                ));
            }
            if !(p.demand > 0.0 && p.demand <= 100.0) {
                return Err(ConfigError::invalid(
                    "demand_profile",
                    format!("demand {} outside (0,100]", p.demand),
                ));
            }
            total += p.work_fraction;
        }
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(ConfigError::invalid(
                "demand_profile",
                format!("work fractions sum to {total}, expected 1"),
            ));
        }
        Ok(DemandProfile(phases))
    }

    pub fn phases(&self) -> &[DemandPhase] {
        &self.0
    }

    pub fn is_default(&self) -> bool {
        *self == DemandProfile::default()
    }
}

impl FromStr for DemandProfile {
    type Err = ConfigError;

    /// Parses `frac:demand[;frac:demand]*`. The empty string is the default
    /// single full-demand phase.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(DemandProfile::default());
        }
        let mut phases = Vec::new();
        for part in s.split(';') {
            let (frac, demand) = part.split_once(':').ok_or_else(|| {
                ConfigError::invalid("demand_profile", format!("malformed phase `{part}`"))
            })?;
            let parse = |v: &str| {
                v.trim().parse::<f64>().map_err(|_| {
                    ConfigError::invalid("demand_profile", format!("not a number: `{v}`"))
                })
            };
            phases.push(DemandPhase {
                work_fraction: parse(frac)?,
                demand: parse(demand)?,
            });
        }
        DemandProfile::new(phases)
    }
}

impl fmt::Display for DemandProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_default() {
            return Ok(());
        }
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{}:{}", p.work_fraction, p.demand)?;
        }
        Ok(())
    }
}

impl TryFrom<String> for DemandProfile {
    type Error = ConfigError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DemandProfile> for String {
    fn from(p: DemandProfile) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub client_id: ClientId,
    /// Cap on compute share, integer percent in `[1, 100]`.
    pub resource_budget: u32,
    pub workload: WorkloadSpec,
    pub demand_profile: DemandProfile,
}

impl ClientProfile {
    pub fn new(client_id: u32, resource_budget: u32, workload: WorkloadSpec) -> Self {
        ClientProfile {
            client_id: ClientId(client_id),
            resource_budget,
            workload,
            demand_profile: DemandProfile::default(),
        }
    }

    pub fn with_demand(mut self, profile: DemandProfile) -> Self {
        self.demand_profile = profile;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=100).contains(&self.resource_budget) {
            return Err(ConfigError::invalid(
                "budget",
                format!("{} outside [1,100]", self.resource_budget),
            ));
        }
        self.workload.validate()
    }
}

/// Checks every profile and client id uniqueness.
pub fn validate_fleet(fleet: &[ClientProfile]) -> Result<(), ConfigError> {
    let mut seen = HashSet::with_capacity(fleet.len());
    for p in fleet {
        p.validate()?;
        if !seen.insert(p.client_id) {
            return Err(ConfigError::invalid(
                "client_id",
                format!("duplicate client id {}", p.client_id),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerKind {
    Greedy,
    ResourceAware,
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerKind::Greedy => "greedy",
            SchedulerKind::ResourceAware => "resource-aware",
        })
    }
}

impl FromStr for SchedulerKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(SchedulerKind::Greedy),
            "resource-aware" => Ok(SchedulerKind::ResourceAware),
            other => Err(ConfigError::invalid(
                "scheduler",
                format!("unknown scheduler `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Sync,
    /// Aggregate every `k` completions in completion-time order.
    AsyncBuffered { k: usize },
}

/// Process-switching latencies in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Latencies {
    pub launch: f64,
    pub terminate: f64,
    pub upload: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetConfig {
    /// Total budget threshold in percent; above 100 co-running clients
    /// share capacity under max-min contention.
    pub theta: f64,
    /// Rows of the record table, i.e. the maximum number of parallel executors.
    pub max_executors: usize,
    pub scheduler_kind: SchedulerKind,
    pub participants_per_round: usize,
    pub rounds: usize,
    pub aggregation: Aggregation,
    pub cost: CostCoefficients,
    pub seed: u64,
    /// `false` selects the fixed-process-number baseline: at most one launch
    /// per freed executor.
    pub dynamic_parallelism: bool,
    pub latencies: Latencies,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            theta: 100.0,
            max_executors: 16,
            scheduler_kind: SchedulerKind::ResourceAware,
            participants_per_round: 10,
            rounds: 1,
            aggregation: Aggregation::Sync,
            cost: CostCoefficients::default(),
            seed: 0,
            dynamic_parallelism: true,
            latencies: Latencies::default(),
        }
    }
}

impl FleetConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.theta > 0.0 && self.theta <= 300.0) {
            return Err(ConfigError::invalid("theta", "must lie in (0, 300]"));
        }
        if self.max_executors < 1 {
            return Err(ConfigError::invalid("max_executors", "must be >= 1"));
        }
        if let Aggregation::AsyncBuffered { k } = self.aggregation {
            if k < 1 {
                return Err(ConfigError::invalid("async_k", "must be >= 1"));
            }
        }
        for (key, v) in [
            ("manager.launch_latency", self.latencies.launch),
            ("manager.terminate_latency", self.latencies.terminate),
            ("manager.upload_latency", self.latencies.upload),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(key, "must be a finite number >= 0"));
            }
        }
        self.cost.validate()
    }

    /// Validation that also depends on the fleet.
    pub fn validate_for(&self, fleet: &[ClientProfile]) -> Result<(), ConfigError> {
        self.validate()?;
        if self.participants_per_round > fleet.len() {
            return Err(ConfigError::invalid(
                "participants_per_round",
                format!(
                    "{} exceeds fleet size {}",
                    self.participants_per_round,
                    fleet.len()
                ),
            ));
        }
        Ok(())
    }
}

/// Distribution of integer budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BudgetDistribution {
    Uniform { levels: Vec<u32> },
    Categorical { levels: Vec<u32>, weights: Vec<f64> },
}

impl BudgetDistribution {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let levels = match self {
            BudgetDistribution::Uniform { levels } => levels,
            BudgetDistribution::Categorical { levels, weights } => {
                if weights.len() != levels.len() {
                    return Err(ConfigError::invalid(
                        "fleet.budgets.weights",
                        "must have one weight per level",
                    ));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) {
                    return Err(ConfigError::invalid(
                        "fleet.budgets.weights",
                        "weights must be non-negative",
                    ));
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > SUM_TOLERANCE {
                    return Err(ConfigError::invalid(
                        "fleet.budgets.weights",
                        format!("weights sum to {sum}, expected 1"),
                    ));
                }
                levels
            }
        };
        if levels.is_empty() {
            return Err(ConfigError::invalid("fleet.budgets.levels", "empty support"));
        }
        if let Some(bad) = levels.iter().find(|b| !(1..=100).contains(*b)) {
            return Err(ConfigError::invalid(
                "fleet.budgets.levels",
                format!("budget {bad} outside [1,100]"),
            ));
        }
        Ok(())
    }

    pub fn support(&self) -> &[u32] {
        match self {
            BudgetDistribution::Uniform { levels } => levels,
            BudgetDistribution::Categorical { levels, .. } => levels,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match self {
            BudgetDistribution::Uniform { levels } => levels[rng.gen_range(0..levels.len())],
            BudgetDistribution::Categorical { levels, weights } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (level, w) in levels.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return *level;
                    }
                }
                // Rounding left `u` above the running sum; take the last
                // level with positive weight.
                levels
                    .iter()
                    .zip(weights)
                    .rev()
                    .find(|(_, w)| **w > 0.0)
                    .map(|(l, _)| *l)
                    .unwrap_or(levels[levels.len() - 1])
            }
        }
    }
}

/// Distribution of per-client sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleDistribution {
    Fixed { value: u64 },
    /// Uniform over the closed range `[min, max]`.
    Range { min: u64, max: u64 },
}

impl SampleDistribution {
    fn validate(&self) -> Result<(), ConfigError> {
        if let SampleDistribution::Range { min, max } = self {
            if min > max {
                return Err(ConfigError::invalid("fleet.samples", "min exceeds max"));
            }
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        match *self {
            SampleDistribution::Fixed { value } => value,
            SampleDistribution::Range { min, max } => rng.gen_range(min..=max),
        }
    }
}

/// Everything [`generate_fleet`] needs besides `n` and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub budgets: BudgetDistribution,
    /// Template workload; `num_samples` is replaced by a draw from `samples`.
    pub workload: WorkloadSpec,
    pub samples: SampleDistribution,
    pub demand_profile: DemandProfile,
}

impl DistributionSpec {
    pub fn new(budgets: BudgetDistribution) -> Self {
        let workload = WorkloadSpec::default();
        DistributionSpec {
            budgets,
            samples: SampleDistribution::Fixed {
                value: workload.num_samples,
            },
            workload,
            demand_profile: DemandProfile::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.budgets.validate()?;
        self.samples.validate()?;
        self.workload.validate()
    }
}

/// Generates `n` clients with ids `0..n`. Pure in `(dist, n, seed)`.
pub fn generate_fleet(
    dist: &DistributionSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<ClientProfile>, ConfigError> {
    dist.validate()?;
    let mut rng = stream_rng(seed, Stream::Fleet);
    let fleet = (0..n)
        .map(|i| {
            let budget = dist.budgets.sample(&mut rng);
            let mut workload = dist.workload.clone();
            workload.num_samples = dist.samples.sample(&mut rng);
            ClientProfile {
                client_id: ClientId(i as u32),
                resource_budget: budget,
                workload,
                demand_profile: dist.demand_profile.clone(),
            }
        })
        .collect();
    Ok(fleet)
}

#[derive(Debug, Serialize, Deserialize)]
struct FleetRow {
    client_id: u32,
    budget: i64,
    num_samples: u64,
    batch_size: u64,
    layers: u32,
    seq_len: u32,
    extra_factor: f64,
    demand_profile: String,
}

/// Reads the fleet CSV format; rows are numbered from 1 (the header is row 0).
pub fn read_fleet<R: Read>(reader: R) -> Result<Vec<ClientProfile>, LoadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut fleet = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.deserialize::<FleetRow>().enumerate() {
        let row = i + 1;
        let bad = |reason: String| LoadError::Row { row, reason };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if !(1..=100).contains(&rec.budget) {
            return Err(bad(format!("budget {} outside [1,100]", rec.budget)));
        }
        let profile = ClientProfile {
            client_id: ClientId(rec.client_id),
            resource_budget: rec.budget as u32,
            workload: WorkloadSpec {
                num_samples: rec.num_samples,
                batch_size: rec.batch_size,
                model_layers: rec.layers,
                seq_len: rec.seq_len,
                extra_model_factor: rec.extra_factor,
            },
            demand_profile: rec.demand_profile.parse().map_err(|e: ConfigError| bad(e.to_string()))?,
        };
        profile.validate().map_err(|e| bad(e.to_string()))?;
        if !seen.insert(profile.client_id) {
            return Err(bad(format!("duplicate client_id {}", profile.client_id)));
        }
        fleet.push(profile);
    }
    Ok(fleet)
}

pub fn write_fleet<W: Write>(writer: W, fleet: &[ClientProfile]) -> Result<(), LoadError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for p in fleet {
        wtr.serialize(FleetRow {
            client_id: p.client_id.0,
            budget: i64::from(p.resource_budget),
            num_samples: p.workload.num_samples,
            batch_size: p.workload.batch_size,
            layers: p.workload.model_layers,
            seq_len: p.workload.seq_len,
            extra_factor: p.workload.extra_model_factor,
            demand_profile: p.demand_profile.to_string(),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_fleet(path: impl AsRef<Path>) -> Result<Vec<ClientProfile>, LoadError> {
    read_fleet(std::fs::File::open(path)?)
}

pub fn save_fleet(path: impl AsRef<Path>, fleet: &[ClientProfile]) -> Result<(), LoadError> {
    write_fleet(std::fs::File::create(path)?, fleet)
}

/// Budgets of the eight-client scheduling case study, clients `A..=H`.
pub const CASE_STUDY_BUDGETS: [u32; 8] = [10, 15, 30, 80, 65, 40, 50, 10];

/// The case-study fleet with ids `0..8` (`A` = 0) and identical workloads.
pub fn case_study_fleet(workload: &WorkloadSpec) -> Vec<ClientProfile> {
    CASE_STUDY_BUDGETS
        .iter()
        .enumerate()
        .map(|(i, &b)| ClientProfile::new(i as u32, b, workload.clone()))
        .collect()
}
