//! Experiment configuration: a TOML file plus `--set a.b=c` overrides.
//!
//! ```toml
//! seed = 7
//! rounds = 5
//! participants_per_round = 10
//! scheduler = "resource-aware"
//! theta = 150
//!
//! [fleet]
//! kind = "standin"
//! size = 2800
//!
//! [train]
//! enabled = true
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use fedsim_core::engine::FlSettings;
use fedsim_core::profiles::{
    case_study_fleet, generate_fleet, load_fleet, Aggregation, BudgetDistribution, ClientProfile,
    ConfigError, DemandProfile, DistributionSpec, FleetConfig, Latencies, SampleDistribution,
    SchedulerKind, WorkloadSpec,
};
use fedsim_core::recipes::standin_fleet;
use fedsim_core::CostCoefficients;

/// Errors that map to exit status 2: the run never started.
#[derive(Debug, Error)]
pub enum ConfigLoadError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
    #[error(transparent)]
    Invalid(#[from] ConfigError),
}

impl ConfigLoadError {
    /// The configuration key at fault, when known.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigLoadError::Invalid(e) => Some(e.key()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FleetSource {
    /// Heterogeneous stand-in fleet with two-phase demand.
    Standin { size: usize },
    /// The eight-client scheduling case study.
    CaseStudy {
        #[serde(default)]
        workload: WorkloadSpec,
    },
    /// A fleet CSV file.
    File { path: PathBuf },
    /// A generated fleet; `num_samples` in `workload` is replaced by a
    /// draw from `samples` (default: the workload's own value).
    Distribution {
        size: usize,
        budgets: BudgetDistribution,
        #[serde(default)]
        workload: WorkloadSpec,
        #[serde(default)]
        samples: Option<SampleDistribution>,
        #[serde(default)]
        demand_profile: DemandProfile,
    },
}

impl Default for FleetSource {
    fn default() -> Self {
        FleetSource::Standin { size: 2800 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        let c = CostCoefficients::default();
        CostSection { alpha: c.alpha, beta: c.beta }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManagerSection {
    pub launch_latency: f64,
    pub terminate_latency: f64,
    pub upload_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub features: usize,
    pub classes: usize,
    pub alpha: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = FlSettings::default();
        DataSection {
            features: s.features,
            classes: s.classes,
            alpha: s.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub enabled: bool,
    pub lr: f64,
    pub staleness_exponent: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let s = FlSettings::default();
        TrainSection {
            enabled: false,
            lr: s.lr,
            staleness_exponent: s.staleness_exponent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiveSection {
    pub bind: String,
    pub workers_expected: usize,
    pub time_dilation: f64,
    pub accept_timeout_s: f64,
    pub idle_timeout_s: f64,
}

impl Default for LiveSection {
    fn default() -> Self {
        LiveSection {
            bind: "127.0.0.1:7070".into(),
            workers_expected: 3,
            time_dilation: 0.001,
            accept_timeout_s: 30.0,
            idle_timeout_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub participants: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            participants: vec![3, 10, 100],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    #[default]
    Sync,
    Async,
}

/// The full configuration tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub participants_per_round: usize,
    pub scheduler: SchedulerKind,
    pub theta: f64,
    pub max_executors: usize,
    pub dynamic_parallelism: bool,
    pub aggregation: AggregationMode,
    /// Buffer size for async aggregation.
    pub async_k: usize,
    pub output_dir: PathBuf,
    pub fleet: FleetSource,
    pub cost: CostSection,
    pub manager: ManagerSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub live: LiveSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let f = FleetConfig::default();
        ExperimentConfig {
            seed: f.seed,
            rounds: f.rounds,
            participants_per_round: f.participants_per_round,
            scheduler: f.scheduler_kind,
            theta: f.theta,
            max_executors: f.max_executors,
            dynamic_parallelism: f.dynamic_parallelism,
            aggregation: AggregationMode::Sync,
            async_k: 4,
            output_dir: PathBuf::from("fedsim-out"),
            fleet: FleetSource::default(),
            cost: CostSection::default(),
            manager: ManagerSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            live: LiveSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn fleet_config(&self) -> FleetConfig {
        FleetConfig {
            theta: self.theta,
            max_executors: self.max_executors,
            scheduler_kind: self.scheduler,
            participants_per_round: self.participants_per_round,
            rounds: self.rounds,
            aggregation: match self.aggregation {
                AggregationMode::Sync => Aggregation::Sync,
                AggregationMode::Async => Aggregation::AsyncBuffered { k: self.async_k },
            },
            cost: CostCoefficients {
                alpha: self.cost.alpha,
                beta: self.cost.beta,
            },
            seed: self.seed,
            dynamic_parallelism: self.dynamic_parallelism,
            latencies: Latencies {
                launch: self.manager.launch_latency,
                terminate: self.manager.terminate_latency,
                upload: self.manager.upload_latency,
            },
        }
    }

    pub fn fl_settings(&self) -> FlSettings {
        FlSettings {
            features: self.data.features,
            classes: self.data.classes,
            alpha: self.data.alpha,
            lr: self.train.lr,
            staleness_exponent: self.train.staleness_exponent,
        }
    }

    /// Checks everything that does not need the fleet.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rounds < 1 {
            return Err(ConfigError::invalid("rounds", "must be >= 1"));
        }
        if self.aggregation == AggregationMode::Async && self.async_k < 1 {
            return Err(ConfigError::invalid("async_k", "must be >= 1"));
        }
        self.fleet_config().validate()?;
        self.fl_settings().validate()?;
        match &self.fleet {
            FleetSource::Standin { size } | FleetSource::Distribution { size, .. } if *size < 1 => {
                return Err(ConfigError::invalid("fleet.size", "must be >= 1"));
            }
            FleetSource::Distribution { .. } => self.distribution().expect("distribution").validate()?,
            FleetSource::CaseStudy { workload } => workload.validate()?,
            _ => {}
        }
        if self.ablation.participants.is_empty() {
            return Err(ConfigError::invalid("ablation.participants", "must not be empty"));
        }
        if !(self.live.time_dilation > 0.0 && self.live.time_dilation.is_finite()) {
            return Err(ConfigError::invalid("live.time_dilation", "must be > 0"));
        }
        if self.live.workers_expected < 1 {
            return Err(ConfigError::invalid("live.workers_expected", "must be >= 1"));
        }
        Ok(())
    }

    fn distribution(&self) -> Option<DistributionSpec> {
        let FleetSource::Distribution { budgets, workload, samples, demand_profile, .. } = &self.fleet else {
            return None;
        };
        Some(DistributionSpec {
            budgets: budgets.clone(),
            workload: workload.clone(),
            samples: samples.clone().unwrap_or(SampleDistribution::Fixed {
                value: workload.num_samples,
            }),
            demand_profile: demand_profile.clone(),
        })
    }

    /// Materialises the fleet and checks the fleet-dependent constraints.
    pub fn build_fleet(&self) -> Result<Vec<ClientProfile>, ConfigLoadError> {
        let fleet = match &self.fleet {
            FleetSource::Standin { size } => standin_fleet(*size, self.seed),
            FleetSource::CaseStudy { workload } => case_study_fleet(workload),
            FleetSource::File { path } => {
                load_fleet(path).map_err(|e| ConfigLoadError::Parse(format!("fleet.path: {e}")))?
            }
            FleetSource::Distribution { size, .. } => {
                let spec = self.distribution().expect("distribution");
                generate_fleet(&spec, *size, self.seed)?
            }
        };
        self.fleet_config().validate_for(&fleet)?;
        if let Some(p) = fleet.iter().find(|p| f64::from(p.resource_budget) > self.theta) {
            return Err(ConfigError::invalid(
                "theta",
                format!(
                    "client {} has budget {} above theta {}; it could never launch",
                    p.client_id, p.resource_budget, self.theta
                ),
            )
            .into());
        }
        Ok(fleet)
    }

    /// Output directory, with `FEDSIM_OUT` taking precedence.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os("FEDSIM_OUT") {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a plain string (so `scheduler=greedy` needs no quotes).
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigLoadError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigLoadError::Override(assignment.to_owned()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigLoadError::Override(assignment.to_owned()));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigLoadError::Override(format!("{assignment} ({part} is not a table)")))?;
    }
    table.insert(parts[parts.len() - 1].to_owned(), parse_value(raw.trim()));
    Ok(())
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigLoadError> {
    let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigLoadError::Parse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigLoadError::Parse(e.message().to_owned()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file (or the defaults when `path` is `None`).
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, ConfigLoadError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigLoadError::Read {
            path: p.to_owned(),
            source,
        })?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}
