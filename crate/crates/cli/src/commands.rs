//! Subcommand implementations. Each returns the directory it wrote to.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use log::info;
use serde::Serialize;
use thiserror::Error;

use fedsim_core::comms::{coordinator_bind, worker_run, LiveConfig, LiveError, WorkerOptions};
use fedsim_core::engine::{run_experiment, select_participants, EngineError, FlSetup};
use fedsim_core::profiles::{ClientProfile, ConfigError, SchedulerKind};
use fedsim_core::recipes::{compare_schedulers, mean_makespan, run_ablation, AblationStep};

use crate::config::{load_config, parse_config, ConfigLoadError, ExperimentConfig};
use crate::output::{
    timeline_rows, write_csv, write_experiment, write_jsonl_rows, write_trace, RoundRow, Totals,
};

#[derive(Debug, Error)]
pub enum CmdError {
    /// Rejected before running; exit status 2.
    #[error("configuration error: {0}")]
    Config(#[from] ConfigLoadError),
    /// Failed while running; exit status 1.
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e.into())
    }
}

impl From<EngineError> for CmdError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(c) => c.into(),
            other => CmdError::Runtime(other.into()),
        }
    }
}

impl From<LiveError> for CmdError {
    fn from(e: LiveError) -> Self {
        match e {
            LiveError::Config(c) => c.into(),
            other => CmdError::Runtime(other.into()),
        }
    }
}

/// Where the configuration comes from.
#[derive(Debug, Clone, Default)]
pub struct ConfigArgs {
    pub path: Option<PathBuf>,
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig, CmdError> {
        Ok(load_config(self.path.as_deref(), &self.overrides)?)
    }
}

fn prepare_fl(cfg: &ExperimentConfig, fleet: &[ClientProfile]) -> Result<Option<FlSetup>, CmdError> {
    if !cfg.train.enabled {
        return Ok(None);
    }
    Ok(Some(FlSetup::prepare(fleet, &cfg.fl_settings(), cfg.seed)?))
}

fn simulate_into(cfg: &ExperimentConfig, dir: &Path) -> Result<Totals, CmdError> {
    let fleet = cfg.build_fleet()?;
    let fl = prepare_fl(cfg, &fleet)?;
    let (report, trace) = run_experiment(&cfg.fleet_config(), &fleet, fl.as_ref())?;
    write_experiment(dir, cfg, fleet.len(), &report, &trace)?;
    Ok(Totals::of(&report))
}

pub fn cmd_simulate(args: &ConfigArgs) -> Result<PathBuf, CmdError> {
    let cfg = args.load()?;
    let dir = cfg.resolved_output_dir();
    let totals = simulate_into(&cfg, &dir)?;
    info!(
        "{} rounds, mean round {:.3} s, wrote {}",
        totals.rounds,
        totals.mean_round_s,
        dir.display()
    );
    Ok(dir)
}

#[derive(Debug, Serialize)]
struct CompareRow {
    scheduler: String,
    round: u32,
    makespan_s: f64,
    vacancy_area: f64,
    utilization: f64,
    throughput: f64,
    n_clients: usize,
}

/// Runs the same participants of round 0 under each scheduler.
pub fn cmd_compare(args: &ConfigArgs, schedulers: &[SchedulerKind]) -> Result<PathBuf, CmdError> {
    if schedulers.is_empty() {
        return Err(ConfigError::invalid("schedulers", "at least one scheduler is required").into());
    }
    let cfg = args.load()?;
    let fleet = cfg.build_fleet()?;
    let base = cfg.fleet_config();
    let chosen = select_participants(&fleet, base.participants_per_round, base.seed, 0);
    let runs = compare_schedulers(&base, &fleet, &chosen, schedulers)?;
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut rows = Vec::new();
    for (kind, report, trace) in &runs {
        let r = RoundRow::from(report);
        rows.push(CompareRow {
            scheduler: kind.to_string(),
            round: r.round,
            makespan_s: r.makespan_s,
            vacancy_area: r.vacancy_area,
            utilization: r.utilization,
            throughput: r.throughput,
            n_clients: r.n_clients,
        });
        write_csv(&dir.join(format!("timeline_{kind}.csv")), timeline_rows(std::slice::from_ref(report)))?;
        write_trace(&dir.join(format!("trace_{kind}.jsonl")), trace)?;
    }
    write_csv(&dir.join("compare.csv"), rows)?;
    Ok(dir)
}

#[derive(Debug, Serialize)]
struct AblationCell {
    config: &'static str,
    description: &'static str,
    participants: usize,
    rounds: usize,
    mean_round_s: f64,
    min_round_s: f64,
    max_round_s: f64,
}

#[derive(Debug, Serialize)]
struct AblationRoundRow {
    config: &'static str,
    participants: usize,
    round: u32,
    makespan_s: f64,
}

pub fn cmd_ablation(args: &ConfigArgs) -> Result<PathBuf, CmdError> {
    let cfg = args.load()?;
    let fleet = cfg.build_fleet()?;
    if let Some(n) = cfg.ablation.participants.iter().find(|&&n| n > fleet.len() || n == 0) {
        return Err(ConfigError::invalid(
            "ablation.participants",
            format!("{n} is not between 1 and the fleet size {}", fleet.len()),
        )
        .into());
    }
    let base = cfg.fleet_config();
    let rows = run_ablation(&base, &fleet, &cfg.ablation.participants)?;
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut cells = Vec::new();
    for &n in &cfg.ablation.participants {
        for step in AblationStep::ALL {
            let times: Vec<f64> = rows
                .iter()
                .filter(|r| r.step == step && r.participants == n)
                .map(|r| r.makespan)
                .collect();
            cells.push(AblationCell {
                config: step.label(),
                description: step.description(),
                participants: n,
                rounds: times.len(),
                mean_round_s: mean_makespan(&rows, step, n),
                min_round_s: times.iter().copied().fold(f64::INFINITY, f64::min),
                max_round_s: times.iter().copied().fold(0.0, f64::max),
            });
        }
    }
    write_csv(&dir.join("ablation.csv"), cells)?;
    write_csv(
        &dir.join("ablation_rounds.csv"),
        rows.iter().map(|r| AblationRoundRow {
            config: r.step.label(),
            participants: r.participants,
            round: r.round,
            makespan_s: r.makespan,
        }),
    )?;
    Ok(dir)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    key: String,
    value: String,
    rounds: usize,
    mean_round_s: f64,
    total_time_s: f64,
    mean_utilization: f64,
    total_vacancy_area: f64,
    mean_throughput: f64,
    final_accuracy: Option<f64>,
    failed_rounds: usize,
}

impl SweepRow {
    fn new(key: &str, value: &str, t: Totals) -> Self {
        SweepRow {
            key: key.to_owned(),
            value: value.to_owned(),
            rounds: t.rounds,
            mean_round_s: t.mean_round_s,
            total_time_s: t.total_time_s,
            mean_utilization: t.mean_utilization,
            total_vacancy_area: t.total_vacancy_area,
            mean_throughput: t.mean_throughput,
            final_accuracy: t.final_accuracy,
            failed_rounds: t.failed_rounds,
        }
    }
}

fn sweep_dir_name(key: &str, value: &str) -> String {
    let safe: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{key}={safe}")
}

/// Repeats the experiment once per value of `key`. Instances run in
/// parallel and write to their own subdirectories.
pub fn cmd_sweep(args: &ConfigArgs, key: &str, values: &[String]) -> Result<PathBuf, CmdError> {
    if values.is_empty() || values.iter().any(|v| v.trim().is_empty()) {
        return Err(ConfigError::invalid("values", "the sweep needs at least one non-empty value").into());
    }
    let base = args.load()?;
    let text = match &args.path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    // validate every instance before running any
    let mut instances = Vec::new();
    for v in values {
        let mut overrides = args.overrides.clone();
        overrides.push(format!("{key}={v}"));
        let cfg = parse_config(&text, &overrides)?;
        cfg.build_fleet()?;
        instances.push((v.clone(), cfg));
    }
    let dir = base.resolved_output_dir();
    let results: Vec<Result<Totals, CmdError>> = std::thread::scope(|s| {
        let handles: Vec<_> = instances
            .iter()
            .map(|(v, cfg)| {
                let sub = dir.join("sweep").join(sweep_dir_name(key, v));
                s.spawn(move || simulate_into(cfg, &sub))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("sweep instance panicked").into())))
            .collect()
    });
    let mut rows = Vec::new();
    for ((v, _), r) in instances.iter().zip(results) {
        rows.push(SweepRow::new(key, v, r?));
    }
    write_csv(&dir.join("sweep.csv"), rows)?;
    Ok(dir)
}

/// Live coordinator. Flags override the `[live]` section.
pub fn cmd_serve(
    args: &ConfigArgs,
    bind: Option<String>,
    workers_expected: Option<usize>,
    time_dilation: Option<f64>,
) -> Result<PathBuf, CmdError> {
    let mut cfg = args.load()?;
    if let Some(b) = bind {
        cfg.live.bind = b;
    }
    if let Some(w) = workers_expected {
        cfg.live.workers_expected = w;
    }
    if let Some(d) = time_dilation {
        cfg.live.time_dilation = d;
    }
    cfg.validate()?;
    let fleet = cfg.build_fleet()?;
    let fl = prepare_fl(&cfg, &fleet)?;
    let live = LiveConfig {
        fleet: cfg.fleet_config(),
        time_dilation: cfg.live.time_dilation,
        workers_expected: cfg.live.workers_expected,
        accept_timeout: Duration::from_secs_f64(cfg.live.accept_timeout_s),
        idle_timeout: Duration::from_secs_f64(cfg.live.idle_timeout_s),
    };
    let out = coordinator_bind(&cfg.live.bind, &live, &fleet, fl.as_ref())?;
    let dir = cfg.resolved_output_dir();
    write_experiment(&dir, &cfg, fleet.len(), &out.report, &out.trace)?;
    write_jsonl_rows(&dir.join("wire_log.jsonl"), &out.wire_log)?;
    Ok(dir)
}

pub fn cmd_worker(connect: &str, attempts: u32) -> Result<usize, CmdError> {
    let opts = WorkerOptions {
        connect_attempts: attempts,
        ..WorkerOptions::default()
    };
    let summary = worker_run(connect, &opts).map_err(anyhow::Error::from)?;
    Ok(summary.tasks)
}
