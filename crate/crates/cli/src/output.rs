//! Report files. Column layouts are documented in `docs/schemas.md`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use fedsim_core::engine::{AccuracyPoint, ExperimentReport};
use fedsim_core::metrics::RoundReport;
use fedsim_core::trace::{write_jsonl, TraceRecord};

use crate::config::ExperimentConfig;

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    write_jsonl(create(path)?, trace).with_context(|| format!("writing {}", path.display()))
}

pub fn write_jsonl_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RoundRow {
    pub round: u32,
    pub makespan_s: f64,
    pub utilization: f64,
    pub vacancy_area: f64,
    pub throughput: f64,
    pub n_clients: usize,
}

impl From<&RoundReport> for RoundRow {
    fn from(r: &RoundReport) -> Self {
        RoundRow {
            round: r.round,
            makespan_s: r.makespan,
            utilization: r.utilization,
            vacancy_area: r.vacancy_area,
            throughput: r.throughput,
            n_clients: r.n_clients(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ClientRow {
    pub round: u32,
    pub client_id: u32,
    pub budget: u32,
    pub start_s: f64,
    pub end_s: f64,
    pub wall_clock_s: f64,
}

pub fn client_rows(rounds: &[RoundReport]) -> impl Iterator<Item = ClientRow> + '_ {
    rounds.iter().flat_map(|r| {
        r.per_client.iter().map(move |c| ClientRow {
            round: r.round,
            client_id: c.client_id.0,
            budget: c.budget,
            start_s: c.start_s,
            end_s: c.end_s,
            wall_clock_s: c.wall_clock(),
        })
    })
}

#[derive(Debug, Serialize)]
pub struct TimelineRow {
    pub round: u32,
    pub t: f64,
    pub total_budget: u32,
    pub parallelism: usize,
}

pub fn timeline_rows(rounds: &[RoundReport]) -> impl Iterator<Item = TimelineRow> + '_ {
    rounds.iter().flat_map(|r| {
        r.budget_timeline
            .iter()
            .zip(&r.parallelism_timeline)
            .map(move |(b, p)| TimelineRow {
                round: r.round,
                t: b.0,
                total_budget: b.1,
                parallelism: p.1,
            })
    })
}

#[derive(Debug, Serialize)]
pub struct AccuracyRow {
    pub round: u32,
    pub time_s: f64,
    pub accuracy: f64,
}

impl From<&AccuracyPoint> for AccuracyRow {
    fn from(p: &AccuracyPoint) -> Self {
        AccuracyRow {
            round: p.round,
            time_s: p.time,
            accuracy: p.accuracy,
        }
    }
}

/// Aggregates over an experiment, shared by `summary.json` and sweeps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Totals {
    pub rounds: usize,
    pub mean_round_s: f64,
    pub total_time_s: f64,
    pub mean_utilization: f64,
    pub total_vacancy_area: f64,
    pub mean_throughput: f64,
    pub final_accuracy: Option<f64>,
    pub failed_rounds: usize,
}

impl Totals {
    pub fn of(report: &ExperimentReport) -> Self {
        let n = report.rounds.len().max(1) as f64;
        Totals {
            rounds: report.rounds.len(),
            mean_round_s: report.mean_round_time(),
            total_time_s: report.total_time,
            mean_utilization: report.rounds.iter().map(|r| r.utilization).sum::<f64>() / n,
            total_vacancy_area: report.rounds.iter().map(|r| r.vacancy_area).sum(),
            mean_throughput: report.rounds.iter().map(|r| r.throughput).sum::<f64>() / n,
            final_accuracy: report.accuracy.last().map(|p| p.accuracy),
            failed_rounds: report.failed_rounds.len(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub config: &'a ExperimentConfig,
    pub fleet_size: usize,
    #[serde(flatten)]
    pub totals: Totals,
    pub round_makespans_s: Vec<f64>,
    pub failed_round_ids: &'a [u32],
}

/// Writes `trace.jsonl`, `rounds.csv`, `clients.csv`, `summary.json` and,
/// when training ran, `accuracy.csv`.
pub fn write_experiment(
    dir: &Path,
    cfg: &ExperimentConfig,
    fleet_size: usize,
    report: &ExperimentReport,
    trace: &[TraceRecord],
) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_trace(&dir.join("trace.jsonl"), trace)?;
    write_csv(&dir.join("rounds.csv"), report.rounds.iter().map(RoundRow::from))?;
    write_csv(&dir.join("clients.csv"), client_rows(&report.rounds))?;
    if !report.accuracy.is_empty() {
        write_csv(&dir.join("accuracy.csv"), report.accuracy.iter().map(AccuracyRow::from))?;
    }
    let summary = Summary {
        config: cfg,
        fleet_size,
        totals: Totals::of(report),
        round_makespans_s: report.rounds.iter().map(|r| r.makespan).collect(),
        failed_round_ids: &report.failed_rounds,
    };
    write_json(&dir.join("summary.json"), &summary)
}
