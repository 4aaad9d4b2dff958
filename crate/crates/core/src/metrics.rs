//! Round metrics computed from traces.
//!
//! Every quantity here is a pure function of one round's trace records, so
//! a report recomputed from a JSON-lines trace equals the in-memory one.
//!
//! Two budget notions are kept apart. Vacancy integrates the capacity not
//! covered by any launching or running slot's *budget*; utilization
//! integrates the *assigned* share after max-min contention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::CAPACITY;
use crate::profiles::ClientId;
use crate::trace::{EventKind, TraceRecord};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("trace for round {0} has no round_complete record")]
    Incomplete(u32),
    #[error("trace for round {round}: {reason}")]
    Malformed { round: u32, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientTiming {
    pub client_id: ClientId,
    pub budget: u32,
    pub start_s: f64,
    pub end_s: f64,
}

impl ClientTiming {
    pub fn wall_clock(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub makespan: f64,
    pub utilization: f64,
    /// Set when the round has zero length and utilization is undefined.
    pub utilization_undefined: bool,
    pub vacancy_area: f64,
    pub throughput: f64,
    /// `(t, clients launching or running)` steps.
    pub parallelism_timeline: Vec<(f64, usize)>,
    /// `(t, sum of launching/running budgets)` steps.
    pub budget_timeline: Vec<(f64, u32)>,
    pub per_client: Vec<ClientTiming>,
}

impl RoundReport {
    pub fn n_clients(&self) -> usize {
        self.per_client.len()
    }

    pub fn max_parallelism(&self) -> usize {
        self.parallelism_timeline.iter().map(|(_, n)| *n).max().unwrap_or(0)
    }
}

fn round_of(records: &[TraceRecord]) -> u32 {
    records.first().map_or(0, |r| r.round)
}

fn check_complete(records: &[TraceRecord]) -> Result<(), AnalysisError> {
    if records.iter().any(|r| r.kind == EventKind::RoundComplete) {
        Ok(())
    } else {
        Err(AnalysisError::Incomplete(round_of(records)))
    }
}

/// Launch/upload times per client, in launch order.
pub fn client_timings(records: &[TraceRecord]) -> Result<Vec<ClientTiming>, AnalysisError> {
    let round = round_of(records);
    let malformed = |reason: String| AnalysisError::Malformed { round, reason };
    let mut out: Vec<ClientTiming> = Vec::new();
    let mut index: BTreeMap<ClientId, usize> = BTreeMap::new();
    for r in records {
        match r.kind {
            EventKind::Instruction if r.instr.as_deref() == Some("launch") => {
                let c = r.client.ok_or_else(|| malformed("launch without client".into()))?;
                let b = r.budget.ok_or_else(|| malformed("launch without budget".into()))?;
                index.insert(c, out.len());
                out.push(ClientTiming {
                    client_id: c,
                    budget: b,
                    start_s: r.t,
                    end_s: f64::NAN,
                });
            }
            EventKind::ModelUploaded => {
                let c = r.client.ok_or_else(|| malformed("upload without client".into()))?;
                let i = *index
                    .get(&c)
                    .ok_or_else(|| malformed(format!("client {c} uploaded before launch")))?;
                out[i].end_s = r.t;
            }
            EventKind::ClientAbandoned => {
                let c = r.client.ok_or_else(|| malformed("abandon without client".into()))?;
                let i = index
                    .remove(&c)
                    .ok_or_else(|| malformed(format!("client {c} abandoned before launch")))?;
                out.remove(i);
                for v in index.values_mut() {
                    if *v > i {
                        *v -= 1;
                    }
                }
            }
            _ => {}
        }
    }
    if let Some(t) = out.iter().find(|t| t.end_s.is_nan()) {
        return Err(malformed(format!("client {} never uploaded", t.client_id)));
    }
    Ok(out)
}

/// Round duration: the last model upload.
pub fn makespan(records: &[TraceRecord]) -> Result<f64, AnalysisError> {
    check_complete(records)?;
    Ok(client_timings(records)?
        .iter()
        .map(|t| t.end_s)
        .fold(0.0, f64::max))
}

fn budget_steps(records: &[TraceRecord]) -> Vec<(f64, u32, usize)> {
    let mut steps: Vec<(f64, u32, usize)> = vec![(0.0, 0, 0)];
    let mut budget = 0u32;
    let mut count = 0usize;
    for r in records {
        let delta: Option<(i64, i64)> = match r.kind {
            EventKind::Instruction if r.instr.as_deref() == Some("launch") => {
                Some((i64::from(r.budget.unwrap_or(0)), 1))
            }
            EventKind::ModelUploaded | EventKind::ClientAbandoned => {
                Some((-i64::from(r.budget.unwrap_or(0)), -1))
            }
            _ => None,
        };
        if let Some((db, dc)) = delta {
            budget = (i64::from(budget) + db) as u32;
            count = (count as i64 + dc) as usize;
            match steps.last_mut() {
                Some(last) if last.0 == r.t => {
                    last.1 = budget;
                    last.2 = count;
                }
                _ => steps.push((r.t, budget, count)),
            }
        }
    }
    steps
}

/// Integral of a right-continuous step function over `[0, end]`.
fn integrate<F: Fn(usize) -> f64>(times: &[f64], value: F, end: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..times.len() {
        let a = times[i];
        if a >= end {
            break;
        }
        let b = times.get(i + 1).copied().unwrap_or(end).min(end);
        total += value(i) * (b - a);
    }
    total
}

/// `int_0^makespan max(0, 100 - active budgets) dt`.
pub fn vacancy_area(records: &[TraceRecord]) -> Result<f64, AnalysisError> {
    let end = makespan(records)?;
    let steps = budget_steps(records);
    let times: Vec<f64> = steps.iter().map(|s| s.0).collect();
    Ok(integrate(
        &times,
        |i| (CAPACITY - f64::from(steps[i].1)).max(0.0),
        end,
    ))
}

/// `int sum(assigned) dt / (100 * makespan)`; `None` for a zero-length round.
pub fn utilization(records: &[TraceRecord]) -> Result<Option<f64>, AnalysisError> {
    let end = makespan(records)?;
    if end <= 0.0 {
        return Ok(None);
    }
    let mut times = vec![0.0];
    let mut totals = vec![0.0];
    for r in records.iter().filter(|r| r.kind == EventKind::Allocation) {
        let total: f64 = r.alloc.as_ref().map_or(0.0, |a| a.values().sum());
        if *times.last().unwrap() == r.t {
            *totals.last_mut().unwrap() = total;
        } else {
            times.push(r.t);
            totals.push(total);
        }
    }
    Ok(Some(integrate(&times, |i| totals[i], end) / (CAPACITY * end)))
}

/// Completed clients per second of makespan.
pub fn throughput(records: &[TraceRecord]) -> Result<f64, AnalysisError> {
    let end = makespan(records)?;
    let done = client_timings(records)?.len();
    Ok(if end > 0.0 { done as f64 / end } else { 0.0 })
}

pub fn round_report(records: &[TraceRecord]) -> Result<RoundReport, AnalysisError> {
    let ms = makespan(records)?;
    let util = utilization(records)?;
    let steps = budget_steps(records);
    Ok(RoundReport {
        round: round_of(records),
        makespan: ms,
        utilization: util.unwrap_or(0.0),
        utilization_undefined: util.is_none(),
        vacancy_area: vacancy_area(records)?,
        throughput: throughput(records)?,
        parallelism_timeline: steps.iter().map(|s| (s.0, s.2)).collect(),
        budget_timeline: steps.iter().map(|s| (s.0, s.1)).collect(),
        per_client: client_timings(records)?,
    })
}
