//! Discrete-event simulation of global rounds.
//!
//! Between consecutive events every training client progresses at a
//! constant rate given by the capped max-min allocation over the training
//! set. Any launch, phase change or completion triggers re-allocation.
//! Simultaneous events are processed in `(time, kind rank, client)` order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost_model::{maxmin_allocate, rate, work_units, CAPACITY};
use crate::executor_manager::{ClientRequest, ExecutorManager, Instruction, InstructionKind, ProtocolError, RequestKind};
use crate::fl::{accuracy, fedavg, local_train, FlError, ModelParams, SyntheticData, DatasetShard};
use crate::metrics::{round_report, AnalysisError, RoundReport};
use crate::profiles::{Aggregation, ClientId, ClientProfile, ConfigError, FleetConfig};
use crate::rng::{keyed_rng, Stream};
use crate::scheduler::{ExecutorId, Participant, ScheduleEntry};
use crate::trace::{EventKind, Trace, TraceRecord};

/// Relative slack under which remaining phase work counts as finished.
const COMPLETION_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error("round {round} stalled at t={t} with {pending} clients pending")]
    Stalled { round: u32, t: f64, pending: usize },
}

#[derive(Debug, Clone, Copy)]
struct Timer {
    t: f64,
    kind: EventKind,
    client: ClientId,
    executor: ExecutorId,
    seq: u64,
}

impl Timer {
    fn key(&self, other: &Self) -> Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.client.cmp(&other.client))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialEq for Timer {
    fn eq(&self, other: &Self) -> bool {
        self.key(other) == Ordering::Equal
    }
}

impl Eq for Timer {}

impl PartialOrd for Timer {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timer {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.key(self)
    }
}

#[derive(Debug, Clone)]
struct Training {
    budget: u32,
    executor: ExecutorId,
    phase_work: Vec<f64>,
    demands: Vec<f64>,
    phase: usize,
    remaining: f64,
    share: f64,
    /// Phase finished; its completion event is queued.
    waiting: bool,
}

impl Training {
    fn demand(&self) -> f64 {
        self.demands[self.phase]
    }

    fn last_phase(&self) -> bool {
        self.phase + 1 == self.phase_work.len()
    }
}

struct RoundSim<'a> {
    round: u32,
    config: &'a FleetConfig,
    profiles: HashMap<ClientId, &'a ClientProfile>,
    mgr: ExecutorManager,
    pending: Vec<Participant>,
    n: usize,
    timers: BinaryHeap<Timer>,
    seq: u64,
    training: BTreeMap<ClientId, Training>,
    uploaded: usize,
    now: f64,
    last_alloc: Option<BTreeMap<ClientId, f64>>,
    trace: Trace,
}

impl<'a> RoundSim<'a> {
    fn push_timer(&mut self, t: f64, kind: EventKind, client: ClientId, executor: ExecutorId) {
        self.seq += 1;
        self.timers.push(Timer {
            t,
            kind,
            client,
            executor,
            seq: self.seq,
        });
    }

    fn record(&mut self, kind: EventKind) -> TraceRecord {
        TraceRecord::new(self.round, self.now, kind)
    }

    fn log_instructions(&mut self, instrs: &[Instruction]) {
        for i in instrs {
            let mut rec = self
                .record(EventKind::Instruction)
                .client(i.client_id)
                .executor(i.executor_id)
                .instr(i.kind.name());
            if let InstructionKind::Launch { budget, .. } = i.kind {
                rec = rec.budget(budget);
            }
            self.trace.push(rec);
            // delivered immediately in simulation
            self.mgr.table_mut().pop(i.executor_id);
        }
    }

    fn on_launches(&mut self, launches: Vec<(ScheduleEntry, Instruction)>) {
        for (entry, instr) in launches {
            self.log_instructions(std::slice::from_ref(&instr));
            let t = self.now + self.config.latencies.launch;
            self.push_timer(t, EventKind::ClientLaunched, entry.client_id, entry.executor_id);
        }
    }

    fn request(&mut self, client: ClientId, kind: RequestKind) -> Result<(), EngineError> {
        let instrs = self.mgr.on_request(ClientRequest { client_id: client, kind }, self.now)?;
        self.log_instructions(&instrs);
        Ok(())
    }

    fn start_training(&mut self, client: ClientId, executor: ExecutorId) -> Result<(), EngineError> {
        let p = self.profiles[&client];
        let total = work_units(&p.workload, &self.config.cost);
        let phases = p.demand_profile.phases();
        let phase_work: Vec<f64> = phases.iter().map(|ph| total * ph.work_fraction).collect();
        let demands: Vec<f64> = phases.iter().map(|ph| ph.demand).collect();
        let rec = self
            .record(EventKind::ClientLaunched)
            .client(client)
            .executor(executor)
            .budget(p.resource_budget)
            .demand(demands[0]);
        self.trace.push(rec);
        self.request(client, RequestKind::Register)?;
        let tr = Training {
            budget: p.resource_budget,
            executor,
            remaining: phase_work[0],
            phase_work,
            demands,
            phase: 0,
            share: 0.0,
            waiting: false,
        };
        self.enter_phase(client, tr);
        Ok(())
    }

    fn enter_phase(&mut self, client: ClientId, mut tr: Training) {
        if tr.remaining <= 0.0 {
            tr.remaining = 0.0;
            tr.waiting = true;
            let kind = if tr.last_phase() {
                EventKind::ClientTrainingComplete
            } else {
                EventKind::PhaseCompleted
            };
            let (now, exec) = (self.now, tr.executor);
            self.push_timer(now, kind, client, exec);
        }
        self.training.insert(client, tr);
    }

    fn handle(&mut self, timer: Timer) -> Result<(), EngineError> {
        let client = timer.client;
        match timer.kind {
            EventKind::ClientLaunched => self.start_training(client, timer.executor)?,
            EventKind::PhaseCompleted => {
                let mut tr = self.training.remove(&client).expect("training client");
                tr.phase += 1;
                tr.remaining = tr.phase_work[tr.phase];
                tr.waiting = false;
                let rec = self
                    .record(EventKind::PhaseCompleted)
                    .client(client)
                    .executor(tr.executor)
                    .demand(tr.demand());
                self.trace.push(rec);
                self.enter_phase(client, tr);
            }
            EventKind::ClientTrainingComplete => {
                let tr = self.training.remove(&client).expect("training client");
                let rec = self
                    .record(EventKind::ClientTrainingComplete)
                    .client(client)
                    .executor(tr.executor);
                self.trace.push(rec);
                self.request(client, RequestKind::TrainingComplete)?;
                let t = self.now + self.config.latencies.upload;
                self.push_timer(t, EventKind::ModelUploaded, client, tr.executor);
            }
            EventKind::ModelUploaded => {
                let budget = self.profiles[&client].resource_budget;
                let rec = self
                    .record(EventKind::ModelUploaded)
                    .client(client)
                    .executor(timer.executor)
                    .budget(budget);
                self.trace.push(rec);
                self.request(client, RequestKind::ModelUploaded)?;
                self.uploaded += 1;
                let t = self.now + self.config.latencies.terminate;
                self.push_timer(t, EventKind::SlotFreed, client, timer.executor);
            }
            EventKind::SlotFreed => {
                self.mgr.finish_termination(timer.executor)?;
                let rec = self
                    .record(EventKind::SlotFreed)
                    .client(client)
                    .executor(timer.executor);
                self.trace.push(rec);
                let launches = self.mgr.on_slot_freed(
                    timer.executor,
                    &mut self.pending,
                    self.n,
                    self.config.theta,
                    self.now,
                );
                self.on_launches(launches);
            }
            EventKind::RoundComplete
            | EventKind::Instruction
            | EventKind::Allocation
            | EventKind::ClientAbandoned => {
                unreachable!("not a timer kind")
            }
        }
        Ok(())
    }

    fn reallocate(&mut self) {
        let ids: Vec<ClientId> = self
            .training
            .iter()
            .filter(|(_, t)| !t.waiting)
            .map(|(c, _)| *c)
            .collect();
        let caps: Vec<f64> = ids.iter().map(|c| f64::from(self.training[c].budget)).collect();
        let demands: Vec<f64> = ids.iter().map(|c| self.training[c].demand()).collect();
        let alloc = maxmin_allocate(&caps, &demands, CAPACITY);
        let map: BTreeMap<ClientId, f64> = ids.iter().copied().zip(alloc.shares).collect();
        for (c, tr) in self.training.iter_mut() {
            tr.share = map.get(c).copied().unwrap_or(0.0);
        }
        if self.last_alloc.as_ref() != Some(&map) {
            let rec = self.record(EventKind::Allocation).alloc(map.clone());
            self.trace.push(rec);
            self.last_alloc = Some(map);
        }
    }

    fn finished(&self) -> bool {
        self.pending.is_empty()
            && self.uploaded == self.n
            && self.timers.is_empty()
            && self.mgr.all_idle()
    }

    fn run(mut self) -> Result<Trace, EngineError> {
        let launches = self
            .mgr
            .start_round(&mut self.pending, self.n, self.config.theta, self.now);
        self.on_launches(launches);
        loop {
            while self.timers.peek().is_some_and(|t| t.t <= self.now) {
                let timer = self.timers.pop().expect("peeked");
                self.handle(timer)?;
            }
            self.reallocate();
            if self.finished() {
                let rec = self.record(EventKind::RoundComplete);
                self.trace.push(rec);
                return Ok(self.trace);
            }

            let next_timer = self.timers.peek().map(|t| t.t);
            let next_done = self
                .training
                .values()
                .filter(|t| !t.waiting)
                .map(|t| self.now + t.remaining / rate(t.share))
                .min_by(f64::total_cmp);
            let t_next = match (next_timer, next_done) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => {
                    return Err(EngineError::Stalled {
                        round: self.round,
                        t: self.now,
                        pending: self.pending.len(),
                    })
                }
            };
            let dt = t_next - self.now;
            let now = t_next;
            let mut done = Vec::new();
            for (c, tr) in self.training.iter_mut().filter(|(_, t)| !t.waiting) {
                let finish = self.now + tr.remaining / rate(tr.share);
                tr.remaining -= rate(tr.share) * dt;
                let work = tr.phase_work[tr.phase];
                if finish <= t_next || tr.remaining <= COMPLETION_EPS * work {
                    tr.remaining = 0.0;
                    tr.waiting = true;
                    done.push((*c, tr.executor, tr.last_phase()));
                }
            }
            self.now = now;
            for (c, exec, last) in done {
                let kind = if last {
                    EventKind::ClientTrainingComplete
                } else {
                    EventKind::PhaseCompleted
                };
                self.push_timer(now, kind, c, exec);
            }
        }
    }
}

/// Simulates one round and returns its report and trace. Trace times are
/// relative to the round start.
pub fn simulate_round(
    round: u32,
    fleet: &[ClientProfile],
    participants: &[ClientId],
    config: &FleetConfig,
) -> Result<(RoundReport, Trace), EngineError> {
    config.validate()?;
    let by_id: HashMap<ClientId, &ClientProfile> = fleet.iter().map(|p| (p.client_id, p)).collect();
    let mut seen = HashSet::new();
    let mut chosen = Vec::with_capacity(participants.len());
    for c in participants {
        let p = by_id
            .get(c)
            .ok_or_else(|| ConfigError::invalid("participants", format!("client {c} not in fleet")))?;
        if !seen.insert(*c) {
            return Err(ConfigError::invalid("participants", format!("client {c} listed twice")).into());
        }
        if f64::from(p.resource_budget) > config.theta {
            return Err(ConfigError::invalid(
                "theta",
                format!(
                    "client {c} has budget {} above theta {}; it can never launch",
                    p.resource_budget, config.theta
                ),
            )
            .into());
        }
        chosen.push(*p);
    }

    let mut mgr = ExecutorManager::new(
        config.max_executors,
        config.scheduler_kind,
        config.dynamic_parallelism,
    );
    mgr.begin_round(chosen.iter().copied());
    let sim = RoundSim {
        round,
        config,
        profiles: chosen.iter().map(|p| (p.client_id, *p)).collect(),
        mgr,
        pending: chosen
            .iter()
            .map(|p| Participant {
                client_id: p.client_id,
                resource_budget: p.resource_budget,
            })
            .collect(),
        n: chosen.len(),
        timers: BinaryHeap::new(),
        seq: 0,
        training: BTreeMap::new(),
        uploaded: 0,
        now: 0.0,
        last_alloc: None,
        trace: Vec::new(),
    };
    let trace = sim.run()?;
    let report = round_report(&trace)?;
    Ok((report, trace))
}

pub fn run_round(
    fleet: &[ClientProfile],
    participants: &[ClientId],
    config: &FleetConfig,
) -> Result<(RoundReport, Trace), EngineError> {
    simulate_round(0, fleet, participants, config)
}

/// Uniform selection without replacement; the returned order is the
/// arrival order seen by the greedy scheduler.
pub fn select_participants(fleet: &[ClientProfile], n: usize, seed: u64, round: u32) -> Vec<ClientId> {
    let mut rng = keyed_rng(seed, Stream::Selection, u64::from(round));
    index::sample(&mut rng, fleet.len(), n)
        .into_iter()
        .map(|i| fleet[i].client_id)
        .collect()
}

/// Data, shards and hyper-parameters for coupling rounds to training.
#[derive(Debug, Clone)]
pub struct FlSetup {
    pub data: SyntheticData,
    pub shards: BTreeMap<ClientId, DatasetShard>,
    pub lr: f64,
    pub init: ModelParams,
    /// Staleness discount exponent for buffered async aggregation; 0 disables it.
    pub staleness_exponent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlSettings {
    pub features: usize,
    pub classes: usize,
    pub alpha: f64,
    pub lr: f64,
    pub staleness_exponent: f64,
}

impl Default for FlSettings {
    fn default() -> Self {
        FlSettings {
            features: 8,
            classes: 4,
            alpha: 0.5,
            lr: 0.05,
            staleness_exponent: 0.0,
        }
    }
}

impl FlSettings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.features < 1 {
            return Err(ConfigError::invalid("data.features", "must be >= 1"));
        }
        if self.classes < 2 {
            return Err(ConfigError::invalid("data.classes", "must be >= 2"));
        }
        if !(self.alpha > 0.0) {
            return Err(ConfigError::invalid("data.alpha", "must be > 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ConfigError::invalid("train.lr", "must be > 0"));
        }
        if !(self.staleness_exponent >= 0.0) {
            return Err(ConfigError::invalid("train.staleness_exponent", "must be >= 0"));
        }
        Ok(())
    }
}

impl FlSetup {
    /// Generates a dataset large enough for every client's `num_samples`
    /// plus a 20% test split, and partitions it.
    pub fn prepare(fleet: &[ClientProfile], settings: &FlSettings, seed: u64) -> Result<Self, EngineError> {
        settings.validate()?;
        let need: u64 = fleet.iter().map(|p| p.workload.num_samples).sum();
        let n_total = (need as f64 / 0.8).ceil() as usize + 1;
        let data = crate::fl::make_synthetic_dataset(settings.features, settings.classes, n_total, seed);
        let clients: Vec<(ClientId, usize)> = fleet
            .iter()
            .map(|p| (p.client_id, p.workload.num_samples as usize))
            .collect();
        let shards = crate::fl::partition_noniid(&data.train, &clients, settings.alpha, seed)?;
        Ok(FlSetup {
            data,
            shards,
            lr: settings.lr,
            init: ModelParams::zeros(settings.features, settings.classes),
            staleness_exponent: settings.staleness_exponent,
        })
    }

    /// One client's update from `base`, deterministic per (seed, round, client).
    pub fn client_update(
        &self,
        base: &ModelParams,
        profile: &ClientProfile,
        seed: u64,
        round: u32,
    ) -> ModelParams {
        let key = (u64::from(round) << 32) | u64::from(profile.client_id.0);
        let mut rng = keyed_rng(seed, Stream::Training, key);
        match self.shards.get(&profile.client_id) {
            Some(shard) => local_train(base, shard, &profile.workload, self.lr, &mut rng),
            None => ModelParams(vec![0.0; base.len()]),
        }
    }

    pub fn test_accuracy(&self, params: &ModelParams) -> f64 {
        accuracy(params, &self.data.test)
    }
}

/// FedAvg over one synchronous round. Updates are combined in client-id
/// order so the result does not depend on completion order.
pub fn sync_aggregate(
    base: &ModelParams,
    mut updates: Vec<(ClientId, ModelParams, f64)>,
) -> Result<ModelParams, FlError> {
    if updates.is_empty() {
        return Ok(base.clone());
    }
    updates.sort_by_key(|u| u.0);
    let deltas: Vec<ModelParams> = updates.iter().map(|u| u.1.clone()).collect();
    let weights: Vec<f64> = updates.iter().map(|u| u.2).collect();
    fedavg(&deltas, &weights, base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub round: u32,
    /// Simulated seconds since the experiment started.
    pub time: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rounds: Vec<RoundReport>,
    pub accuracy: Vec<AccuracyPoint>,
    pub total_time: f64,
    /// Rounds that could not complete (live mode only).
    #[serde(default)]
    pub failed_rounds: Vec<u32>,
    /// Global model after the last round, when training is enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_params: Option<ModelParams>,
}

impl ExperimentReport {
    pub fn mean_round_time(&self) -> f64 {
        if self.rounds.is_empty() {
            return 0.0;
        }
        self.rounds.iter().map(|r| r.makespan).sum::<f64>() / self.rounds.len() as f64
    }

    /// Accuracy of the newest model aggregated at or before `time`.
    pub fn accuracy_at(&self, time: f64) -> f64 {
        self.accuracy
            .iter()
            .take_while(|p| p.time <= time)
            .last()
            .map_or(0.0, |p| p.accuracy)
    }
}

/// Runs `config.rounds` rounds. With `fl` set, client updates are trained
/// and aggregated and an accuracy series over simulated time is produced.
pub fn run_experiment(
    config: &FleetConfig,
    fleet: &[ClientProfile],
    fl: Option<&FlSetup>,
) -> Result<(ExperimentReport, Trace), EngineError> {
    config.validate_for(fleet)?;
    if config.rounds < 1 {
        return Err(ConfigError::invalid("rounds", "must be >= 1").into());
    }
    let by_id: HashMap<ClientId, &ClientProfile> = fleet.iter().map(|p| (p.client_id, p)).collect();
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut trace = Vec::new();
    let mut curve = Vec::new();
    let mut global = fl.map(|f| f.init.clone());
    if let (Some(f), Some(g)) = (fl, &global) {
        curve.push(AccuracyPoint {
            round: 0,
            time: 0.0,
            accuracy: f.test_accuracy(g),
        });
    }
    let mut offset = 0.0;
    for r in 0..config.rounds as u32 {
        let chosen = select_participants(fleet, config.participants_per_round, config.seed, r);
        let (report, round_trace) = simulate_round(r, fleet, &chosen, config)?;
        let round_end = round_trace.last().map_or(0.0, |rec| rec.t);

        if let (Some(f), Some(g)) = (fl, global.as_mut()) {
            match config.aggregation {
                Aggregation::Sync => {
                    let updates = report
                        .per_client
                        .iter()
                        .map(|t| {
                            let p = by_id[&t.client_id];
                            (t.client_id, f.client_update(g, p, config.seed, r), p.workload.num_samples as f64)
                        })
                        .collect();
                    *g = sync_aggregate(g, updates)?;
                    curve.push(AccuracyPoint {
                        round: r,
                        time: offset + report.makespan,
                        accuracy: f.test_accuracy(g),
                    });
                }
                Aggregation::AsyncBuffered { k } => {
                    async_round(f, g, &report, &by_id, config.seed, r, k, offset, &mut curve)?;
                }
            }
        }
        offset += round_end;
        trace.extend(round_trace);
        rounds.push(report);
    }
    Ok((
        ExperimentReport {
            rounds,
            accuracy: curve,
            total_time: offset,
            failed_rounds: Vec::new(),
            final_params: global,
        },
        trace,
    ))
}

/// Buffered asynchronous aggregation within one round: completions are
/// taken in completion-time order, each client trains from the newest
/// model available at its launch, and every `k` updates are averaged in.
#[allow(clippy::too_many_arguments)]
fn async_round(
    f: &FlSetup,
    global: &mut ModelParams,
    report: &RoundReport,
    by_id: &HashMap<ClientId, &ClientProfile>,
    seed: u64,
    round: u32,
    k: usize,
    offset: f64,
    curve: &mut Vec<AccuracyPoint>,
) -> Result<(), EngineError> {
    let mut order: Vec<_> = report.per_client.iter().collect();
    order.sort_by(|a, b| a.end_s.total_cmp(&b.end_s).then(a.client_id.cmp(&b.client_id)));
    let mut versions: Vec<(f64, ModelParams)> = vec![(0.0, global.clone())];
    let mut deltas = Vec::new();
    let mut weights = Vec::new();
    let mut flush = |global: &mut ModelParams,
                     versions: &mut Vec<(f64, ModelParams)>,
                     deltas: &mut Vec<ModelParams>,
                     weights: &mut Vec<f64>,
                     at: f64|
     -> Result<(), EngineError> {
        if deltas.is_empty() {
            return Ok(());
        }
        *global = fedavg(deltas, weights, global)?;
        deltas.clear();
        weights.clear();
        versions.push((at, global.clone()));
        curve.push(AccuracyPoint {
            round,
            time: offset + at,
            accuracy: f.test_accuracy(global),
        });
        Ok(())
    };
    for t in order {
        let p = by_id[&t.client_id];
        let base_idx = versions
            .iter()
            .rposition(|(at, _)| *at <= t.start_s)
            .unwrap_or(0);
        let staleness = (versions.len() - 1 - base_idx) as f64;
        let delta = f.client_update(&versions[base_idx].1, p, seed, round);
        deltas.push(delta);
        weights.push(p.workload.num_samples as f64 * (1.0 + staleness).powf(-f.staleness_exponent));
        if deltas.len() == k {
            flush(global, &mut versions, &mut deltas, &mut weights, t.end_s)?;
        }
    }
    flush(global, &mut versions, &mut deltas, &mut weights, report.makespan)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{DemandProfile, SchedulerKind, WorkloadSpec};

    /// Workload whose cost is exactly `units` seconds at full capacity
    /// (alpha = 1e-3, beta = 0, one layer, seq 1, batch 1).
    fn unit_config() -> FleetConfig {
        FleetConfig {
            cost: crate::cost_model::CostCoefficients { alpha: 1e-3, beta: 0.0 },
            ..FleetConfig::default()
        }
    }

    fn client(id: u32, budget: u32, units: u64) -> ClientProfile {
        ClientProfile::new(
            id,
            budget,
            WorkloadSpec {
                num_samples: units * 1000,
                batch_size: 1,
                model_layers: 1,
                seq_len: 1,
                extra_model_factor: 1.0,
            },
        )
    }

    fn ids(fleet: &[ClientProfile]) -> Vec<ClientId> {
        fleet.iter().map(|p| p.client_id).collect()
    }

    fn end_of(r: &RoundReport, c: u32) -> f64 {
        r.per_client.iter().find(|t| t.client_id == ClientId(c)).unwrap().end_s
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    #[test]
    fn uncontended_pair() {
        let fleet = vec![client(0, 50, 100), client(1, 25, 100)];
        let (r, _) = run_round(&fleet, &ids(&fleet), &unit_config()).unwrap();
        assert!(close(end_of(&r, 0), 200.0));
        assert!(close(end_of(&r, 1), 400.0));
        assert!(close(r.makespan, 400.0));
        assert!(close(r.utilization, 0.5));
    }

    #[test]
    fn single_full_client() {
        let fleet = vec![client(0, 100, 37)];
        let (r, trace) = run_round(&fleet, &ids(&fleet), &unit_config()).unwrap();
        assert!(close(r.makespan, 37.0));
        assert!(close(r.utilization, 1.0));
        assert_eq!(trace.last().unwrap().kind, EventKind::RoundComplete);
    }

    #[test]
    fn sharing_shortens_round() {
        let fleet = vec![client(0, 80, 100), client(1, 65, 100)];
        let hard = FleetConfig { theta: 100.0, ..unit_config() };
        let soft = FleetConfig { theta: 150.0, ..unit_config() };
        let (rh, _) = run_round(&fleet, &ids(&fleet), &hard).unwrap();
        let (rs, _) = run_round(&fleet, &ids(&fleet), &soft).unwrap();
        assert!(close(rh.makespan, 100.0 / 0.8 + 100.0 / 0.65));
        assert!(close(rs.makespan, 200.0));
        assert!(rs.makespan < rh.makespan);
    }

    #[test]
    fn empty_round() {
        let (r, trace) = run_round(&[], &[], &unit_config()).unwrap();
        assert_eq!(r.makespan, 0.0);
        assert!(r.utilization_undefined);
        assert_eq!(trace.len(), 2); // allocation + round_complete
    }

    #[test]
    fn zero_work_client_completes_at_launch() {
        let fleet = vec![client(0, 30, 0), client(1, 30, 10)];
        let (r, _) = run_round(&fleet, &ids(&fleet), &unit_config()).unwrap();
        assert_eq!(end_of(&r, 0), 0.0);
        assert!(close(r.makespan, 10.0 / 0.3));
    }

    #[test]
    fn budget_above_theta_is_rejected() {
        let fleet = vec![client(0, 90, 10)];
        let cfg = FleetConfig { theta: 80.0, ..unit_config() };
        assert!(matches!(run_round(&fleet, &ids(&fleet), &cfg), Err(EngineError::Config(_))));
    }

    #[test]
    fn latencies_delay_completion() {
        let fleet = vec![client(0, 100, 10), client(1, 100, 10)];
        let mut cfg = unit_config();
        cfg.latencies.launch = 1.0;
        cfg.latencies.upload = 2.0;
        cfg.latencies.terminate = 0.5;
        let (r, trace) = run_round(&fleet, &ids(&fleet), &cfg).unwrap();
        // first: launch 1 + train 10 + upload 2 = 13; slot free at 13.5
        // second: launch at 13.5, running 14.5 .. 24.5, uploaded 26.5
        assert!(close(r.per_client[0].end_s, 13.0));
        assert!(close(r.per_client[1].start_s, 13.5));
        assert!(close(r.makespan, 26.5));
        assert!(close(trace.last().unwrap().t, 27.0));
    }

    #[test]
    fn two_phase_client_progresses_at_phase_demand() {
        let fleet = vec![client(0, 80, 100).with_demand("0.5:100;0.5:20".parse::<DemandProfile>().unwrap())];
        let (r, trace) = run_round(&fleet, &ids(&fleet), &unit_config()).unwrap();
        // 50 units at 0.8, then 50 units at 0.2
        assert!(close(r.makespan, 50.0 / 0.8 + 50.0 / 0.2));
        assert!(trace.iter().any(|t| t.kind == EventKind::PhaseCompleted && t.demand == Some(20.0)));
    }

    #[test]
    fn case_study_launch_order() {
        let fleet = crate::profiles::case_study_fleet(&WorkloadSpec::default());
        let cfg = FleetConfig { participants_per_round: 8, ..FleetConfig::default() };
        let (_, trace) = run_round(&fleet, &ids(&fleet), &cfg).unwrap();
        let order: Vec<u32> = trace
            .iter()
            .filter(|t| t.instr.as_deref() == Some("launch"))
            .map(|t| t.client.unwrap().0)
            .collect();
        assert_eq!(&order[..5], &[0, 3, 7, 1, 4]);
        let greedy = FleetConfig { scheduler_kind: SchedulerKind::Greedy, ..cfg };
        let (_, trace) = run_round(&fleet, &ids(&fleet), &greedy).unwrap();
        let order: Vec<u32> = trace
            .iter()
            .filter(|t| t.instr.as_deref() == Some("launch"))
            .map(|t| t.client.unwrap().0)
            .collect();
        assert_eq!(&order[..3], &[0, 1, 2]);
    }

    #[test]
    fn selection_is_seeded() {
        let fleet: Vec<ClientProfile> = (0..50).map(|i| client(i, 10, 1)).collect();
        let a = select_participants(&fleet, 10, 3, 0);
        assert_eq!(a, select_participants(&fleet, 10, 3, 0));
        assert_ne!(a, select_participants(&fleet, 10, 3, 1));
        let uniq: HashSet<_> = a.iter().collect();
        assert_eq!(uniq.len(), 10);
    }

    #[test]
    fn experiment_rejects_oversized_rounds() {
        let fleet = vec![client(0, 10, 1)];
        let cfg = FleetConfig { participants_per_round: 2, ..unit_config() };
        assert!(run_experiment(&cfg, &fleet, None).is_err());
    }

    #[test]
    fn one_round_one_client() {
        let fleet = vec![client(0, 50, 5)];
        let cfg = FleetConfig { participants_per_round: 1, ..unit_config() };
        let (rep, _) = run_experiment(&cfg, &fleet, None).unwrap();
        assert_eq!(rep.rounds.len(), 1);
        assert_eq!(rep.rounds[0].per_client.len(), 1);
    }

    #[test]
    fn async_aggregation_buffers_k_updates() {
        let fleet: Vec<ClientProfile> = (0..6).map(|i| {
            let mut p = client(i, 20 + 10 * i, 1);
            p.workload.num_samples = 100;
            p.workload.batch_size = 10;
            p
        }).collect();
        let fl = FlSetup::prepare(&fleet, &FlSettings::default(), 1).unwrap();
        let cfg = FleetConfig {
            participants_per_round: 6,
            aggregation: Aggregation::AsyncBuffered { k: 2 },
            ..unit_config()
        };
        let (rep, _) = run_experiment(&cfg, &fleet, Some(&fl)).unwrap();
        // initial point + 3 aggregations of 2
        assert_eq!(rep.accuracy.len(), 4);
        let times: Vec<f64> = rep.accuracy.iter().map(|p| p.time).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }
}
