//! Live-mode coordinator.
//!
//! Every worker connection hosts one executor. A reader thread per
//! connection forwards decoded frames over a channel; the calling thread is
//! the single owner of the executor manager and the only writer to sockets,
//! so state transitions are linearized in channel order.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::{read_frame, write_frame, WireMessage};
use crate::cost_model::work_units;
use crate::engine::{select_participants, sync_aggregate, AccuracyPoint, ExperimentReport, FlSetup};
use crate::executor_manager::{ClientRequest, ExecutorManager, Instruction, InstructionKind, RequestKind};
use crate::fl::{FlError, ModelParams};
use crate::metrics::{round_report, AnalysisError};
use crate::profiles::{Aggregation, ClientId, ClientProfile, ConfigError, FleetConfig};
use crate::scheduler::{ExecutorId, Participant, ScheduleEntry};
use crate::trace::{EventKind, Trace, TraceRecord};

#[derive(Debug, Error)]
pub enum LiveError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("only {got} of {expected} workers registered before the deadline")]
    NotEnoughWorkers { expected: usize, got: usize },
    #[error("all workers are gone")]
    NoWorkers,
    #[error("no progress in round {round} for {secs} s")]
    Timeout { round: u32, secs: f64 },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Fl(#[from] FlError),
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub fleet: FleetConfig,
    /// Wall seconds per simulated second.
    pub time_dilation: f64,
    pub workers_expected: usize,
    pub accept_timeout: Duration,
    /// Longest wait for any message while a round is in flight.
    pub idle_timeout: Duration,
}

impl LiveConfig {
    pub fn new(fleet: FleetConfig, workers_expected: usize) -> Self {
        LiveConfig {
            fleet,
            time_dilation: 0.001,
            workers_expected,
            accept_timeout: Duration::from_secs(30),
            idle_timeout: Duration::from_secs(60),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.fleet.validate()?;
        if !(self.time_dilation > 0.0 && self.time_dilation.is_finite()) {
            return Err(ConfigError::invalid("live.time_dilation", "must be > 0"));
        }
        if self.workers_expected < 1 {
            return Err(ConfigError::invalid("live.workers_expected", "must be >= 1"));
        }
        if self.fleet.aggregation != Aggregation::Sync {
            return Err(ConfigError::invalid(
                "aggregation",
                "live mode supports sync aggregation only",
            ));
        }
        Ok(())
    }
}

/// One frame seen by the coordinator, for protocol auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireEvent {
    pub conn: u32,
    /// Wall seconds since the coordinator started accepting.
    pub t: f64,
    pub inbound: bool,
    pub msg_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<ClientId>,
}

#[derive(Debug, Clone)]
pub struct LiveOutcome {
    pub report: ExperimentReport,
    /// Trace with wall-clock times relative to each round's start.
    pub trace: Trace,
    pub wire_log: Vec<WireEvent>,
}

enum Event {
    Frame(u32, WireMessage),
    Closed(u32, String),
}

fn reader(conn: u32, mut stream: TcpStream, tx: Sender<Event>) {
    loop {
        match read_frame(&mut stream) {
            Ok(Some(m)) => {
                if tx.send(Event::Frame(conn, m)).is_err() {
                    return;
                }
            }
            Ok(None) => {
                let _ = tx.send(Event::Closed(conn, "closed".into()));
                return;
            }
            Err(e) => {
                let _ = tx.send(Event::Closed(conn, e.to_string()));
                return;
            }
        }
    }
}

struct Conn {
    stream: Option<TcpStream>,
    registered: bool,
}

struct Coordinator<'a> {
    cfg: &'a LiveConfig,
    fl: Option<&'a FlSetup>,
    by_id: HashMap<ClientId, &'a ClientProfile>,
    conns: Vec<Conn>,
    rx: Receiver<Event>,
    readers: Vec<JoinHandle<()>>,
    epoch: Instant,
    wire_log: Vec<WireEvent>,
}

fn client_of(m: &WireMessage) -> Option<ClientId> {
    match m {
        WireMessage::TaskAssign { client_id, .. }
        | WireMessage::TrainingComplete { client_id, .. }
        | WireMessage::ModelUpload { client_id, .. } => Some(*client_id),
        _ => None,
    }
}

impl<'a> Coordinator<'a> {
    fn log(&mut self, conn: u32, inbound: bool, m: &WireMessage) {
        self.wire_log.push(WireEvent {
            conn,
            t: self.epoch.elapsed().as_secs_f64(),
            inbound,
            msg_type: m.type_name().to_owned(),
            client: client_of(m),
        });
    }

    fn alive(&self) -> usize {
        self.conns.iter().filter(|c| c.stream.is_some()).count()
    }

    /// Sends a frame; a failed write closes the connection so its reader
    /// reports the loss through the normal channel.
    fn send(&mut self, conn: u32, m: &WireMessage) {
        self.log(conn, false, m);
        let Some(stream) = self.conns[conn as usize].stream.as_mut() else {
            return;
        };
        if let Err(e) = write_frame(stream, m) {
            warn!("write to worker {conn} failed: {e}");
            let _ = stream.shutdown(Shutdown::Both);
        }
    }

    fn drop_conn(&mut self, conn: u32) {
        if let Some(s) = self.conns[conn as usize].stream.take() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    fn accept(&mut self, listener: &TcpListener, tx: &Sender<Event>) -> Result<(), LiveError> {
        let expected = self.cfg.workers_expected;
        let deadline = Instant::now() + self.cfg.accept_timeout;
        listener.set_nonblocking(true)?;
        let mut registered = 0;
        while registered < expected {
            if Instant::now() > deadline {
                return Err(LiveError::NotEnoughWorkers { expected, got: registered });
            }
            if self.alive() < expected {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        stream.set_nonblocking(false)?;
                        stream.set_nodelay(true)?;
                        let conn = self.conns.len() as u32;
                        info!("worker {conn} connected from {peer}");
                        let read_half = stream.try_clone()?;
                        let tx = tx.clone();
                        self.readers.push(thread::spawn(move || reader(conn, read_half, tx)));
                        self.conns.push(Conn {
                            stream: Some(stream),
                            registered: false,
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {}
                    Err(e) => return Err(e.into()),
                }
            }
            match self.rx.recv_timeout(Duration::from_millis(5)) {
                Ok(Event::Frame(conn, m)) => {
                    self.log(conn, true, &m);
                    match m {
                        WireMessage::Register { .. } if !self.conns[conn as usize].registered => {
                            self.conns[conn as usize].registered = true;
                            registered += 1;
                            let ack = WireMessage::Ack {
                                executor_id: Some(conn),
                                instr: None,
                            };
                            self.send(conn, &ack);
                        }
                        other => {
                            warn!("worker {conn} sent {} before registering", other.type_name());
                            self.drop_conn(conn);
                        }
                    }
                }
                Ok(Event::Closed(conn, why)) => {
                    warn!("worker {conn} left during registration: {why}");
                    if self.conns[conn as usize].registered {
                        registered -= 1;
                    }
                    self.conns[conn as usize].registered = false;
                    self.drop_conn(conn);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => unreachable!("sender held locally"),
            }
        }
        Ok(())
    }

    /// Wall time a client would need running alone at its budget.
    fn sleep_for(&self, p: &ClientProfile) -> f64 {
        let work = work_units(&p.workload, &self.cfg.fleet.cost);
        let b = f64::from(p.resource_budget);
        let sim: f64 = p
            .demand_profile
            .phases()
            .iter()
            .map(|ph| work * ph.work_fraction / (b.min(ph.demand) / 100.0))
            .sum();
        sim * self.cfg.time_dilation
    }

    fn run_round(
        &mut self,
        r: u32,
        chosen: &[ClientId],
        global: Option<&ModelParams>,
    ) -> Result<(Trace, Vec<(ClientId, ModelParams, f64)>, bool), LiveError> {
        let fc = &self.cfg.fleet;
        let n_exec = self.conns.len();
        let mut mgr = ExecutorManager::new(n_exec, fc.scheduler_kind, fc.dynamic_parallelism);
        for conn in 0..n_exec {
            if self.conns[conn].stream.is_none() {
                mgr.abandon(ExecutorId(conn as u32));
            }
        }
        let profiles: Vec<&ClientProfile> = chosen.iter().map(|c| self.by_id[c]).collect();
        mgr.begin_round(profiles.iter().copied());
        let mut pending: Vec<Participant> = profiles
            .iter()
            .map(|p| Participant::new(p.client_id.0, p.resource_budget))
            .collect();
        let n = pending.len();
        let start = Instant::now();
        let mut rt = RoundLog {
            round: r,
            start,
            records: Vec::new(),
            running: BTreeMap::new(),
        };
        let mut updates = Vec::new();
        let mut retried: HashMap<ClientId, u32> = HashMap::new();
        let mut lost = 0usize;
        let mut uploaded = 0usize;
        let mut failed = false;

        let launches = mgr.start_round(&mut pending, n, fc.theta, 0.0);
        self.dispatch(&mut mgr, &mut rt, launches, global, r);

        while uploaded + lost < n || !mgr.all_idle() {
            if mgr.all_idle() && !pending.is_empty() {
                // nothing in flight and nothing launchable: the executors are gone
                if self.alive() == 0 {
                    return Err(LiveError::NoWorkers);
                }
                warn!("round {r}: {} clients cannot be placed", pending.len());
                lost += pending.len();
                pending.clear();
                failed = true;
                continue;
            }
            let ev = match self.rx.recv_timeout(self.cfg.idle_timeout) {
                Ok(ev) => ev,
                Err(_) => {
                    return Err(LiveError::Timeout {
                        round: r,
                        secs: self.cfg.idle_timeout.as_secs_f64(),
                    })
                }
            };
            let (conn, lost_reason) = match ev {
                Event::Frame(conn, m) => {
                    self.log(conn, true, &m);
                    let exec = ExecutorId(conn);
                    match m {
                        WireMessage::TrainingComplete { client_id, .. }
                            if mgr.executor_of(client_id) == Some(exec) =>
                        {
                            rt.push(EventKind::ClientTrainingComplete, |rec| rec.client(client_id).executor(exec));
                            match mgr.on_request(
                                ClientRequest { client_id, kind: RequestKind::TrainingComplete },
                                rt.now(),
                            ) {
                                Ok(instrs) => {
                                    rt.instructions(&mut mgr, &instrs);
                                    let ack = WireMessage::Ack {
                                        executor_id: Some(conn),
                                        instr: Some("upload_model".into()),
                                    };
                                    self.send(conn, &ack);
                                    continue;
                                }
                                Err(e) => (conn, e.to_string()),
                            }
                        }
                        WireMessage::ModelUpload { client_id, delta, num_samples, .. }
                            if mgr.executor_of(client_id) == Some(exec) =>
                        {
                            let budget = self.by_id[&client_id].resource_budget;
                            match mgr.on_request(
                                ClientRequest { client_id, kind: RequestKind::ModelUploaded },
                                rt.now(),
                            ) {
                                Ok(instrs) => {
                                    rt.running.remove(&client_id);
                                    rt.push(EventKind::ModelUploaded, |rec| {
                                        rec.client(client_id).executor(exec).budget(budget)
                                    });
                                    rt.instructions(&mut mgr, &instrs);
                                    rt.allocation();
                                    uploaded += 1;
                                    if global.is_some() {
                                        updates.push((client_id, ModelParams(delta), num_samples as f64));
                                    }
                                    mgr.finish_termination(exec).expect("slot is terminating");
                                    let ack = WireMessage::Ack {
                                        executor_id: Some(conn),
                                        instr: Some("terminate".into()),
                                    };
                                    self.send(conn, &ack);
                                    rt.push(EventKind::SlotFreed, |rec| rec.client(client_id).executor(exec));
                                    let launches = mgr.on_slot_freed(exec, &mut pending, n, fc.theta, rt.now());
                                    self.dispatch(&mut mgr, &mut rt, launches, global, r);
                                    continue;
                                }
                                Err(e) => (conn, e.to_string()),
                            }
                        }
                        other => (conn, format!("unexpected {} frame", other.type_name())),
                    }
                }
                Event::Closed(conn, why) => (conn, why),
            };

            // connection lost or protocol violation: retire the executor
            warn!("round {r}: dropping worker {conn}: {lost_reason}");
            self.drop_conn(conn);
            let exec = ExecutorId(conn);
            if let Some(p) = mgr.abandon(exec) {
                rt.running.remove(&p.client_id);
                rt.push(EventKind::ClientAbandoned, |rec| {
                    rec.client(p.client_id).executor(exec).budget(p.resource_budget)
                });
                rt.allocation();
                let tries = retried.entry(p.client_id).or_insert(0);
                if *tries == 0 {
                    *tries += 1;
                    pending.push(p);
                } else {
                    warn!("round {r}: client {} failed twice", p.client_id);
                    lost += 1;
                    failed = true;
                }
            }
            if self.alive() == 0 && (uploaded + lost < n) {
                return Err(LiveError::NoWorkers);
            }
            let launches = mgr.on_slot_freed(exec, &mut pending, n, fc.theta, rt.now());
            self.dispatch(&mut mgr, &mut rt, launches, global, r);
        }
        rt.push(EventKind::RoundComplete, |rec| rec);
        Ok((rt.records, updates, failed))
    }

    fn dispatch(
        &mut self,
        mgr: &mut ExecutorManager,
        rt: &mut RoundLog,
        launches: Vec<(ScheduleEntry, Instruction)>,
        global: Option<&ModelParams>,
        round: u32,
    ) {
        for (entry, instr) in launches {
            let p = self.by_id[&entry.client_id];
            let exec = entry.executor_id;
            let client = entry.client_id;
            rt.instructions(mgr, std::slice::from_ref(&instr));
            let (params, shard, lr) = match (self.fl, global) {
                (Some(f), Some(g)) => (Some(g.0.clone()), f.shards.get(&client).cloned(), f.lr),
                _ => (None, None, 0.0),
            };
            let msg = WireMessage::TaskAssign {
                round,
                executor_id: exec.0,
                client_id: client,
                budget: p.resource_budget,
                workload: p.workload.clone(),
                sleep_s: self.sleep_for(p),
                seed: self.cfg.fleet.seed,
                lr,
                params,
                shard,
            };
            self.send(exec.0, &msg);
            let demand = p.demand_profile.phases()[0].demand;
            rt.push(EventKind::ClientLaunched, |rec| {
                rec.client(client).executor(exec).budget(p.resource_budget).demand(demand)
            });
            let instrs = mgr
                .on_request(ClientRequest { client_id: client, kind: RequestKind::Register }, rt.now())
                .expect("freshly launched slot accepts register");
            rt.instructions(mgr, &instrs);
            let peak = p.demand_profile.phases().iter().map(|ph| ph.demand).fold(0.0, f64::max);
            rt.running.insert(client, f64::from(p.resource_budget).min(peak));
            rt.allocation();
        }
    }
}

struct RoundLog {
    round: u32,
    start: Instant,
    records: Trace,
    /// Share each running client emulates (solo at its budget).
    running: BTreeMap<ClientId, f64>,
}

impl RoundLog {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn push(&mut self, kind: EventKind, f: impl FnOnce(TraceRecord) -> TraceRecord) {
        let rec = f(TraceRecord::new(self.round, self.now(), kind));
        self.records.push(rec);
    }

    fn instructions(&mut self, mgr: &mut ExecutorManager, instrs: &[Instruction]) {
        for i in instrs {
            let budget = match i.kind {
                InstructionKind::Launch { budget, .. } => Some(budget),
                _ => None,
            };
            self.push(EventKind::Instruction, |rec| {
                let rec = rec.client(i.client_id).executor(i.executor_id).instr(i.kind.name());
                match budget {
                    Some(b) => rec.budget(b),
                    None => rec,
                }
            });
            mgr.table_mut().pop(i.executor_id);
        }
    }

    fn allocation(&mut self) {
        let a = self.running.clone();
        self.push(EventKind::Allocation, |rec| rec.alloc(a));
    }
}

/// Serves one experiment on an already-bound listener. Returns after every
/// round finished and all workers were told to terminate.
pub fn coordinator_serve(
    listener: TcpListener,
    cfg: &LiveConfig,
    fleet: &[ClientProfile],
    fl: Option<&FlSetup>,
) -> Result<LiveOutcome, LiveError> {
    cfg.validate()?;
    cfg.fleet.validate_for(fleet)?;
    if let Some(p) = fleet.iter().find(|p| f64::from(p.resource_budget) > cfg.fleet.theta) {
        return Err(ConfigError::invalid(
            "theta",
            format!("client {} has budget {} above theta", p.client_id, p.resource_budget),
        )
        .into());
    }
    let (tx, rx) = mpsc::channel();
    let mut co = Coordinator {
        cfg,
        fl,
        by_id: fleet.iter().map(|p| (p.client_id, p)).collect(),
        conns: Vec::new(),
        rx,
        readers: Vec::new(),
        epoch: Instant::now(),
        wire_log: Vec::new(),
    };
    co.accept(&listener, &tx)?;
    drop(tx);
    info!("{} workers registered", co.alive());

    let mut global = fl.map(|f| f.init.clone());
    let mut curve = Vec::new();
    if let (Some(f), Some(g)) = (fl, &global) {
        curve.push(AccuracyPoint { round: 0, time: 0.0, accuracy: f.test_accuracy(g) });
    }
    let mut trace = Vec::new();
    let mut rounds = Vec::new();
    let mut failed_rounds = Vec::new();
    let mut offset = 0.0;
    let mut result = Ok(());
    for r in 0..cfg.fleet.rounds as u32 {
        let chosen = select_participants(fleet, cfg.fleet.participants_per_round, cfg.fleet.seed, r);
        let (records, updates, failed) = match co.run_round(r, &chosen, global.as_ref()) {
            Ok(x) => x,
            Err(e) => {
                result = Err(e);
                break;
            }
        };
        let report = round_report(&records)?;
        if failed {
            failed_rounds.push(r);
        }
        if let (Some(f), Some(g)) = (fl, global.as_mut()) {
            *g = sync_aggregate(g, updates)?;
            curve.push(AccuracyPoint {
                round: r,
                time: offset + report.makespan,
                accuracy: f.test_accuracy(g),
            });
        }
        offset += records.last().map_or(0.0, |rec| rec.t);
        trace.extend(records);
        rounds.push(report);
    }

    for conn in 0..co.conns.len() as u32 {
        if co.conns[conn as usize].stream.is_some() {
            co.send(conn, &WireMessage::Terminate {});
            if let Some(s) = &co.conns[conn as usize].stream {
                let _ = s.shutdown(Shutdown::Write);
            }
        }
    }
    // readers finish once each worker closes its end
    for h in co.readers.drain(..) {
        let _ = h.join();
    }
    while let Ok(ev) = co.rx.try_recv() {
        if let Event::Frame(conn, m) = ev {
            co.log(conn, true, &m);
        }
    }
    result?;
    Ok(LiveOutcome {
        report: ExperimentReport {
            rounds,
            accuracy: curve,
            total_time: offset,
            failed_rounds,
            final_params: global,
        },
        trace,
        wire_log: co.wire_log,
    })
}

pub fn coordinator_bind(
    addr: &str,
    cfg: &LiveConfig,
    fleet: &[ClientProfile],
    fl: Option<&FlSetup>,
) -> Result<LiveOutcome, LiveError> {
    let listener = TcpListener::bind(addr)?;
    info!("listening on {}", listener.local_addr()?);
    coordinator_serve(listener, cfg, fleet, fl)
}

/// Checks that every connection followed
/// `register (task_assign training_complete model_upload)* terminate`,
/// ignoring acknowledgements. A connection that was dropped may end early,
/// even mid-occupancy.
pub fn verify_lifecycle(log: &[WireEvent]) -> Result<(), String> {
    let mut per_conn: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for e in log.iter().filter(|e| e.msg_type != "ack") {
        per_conn.entry(e.conn).or_default().push(e.msg_type.as_str());
    }
    const CYCLE: [&str; 3] = ["task_assign", "training_complete", "model_upload"];
    for (conn, seq) in per_conn {
        let fail = |why: &str| Err(format!("connection {conn}: {why}: {seq:?}"));
        if seq.first() != Some(&"register") {
            return fail("does not start with register");
        }
        let body = &seq[1..];
        let (body, terminated) = match body.last() {
            Some(&"terminate") => (&body[..body.len() - 1], true),
            _ => (body, false),
        };
        for (i, m) in body.iter().enumerate() {
            if *m != CYCLE[i % 3] {
                return fail("out of lifecycle order");
            }
        }
        if terminated && body.len() % 3 != 0 {
            return fail("terminated mid-occupancy");
        }
    }
    Ok(())
}
