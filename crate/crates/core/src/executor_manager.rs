//! Dynamic process manager.
//!
//! Each executor slot hosts at most one client occupancy at a time. An
//! occupancy's budget is fixed at launch and never changes; serving another
//! client means terminating the occupancy and launching a fresh one. The
//! record table keeps one FIFO instruction queue per slot.
//!
//! Per occupancy the instruction sequence is always
//! `Launch, StartTraining, UploadModel, Terminate`.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{ClientId, ClientProfile, SchedulerKind, WorkloadSpec};
use crate::scheduler::{schedule, ExecutorId, Participant, ScheduleEntry, SchedulerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Lifecycle {
    Idle,
    Launching { client_id: ClientId, budget: u32 },
    Running { client_id: ClientId, budget: u32 },
    Terminating { client_id: ClientId, budget: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutorSlot {
    pub executor_id: ExecutorId,
    pub lifecycle: Lifecycle,
    /// Number of occupancies this slot has started.
    pub occupancy: u64,
    training_done: bool,
}

impl ExecutorSlot {
    fn new(executor_id: ExecutorId) -> Self {
        ExecutorSlot {
            executor_id,
            lifecycle: Lifecycle::Idle,
            occupancy: 0,
            training_done: false,
        }
    }

    /// Budget held by the slot while launching or running.
    pub fn active_budget(&self) -> Option<u32> {
        match self.lifecycle {
            Lifecycle::Launching { budget, .. } | Lifecycle::Running { budget, .. } => Some(budget),
            _ => None,
        }
    }

    pub fn client(&self) -> Option<ClientId> {
        match self.lifecycle {
            Lifecycle::Idle => None,
            Lifecycle::Launching { client_id, .. }
            | Lifecycle::Running { client_id, .. }
            | Lifecycle::Terminating { client_id, .. } => Some(client_id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InstructionKind {
    Launch {
        client_id: ClientId,
        budget: u32,
        workload: WorkloadSpec,
    },
    StartTraining,
    UploadModel,
    Terminate,
}

impl InstructionKind {
    pub fn name(&self) -> &'static str {
        match self {
            InstructionKind::Launch { .. } => "launch",
            InstructionKind::StartTraining => "start_training",
            InstructionKind::UploadModel => "upload_model",
            InstructionKind::Terminate => "terminate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub executor_id: ExecutorId,
    pub client_id: ClientId,
    pub kind: InstructionKind,
    pub issued_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestKind {
    Register,
    TrainingComplete,
    ModelUploaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientRequest {
    pub client_id: ClientId,
    pub kind: RequestKind,
}

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("client {0} holds no executor")]
    NoSlot(ClientId),
    #[error("client {client} sent {kind:?} out of order")]
    OutOfOrder { client: ClientId, kind: RequestKind },
    #[error("executor {0} is not terminating")]
    NotTerminating(ExecutorId),
    #[error("unknown executor {0}")]
    UnknownExecutor(ExecutorId),
}

/// Per-executor FIFO queues of instructions awaiting delivery.
#[derive(Debug, Clone, Default)]
pub struct RecordTable {
    rows: BTreeMap<ExecutorId, VecDeque<Instruction>>,
    capacity: usize,
}

impl RecordTable {
    pub fn new(capacity: usize) -> Self {
        RecordTable {
            rows: BTreeMap::new(),
            capacity,
        }
    }

    fn push(&mut self, instr: Instruction) {
        debug_assert!(self.rows.len() < self.capacity || self.rows.contains_key(&instr.executor_id));
        self.rows.entry(instr.executor_id).or_default().push_back(instr);
    }

    pub fn pop(&mut self, executor: ExecutorId) -> Option<Instruction> {
        self.rows.get_mut(&executor)?.pop_front()
    }

    pub fn drain(&mut self, executor: ExecutorId) -> Vec<Instruction> {
        self.rows
            .get_mut(&executor)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default()
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn pending(&self, executor: ExecutorId) -> usize {
        self.rows.get(&executor).map_or(0, VecDeque::len)
    }
}

/// Single-owner manager state: slots, record table and scheduler state.
#[derive(Debug, Clone)]
pub struct ExecutorManager {
    slots: Vec<ExecutorSlot>,
    table: RecordTable,
    sched: SchedulerState,
    kind: SchedulerKind,
    dynamic: bool,
    by_client: HashMap<ClientId, ExecutorId>,
    workloads: HashMap<ClientId, WorkloadSpec>,
    launched: HashSet<ClientId>,
}

impl ExecutorManager {
    pub fn new(max_executors: usize, kind: SchedulerKind, dynamic_parallelism: bool) -> Self {
        ExecutorManager {
            slots: (0..max_executors as u32)
                .map(|i| ExecutorSlot::new(ExecutorId(i)))
                .collect(),
            table: RecordTable::new(max_executors),
            sched: SchedulerState::with_executors(max_executors),
            kind,
            dynamic: dynamic_parallelism,
            by_client: HashMap::new(),
            workloads: HashMap::new(),
            launched: HashSet::new(),
        }
    }

    /// Resets per-round counters. `participants` provides the workloads
    /// that `Launch` instructions carry.
    pub fn begin_round<'a>(&mut self, participants: impl IntoIterator<Item = &'a ClientProfile>) {
        self.sched.planned_count = 0;
        self.launched.clear();
        self.workloads = participants
            .into_iter()
            .map(|p| (p.client_id, p.workload.clone()))
            .collect();
    }

    pub fn slots(&self) -> &[ExecutorSlot] {
        &self.slots
    }

    pub fn slot(&self, executor: ExecutorId) -> Option<&ExecutorSlot> {
        self.slots.get(executor.0 as usize)
    }

    pub fn table(&self) -> &RecordTable {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut RecordTable {
        &mut self.table
    }

    pub fn scheduler_state(&self) -> &SchedulerState {
        &self.sched
    }

    pub fn executor_of(&self, client: ClientId) -> Option<ExecutorId> {
        self.by_client.get(&client).copied()
    }

    /// Sum of budgets over slots that are launching or running.
    pub fn active_budget(&self) -> u32 {
        self.slots.iter().filter_map(ExecutorSlot::active_budget).sum()
    }

    pub fn busy_slots(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.lifecycle != Lifecycle::Idle)
            .count()
    }

    pub fn all_idle(&self) -> bool {
        self.busy_slots() == 0
    }

    /// Launches the first batch of a round. Any number of idle executors
    /// may be used, in either parallelism mode.
    pub fn start_round(
        &mut self,
        pending: &mut Vec<Participant>,
        n: usize,
        theta: f64,
        now: f64,
    ) -> Vec<(ScheduleEntry, Instruction)> {
        self.launch(pending, n, theta, now, usize::MAX)
    }

    /// Runs the scheduler after `executor` became idle. With dynamic
    /// parallelism any number of slots may launch; otherwise at most one.
    pub fn on_slot_freed(
        &mut self,
        executor: ExecutorId,
        pending: &mut Vec<Participant>,
        n: usize,
        theta: f64,
        now: f64,
    ) -> Vec<(ScheduleEntry, Instruction)> {
        debug_assert!(self
            .slot(executor)
            .is_some_and(|s| s.lifecycle == Lifecycle::Idle));
        let limit = if self.dynamic { usize::MAX } else { 1 };
        self.launch(pending, n, theta, now, limit)
    }

    fn launch(
        &mut self,
        pending: &mut Vec<Participant>,
        n: usize,
        theta: f64,
        now: f64,
        limit: usize,
    ) -> Vec<(ScheduleEntry, Instruction)> {
        if pending.is_empty() {
            return Vec::new();
        }
        // Offer at most `limit` executors; unused ones go back in order.
        let offered = limit.min(self.sched.available_executors.len());
        let held_back: VecDeque<ExecutorId> = self.sched.available_executors.split_off(offered);
        let entries = schedule(self.kind, &mut self.sched, pending, n, theta);
        self.sched.available_executors.extend(held_back);

        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            pending.retain(|p| p.client_id != e.client_id);
            let fresh = self.launched.insert(e.client_id);
            debug_assert!(fresh, "client {} launched twice in a round", e.client_id);
            let slot = &mut self.slots[e.executor_id.0 as usize];
            debug_assert_eq!(slot.lifecycle, Lifecycle::Idle);
            slot.lifecycle = Lifecycle::Launching {
                client_id: e.client_id,
                budget: e.resource_budget,
            };
            slot.occupancy += 1;
            slot.training_done = false;
            self.by_client.insert(e.client_id, e.executor_id);
            let instr = Instruction {
                executor_id: e.executor_id,
                client_id: e.client_id,
                kind: InstructionKind::Launch {
                    client_id: e.client_id,
                    budget: e.resource_budget,
                    workload: self.workloads.get(&e.client_id).cloned().unwrap_or_default(),
                },
                issued_at: now,
            };
            self.table.push(instr.clone());
            out.push((e, instr));
        }
        out
    }

    /// Status monitor: turns a client request into the next instruction.
    pub fn on_request(
        &mut self,
        req: ClientRequest,
        now: f64,
    ) -> Result<Vec<Instruction>, ProtocolError> {
        let executor = *self
            .by_client
            .get(&req.client_id)
            .ok_or(ProtocolError::NoSlot(req.client_id))?;
        let slot = &mut self.slots[executor.0 as usize];
        let out_of_order = ProtocolError::OutOfOrder {
            client: req.client_id,
            kind: req.kind,
        };
        let kind = match (req.kind, &slot.lifecycle) {
            (RequestKind::Register, Lifecycle::Launching { client_id, budget }) => {
                slot.lifecycle = Lifecycle::Running {
                    client_id: *client_id,
                    budget: *budget,
                };
                InstructionKind::StartTraining
            }
            (RequestKind::TrainingComplete, Lifecycle::Running { .. }) if !slot.training_done => {
                slot.training_done = true;
                InstructionKind::UploadModel
            }
            (RequestKind::ModelUploaded, Lifecycle::Running { client_id, budget })
                if slot.training_done =>
            {
                slot.lifecycle = Lifecycle::Terminating {
                    client_id: *client_id,
                    budget: *budget,
                };
                InstructionKind::Terminate
            }
            _ => return Err(out_of_order),
        };
        let instr = Instruction {
            executor_id: executor,
            client_id: req.client_id,
            kind,
            issued_at: now,
        };
        self.table.push(instr.clone());
        Ok(vec![instr])
    }

    /// Completes a termination: the slot becomes idle, its budget is
    /// released and the executor rejoins the available queue.
    pub fn finish_termination(&mut self, executor: ExecutorId) -> Result<ClientId, ProtocolError> {
        let slot = self
            .slots
            .get_mut(executor.0 as usize)
            .ok_or(ProtocolError::UnknownExecutor(executor))?;
        let Lifecycle::Terminating { client_id, budget } = slot.lifecycle else {
            return Err(ProtocolError::NotTerminating(executor));
        };
        slot.lifecycle = Lifecycle::Idle;
        self.by_client.remove(&client_id);
        self.sched.release(budget);
        self.sched.available_executors.push_back(executor);
        Ok(client_id)
    }

    /// Forcibly vacates a slot whose process died. The executor is retired
    /// (not returned to the available queue) and the client may be
    /// launched again this round.
    pub fn abandon(&mut self, executor: ExecutorId) -> Option<Participant> {
        let slot = self.slots.get_mut(executor.0 as usize)?;
        let (client_id, budget) = match slot.lifecycle {
            Lifecycle::Idle => {
                self.sched.available_executors.retain(|e| *e != executor);
                return None;
            }
            Lifecycle::Launching { client_id, budget }
            | Lifecycle::Running { client_id, budget }
            | Lifecycle::Terminating { client_id, budget } => (client_id, budget),
        };
        slot.lifecycle = Lifecycle::Idle;
        self.sched.available_executors.retain(|e| *e != executor);
        self.by_client.remove(&client_id);
        self.sched.release(budget);
        self.sched.planned_count = self.sched.planned_count.saturating_sub(1);
        self.launched.remove(&client_id);
        self.table.drain(executor);
        Some(Participant {
            client_id,
            resource_budget: budget,
        })
    }
}
