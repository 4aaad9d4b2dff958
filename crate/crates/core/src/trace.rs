//! Simulation events and the JSON-lines trace format.
//!
//! One record per line:
//!
//! ```text
//! {"round":0,"t":0.0,"kind":"instruction","client":3,"executor":1,"budget":80,"instr":"launch"}
//! {"round":0,"t":0.0,"kind":"allocation","alloc":{"0":10.0,"3":80.0}}
//! ```
//!
//! `t` is seconds since the start of the record's round.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::profiles::ClientId;
use crate::scheduler::ExecutorId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PhaseCompleted,
    ClientTrainingComplete,
    ModelUploaded,
    SlotFreed,
    ClientLaunched,
    RoundComplete,
    /// An instruction appended to the record table.
    Instruction,
    /// The allocation in force from `t` until the next allocation record.
    Allocation,
    /// Live mode: the executor hosting the client died before upload.
    ClientAbandoned,
}

impl EventKind {
    /// Rank used to order simultaneous events.
    pub fn rank(self) -> u8 {
        match self {
            EventKind::PhaseCompleted => 0,
            EventKind::ClientTrainingComplete => 1,
            EventKind::ModelUploaded => 2,
            EventKind::SlotFreed => 3,
            EventKind::ClientLaunched => 4,
            EventKind::RoundComplete => 5,
            EventKind::Instruction => 6,
            EventKind::Allocation => 7,
            EventKind::ClientAbandoned => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: u32,
    pub t: f64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<ClientId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executor: Option<ExecutorId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u32>,
    /// Demand of the phase a client enters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alloc: Option<BTreeMap<ClientId, f64>>,
}

impl TraceRecord {
    pub fn new(round: u32, t: f64, kind: EventKind) -> Self {
        TraceRecord {
            round,
            t,
            kind,
            client: None,
            executor: None,
            budget: None,
            demand: None,
            instr: None,
            alloc: None,
        }
    }

    pub fn client(mut self, c: ClientId) -> Self {
        self.client = Some(c);
        self
    }

    pub fn executor(mut self, e: ExecutorId) -> Self {
        self.executor = Some(e);
        self
    }

    pub fn budget(mut self, b: u32) -> Self {
        self.budget = Some(b);
        self
    }

    pub fn demand(mut self, d: f64) -> Self {
        self.demand = Some(d);
        self
    }

    pub fn instr(mut self, name: &str) -> Self {
        self.instr = Some(name.to_owned());
        self
    }

    pub fn alloc(mut self, a: BTreeMap<ClientId, f64>) -> Self {
        self.alloc = Some(a);
        self
    }
}

pub type Trace = Vec<TraceRecord>;

pub fn write_jsonl<W: Write>(mut w: W, trace: &[TraceRecord]) -> std::io::Result<()> {
    for rec in trace {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead>(r: R) -> std::io::Result<Trace> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Records of one round, in trace order.
pub fn round_records(trace: &[TraceRecord], round: u32) -> Vec<TraceRecord> {
    trace.iter().filter(|r| r.round == round).cloned().collect()
}
