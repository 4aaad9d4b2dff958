//! Length-prefixed JSON frames.
//!
//! Each frame is a 4-byte big-endian body length followed by a UTF-8 JSON
//! object whose `type` field names the message.

use std::io::{self, ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fl::DatasetShard;
use crate::profiles::{ClientId, WorkloadSpec};

/// Frames above this size are rejected before allocation.
pub const MAX_FRAME: usize = 256 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("connection closed inside a frame")]
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    /// Worker → coordinator, once per connection.
    Register {
        #[serde(default)]
        pid: Option<u32>,
    },
    /// Coordinator → worker: launch one client occupancy.
    TaskAssign {
        round: u32,
        executor_id: u32,
        client_id: ClientId,
        budget: u32,
        workload: WorkloadSpec,
        /// Wall seconds to emulate training for.
        sleep_s: f64,
        seed: u64,
        lr: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        params: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shard: Option<DatasetShard>,
    },
    /// Worker → coordinator.
    TrainingComplete { client_id: ClientId, timestamp: f64 },
    /// Worker → coordinator, after the upload acknowledgement.
    ModelUpload {
        client_id: ClientId,
        #[serde(default)]
        delta: Vec<f64>,
        num_samples: u64,
        timestamp: f64,
    },
    /// Coordinator → worker: no more tasks; exit.
    Terminate {},
    /// Coordinator → worker: acknowledgement carrying the next instruction.
    Ack {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        executor_id: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        instr: Option<String>,
    },
}

impl WireMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            WireMessage::Register { .. } => "register",
            WireMessage::TaskAssign { .. } => "task_assign",
            WireMessage::TrainingComplete { .. } => "training_complete",
            WireMessage::ModelUpload { .. } => "model_upload",
            WireMessage::Terminate {} => "terminate",
            WireMessage::Ack { .. } => "ack",
        }
    }
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let body = serde_json::to_vec(msg).expect("wire messages always serialize");
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    frame
}

pub fn decode_body(body: &[u8]) -> Result<WireMessage, WireError> {
    serde_json::from_slice(body).map_err(|e| WireError::Malformed(e.to_string()))
}

pub fn write_frame<W: Write>(w: &mut W, msg: &WireMessage) -> Result<(), WireError> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` means the peer closed cleanly between frames.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<WireMessage>, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(WireError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => WireError::Truncated,
        _ => WireError::Io(e),
    })?;
    decode_body(&body).map(Some)
}
