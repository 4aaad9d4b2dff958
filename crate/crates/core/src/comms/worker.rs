//! Live-mode worker: one long-lived executor host.
//!
//! Per occupancy the worker receives `task_assign`, emulates training by
//! sleeping for the assigned wall time (computing the real model update
//! first when data is attached), reports `training_complete`, waits for the
//! upload acknowledgement, sends `model_upload` and waits for the terminate
//! acknowledgement. A bare `terminate` frame ends the process loop.

use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use thiserror::Error;

use super::wire::{read_frame, write_frame, WireError, WireMessage};
use crate::fl::{local_train, ModelParams};
use crate::rng::{keyed_rng, Stream};

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("could not reach coordinator at {addr} after {attempts} attempts: {last}")]
    Unreachable { addr: String, attempts: u32, last: String },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("coordinator closed the connection")]
    ConnectionLost,
    #[error("unexpected {got} while waiting for {expected}")]
    Protocol { expected: &'static str, got: String },
}

#[derive(Debug, Clone, Copy)]
pub struct WorkerOptions {
    pub connect_attempts: u32,
    pub retry_delay: Duration,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        WorkerOptions {
            connect_attempts: 50,
            retry_delay: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorkerSummary {
    pub executor_id: Option<u32>,
    pub tasks: usize,
}

fn connect(addr: &str, opts: &WorkerOptions) -> Result<TcpStream, WorkerError> {
    let mut last = String::from("no attempt made");
    for attempt in 0..opts.connect_attempts.max(1) {
        if attempt > 0 {
            thread::sleep(opts.retry_delay);
        }
        let resolved = match addr.to_socket_addrs() {
            Ok(a) => a.collect::<Vec<_>>(),
            Err(e) => {
                last = e.to_string();
                continue;
            }
        };
        match TcpStream::connect(&resolved[..]) {
            Ok(s) => return Ok(s),
            Err(e) => last = e.to_string(),
        }
    }
    Err(WorkerError::Unreachable {
        addr: addr.to_owned(),
        attempts: opts.connect_attempts.max(1),
        last,
    })
}

fn expect_ack(stream: &mut TcpStream, instr: &'static str) -> Result<WireMessage, WorkerError> {
    match read_frame(stream)? {
        Some(m @ WireMessage::Ack { .. }) => match &m {
            WireMessage::Ack { instr: Some(i), .. } if i != instr => Err(WorkerError::Protocol {
                expected: instr,
                got: format!("ack({i})"),
            }),
            _ => Ok(m),
        },
        Some(other) => Err(WorkerError::Protocol {
            expected: instr,
            got: other.type_name().to_owned(),
        }),
        None => Err(WorkerError::ConnectionLost),
    }
}

/// Connects, registers and serves tasks until told to terminate.
pub fn worker_run(addr: &str, opts: &WorkerOptions) -> Result<WorkerSummary, WorkerError> {
    let mut stream = connect(addr, opts)?;
    stream.set_nodelay(true).ok();
    let started = Instant::now();
    write_frame(
        &mut stream,
        &WireMessage::Register {
            pid: Some(std::process::id()),
        },
    )?;
    let mut summary = WorkerSummary::default();
    if let WireMessage::Ack { executor_id, .. } = expect_ack(&mut stream, "register")? {
        summary.executor_id = executor_id;
    }
    info!("registered as executor {:?}", summary.executor_id);

    loop {
        let msg = read_frame(&mut stream)?.ok_or(WorkerError::ConnectionLost)?;
        match msg {
            WireMessage::Terminate {} => {
                info!("terminate after {} tasks", summary.tasks);
                return Ok(summary);
            }
            WireMessage::TaskAssign {
                round,
                client_id,
                budget,
                workload,
                sleep_s,
                seed,
                lr,
                params,
                shard,
                ..
            } => {
                info!("task_assign round={round} client={client_id} budget={budget} sleep={sleep_s:.4}");
                let t0 = Instant::now();
                let delta = match (params, shard) {
                    (Some(p), Some(shard)) => {
                        let key = (u64::from(round) << 32) | u64::from(client_id.0);
                        let mut rng = keyed_rng(seed, Stream::Training, key);
                        local_train(&ModelParams(p), &shard, &workload, lr, &mut rng).0
                    }
                    (Some(p), None) => vec![0.0; p.len()],
                    _ => Vec::new(),
                };
                let left = sleep_s - t0.elapsed().as_secs_f64();
                if left > 0.0 {
                    thread::sleep(Duration::from_secs_f64(left));
                } else if sleep_s > 0.0 {
                    warn!("model update took longer than the emulated training time");
                }
                write_frame(
                    &mut stream,
                    &WireMessage::TrainingComplete {
                        client_id,
                        timestamp: started.elapsed().as_secs_f64(),
                    },
                )?;
                expect_ack(&mut stream, "upload_model")?;
                write_frame(
                    &mut stream,
                    &WireMessage::ModelUpload {
                        client_id,
                        delta,
                        num_samples: workload.num_samples,
                        timestamp: started.elapsed().as_secs_f64(),
                    },
                )?;
                expect_ack(&mut stream, "terminate")?;
                summary.tasks += 1;
            }
            other => {
                return Err(WorkerError::Protocol {
                    expected: "task_assign or terminate",
                    got: other.type_name().to_owned(),
                })
            }
        }
    }
}
