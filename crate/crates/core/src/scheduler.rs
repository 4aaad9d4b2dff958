//! Client schedulers.
//!
//! Both schedulers are pure transitions over [`SchedulerState`]: they pick
//! which pending participants launch now and pop an executor for each.
//!
//! The resource-aware scheduler sorts pending clients by budget and pulls
//! alternately from the small end (left) and the large end (right). A
//! rejected right candidate disables the right pointer for the rest of the
//! call; a rejected left candidate ends the call. The greedy baseline takes
//! clients in queue order and stops at the first one that does not fit.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::profiles::{ClientId, SchedulerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExecutorId(pub u32);

impl fmt::Display for ExecutorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub client_id: ClientId,
    pub resource_budget: u32,
}

impl Participant {
    pub fn new(client_id: u32, resource_budget: u32) -> Self {
        Participant {
            client_id: ClientId(client_id),
            resource_budget,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub client_id: ClientId,
    pub resource_budget: u32,
    pub executor_id: ExecutorId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchedulerState {
    /// Budgets of clients currently holding an executor.
    pub running_budgets: Vec<u32>,
    /// Participants scheduled so far in the current round.
    pub planned_count: usize,
    pub available_executors: VecDeque<ExecutorId>,
}

impl SchedulerState {
    pub fn with_executors(n: usize) -> Self {
        SchedulerState {
            available_executors: (0..n as u32).map(ExecutorId).collect(),
            ..Default::default()
        }
    }

    pub fn running_total(&self) -> u32 {
        self.running_budgets.iter().sum()
    }

    fn may_continue(&self, n: usize, theta: f64) -> bool {
        self.planned_count < n && f64::from(self.running_total()) < theta
    }

    /// Accepts `p` if it fits under `theta` and an executor is free.
    fn try_accept(&mut self, p: &Participant, theta: f64) -> Option<ScheduleEntry> {
        let fits = f64::from(p.resource_budget + self.running_total()) <= theta;
        if !fits {
            return None;
        }
        let executor_id = self.available_executors.pop_front()?;
        self.running_budgets.push(p.resource_budget);
        self.planned_count += 1;
        Some(ScheduleEntry {
            client_id: p.client_id,
            resource_budget: p.resource_budget,
            executor_id,
        })
    }

    /// Drops one running budget, e.g. when its executor becomes idle.
    pub fn release(&mut self, budget: u32) -> bool {
        match self.running_budgets.iter().position(|b| *b == budget) {
            Some(i) => {
                self.running_budgets.swap_remove(i);
                true
            }
            None => false,
        }
    }
}

/// Double-pointer resource-aware scheduling. Entries are returned in
/// acceptance order.
pub fn schedule_resource_aware(
    state: &mut SchedulerState,
    pending: &[Participant],
    n: usize,
    theta: f64,
) -> Vec<ScheduleEntry> {
    let mut sorted = pending.to_vec();
    sorted.sort_by_key(|p| (p.resource_budget, p.client_id));

    let mut out = Vec::new();
    if sorted.is_empty() {
        return out;
    }
    let mut left = 0usize;
    let mut right = sorted.len() - 1;
    let mut right_active = true;

    while state.may_continue(n, theta) {
        if left > right {
            break;
        }
        match state.try_accept(&sorted[left], theta) {
            Some(e) => {
                out.push(e);
                left += 1;
            }
            None => break,
        }
        if !state.may_continue(n, theta) || left > right {
            break;
        }
        if right_active {
            match state.try_accept(&sorted[right], theta) {
                Some(e) => {
                    out.push(e);
                    // left <= right here, and right == left - 1 ends the loop
                    if right == 0 {
                        break;
                    }
                    right -= 1;
                }
                None => right_active = false,
            }
        }
    }
    out
}

/// FIFO scheduling with head-of-line blocking.
pub fn schedule_greedy(
    state: &mut SchedulerState,
    pending: &[Participant],
    n: usize,
    theta: f64,
) -> Vec<ScheduleEntry> {
    let mut out = Vec::new();
    for p in pending {
        if !state.may_continue(n, theta) {
            break;
        }
        match state.try_accept(p, theta) {
            Some(e) => out.push(e),
            None => break,
        }
    }
    out
}

pub fn schedule(
    kind: SchedulerKind,
    state: &mut SchedulerState,
    pending: &[Participant],
    n: usize,
    theta: f64,
) -> Vec<ScheduleEntry> {
    match kind {
        SchedulerKind::Greedy => schedule_greedy(state, pending, n, theta),
        SchedulerKind::ResourceAware => schedule_resource_aware(state, pending, n, theta),
    }
}
