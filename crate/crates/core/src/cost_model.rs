//! Parametric cost model and capped max-min allocation.
//!
//! Work is measured in seconds at full device capacity. A client holding
//! `assigned` percent of the device progresses at `assigned / 100` work
//! units per second.

use serde::{Deserialize, Serialize};

use crate::profiles::{ConfigError, WorkloadSpec};

/// Physical capacity of the shared device, in percent.
pub const CAPACITY: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    /// Seconds per (layer x token x sample) at full capacity.
    pub alpha: f64,
    /// Fixed seconds per layer per batch at full capacity.
    pub beta: f64,
}

impl Default for CostCoefficients {
    fn default() -> Self {
        CostCoefficients {
            alpha: 2e-6,
            beta: 1e-3,
        }
    }
}

impl CostCoefficients {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ConfigError::invalid("cost.alpha", "must be > 0"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ConfigError::invalid("cost.beta", "must be >= 0"));
        }
        Ok(())
    }
}

/// Total work of one local training job, in seconds at full capacity.
///
/// Per-token compute is charged for the samples actually processed, so a
/// short final batch costs only its own samples plus the per-batch overhead.
/// When the batch size divides the sample count this equals
/// `batches * (alpha*layers*seq_len*batch_size + beta*layers) * factor`.
pub fn work_units(w: &WorkloadSpec, c: &CostCoefficients) -> f64 {
    let layers = f64::from(w.model_layers);
    let compute = c.alpha * layers * f64::from(w.seq_len) * w.num_samples as f64;
    let overhead = c.beta * layers * w.num_batches() as f64;
    (compute + overhead) * w.extra_model_factor
}

/// Progress rate of a client holding `assigned` percent of the device.
pub fn rate(assigned: f64) -> f64 {
    assigned / CAPACITY
}

/// Per-client shares produced by [`maxmin_allocate`], in input order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Allocation {
    pub shares: Vec<f64>,
}

impl Allocation {
    pub fn total(&self) -> f64 {
        self.shares.iter().sum()
    }
}

/// Water-filling allocation of `capacity` among clients capped at
/// `min(caps[i], demands[i])`.
///
/// All unfrozen clients rise together; a client freezes at its effective
/// cap. The result is the max-min fair point of the capped simplex.
pub fn maxmin_allocate(caps: &[f64], demands: &[f64], capacity: f64) -> Allocation {
    assert_eq!(caps.len(), demands.len(), "caps and demands differ in length");
    let n = caps.len();
    let limits: Vec<f64> = caps.iter().zip(demands).map(|(c, d)| c.min(*d)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| limits[a].total_cmp(&limits[b]).then(a.cmp(&b)));

    let mut shares = vec![0.0; n];
    let mut remaining = capacity;
    for (pos, &i) in order.iter().enumerate() {
        let unfrozen = (n - pos) as f64;
        let level = remaining / unfrozen;
        if limits[i] <= level {
            shares[i] = limits[i];
            remaining -= limits[i];
        } else {
            // Every client from here on is capped above the common level.
            for &j in &order[pos..] {
                shares[j] = level;
            }
            break;
        }
    }
    Allocation { shares }
}
