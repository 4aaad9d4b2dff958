//! Desk-scale federated learning.
//!
//! Synthetic Gaussian-cluster data, Dirichlet non-IID partitioning, a
//! multinomial logistic model trained with mini-batch SGD, and FedAvg.
//! `seq_len` and `model_layers` shape only simulated time; they do not
//! change the model.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::{ClientId, WorkloadSpec};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum FlError {
    #[error("aggregation: {0}")]
    Aggregation(String),
    #[error("partition: {0}")]
    Partition(String),
}

/// Flat parameter vector: `classes x features` weights (row-major by
/// class) followed by `classes` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(pub Vec<f64>);

impl ModelParams {
    pub fn zeros(features: usize, classes: usize) -> Self {
        ModelParams(vec![0.0; features * classes + classes])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, delta: &ModelParams) -> ModelParams {
        ModelParams(self.0.iter().zip(&delta.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &ModelParams) -> ModelParams {
        ModelParams(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: usize,
    pub classes: usize,
    /// Row-major, `len() * features` values.
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn empty(features: usize, classes: usize) -> Self {
        Dataset {
            features,
            classes,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    fn push(&mut self, row: &[f64], label: usize) {
        self.x.extend_from_slice(row);
        self.y.push(label);
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &c in &self.y {
            h[c] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetShard {
    pub owner: ClientId,
    pub data: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Gaussian clusters: class `c` has mean `3 * N(0, I)` and unit covariance.
/// Labels are balanced; 20% of the rows form the test split.
pub fn make_synthetic_dataset(features: usize, classes: usize, n_total: usize, seed: u64) -> SyntheticData {
    assert!(features >= 1 && classes >= 2, "need features >= 1 and classes >= 2");
    let mut rng = stream_rng(seed, Stream::Data);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..features)
                .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n_total).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let n_test = (n_total as f64 * 0.2).round() as usize;
    let mut train = Dataset::empty(features, classes);
    let mut test = Dataset::empty(features, classes);
    let mut row = vec![0.0; features];
    for (i, &c) in labels.iter().enumerate() {
        for (v, m) in row.iter_mut().zip(&means[c]) {
            *v = m + rng.sample::<f64, _>(StandardNormal);
        }
        if i < n_total - n_test {
            train.push(&row, c);
        } else {
            test.push(&row, c);
        }
    }
    SyntheticData { train, test }
}

fn dirichlet<R: Rng>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        for d in &mut draws {
            *d /= sum;
        }
    } else {
        // all draws underflowed; put the mass on one class
        let hot = rng.gen_range(0..k);
        draws.iter_mut().enumerate().for_each(|(i, d)| *d = f64::from(u8::from(i == hot)));
    }
    draws
}

/// Largest-remainder rounding of `n * p`.
fn apportion(n: usize, p: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|q| q * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Dirichlet non-IID split.
///
/// Each client draws class proportions from `Dir(alpha)` and takes that
/// many samples of each class without replacement. When a class runs dry
/// the shortfall is taken from the classes with the most remaining
/// samples (ties by class index).
pub fn partition_noniid(
    data: &Dataset,
    clients: &[(ClientId, usize)],
    alpha: f64,
    seed: u64,
) -> Result<BTreeMap<ClientId, DatasetShard>, FlError> {
    if !(alpha > 0.0) {
        return Err(FlError::Partition("alpha must be > 0".into()));
    }
    let wanted: usize = clients.iter().map(|(_, n)| n).sum();
    if wanted > data.len() {
        return Err(FlError::Partition(format!(
            "clients need {wanted} samples, dataset has {}",
            data.len()
        )));
    }
    let mut rng = stream_rng(seed, Stream::Partition);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); data.classes];
    for (i, &c) in data.y.iter().enumerate() {
        pools[c].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let mut out = BTreeMap::new();
    for &(owner, n) in clients {
        let props = dirichlet(&mut rng, alpha, data.classes);
        let mut counts = apportion(n, &props);
        let mut shortfall = 0;
        for (c, count) in counts.iter_mut().enumerate() {
            if *count > pools[c].len() {
                shortfall += *count - pools[c].len();
                *count = pools[c].len();
            }
        }
        while shortfall > 0 {
            let c = (0..data.classes)
                .filter(|&c| pools[c].len() > counts[c])
                .max_by(|&a, &b| (pools[a].len() - counts[a]).cmp(&(pools[b].len() - counts[b])).then(b.cmp(&a)))
                .expect("total supply covers demand");
            counts[c] += 1;
            shortfall -= 1;
        }
        let mut shard = Dataset::empty(data.features, data.classes);
        for (c, &count) in counts.iter().enumerate() {
            let at = pools[c].len() - count;
            for idx in pools[c].split_off(at) {
                shard.push(data.row(idx), data.y[idx]);
            }
        }
        out.insert(owner, DatasetShard { owner, data: shard });
    }
    Ok(out)
}

fn logits(params: &ModelParams, row: &[f64], classes: usize, out: &mut [f64]) {
    let f = row.len();
    let bias = &params.0[classes * f..];
    for c in 0..classes {
        let w = &params.0[c * f..(c + 1) * f];
        out[c] = w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + bias[c];
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Mean cross-entropy over `rows` and its gradient.
pub fn loss_and_grad(params: &ModelParams, data: &Dataset, rows: &[usize]) -> (f64, ModelParams) {
    let (f, k) = (data.features, data.classes);
    let mut grad = ModelParams::zeros(f, k);
    let mut loss = 0.0;
    let mut p = vec![0.0; k];
    for &i in rows {
        let x = data.row(i);
        logits(params, x, k, &mut p);
        softmax_in_place(&mut p);
        let y = data.y[i];
        loss -= p[y].max(1e-300).ln();
        for c in 0..k {
            let g = p[c] - f64::from(u8::from(c == y));
            for (gw, xv) in grad.0[c * f..(c + 1) * f].iter_mut().zip(x) {
                *gw += g * xv;
            }
            grad.0[k * f + c] += g;
        }
    }
    let n = rows.len().max(1) as f64;
    grad.0.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

pub fn mean_loss(params: &ModelParams, data: &Dataset) -> f64 {
    let rows: Vec<usize> = (0..data.len()).collect();
    loss_and_grad(params, data, &rows).0
}

pub fn accuracy(params: &ModelParams, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut z = vec![0.0; data.classes];
    let correct = (0..data.len())
        .filter(|&i| {
            logits(params, data.row(i), data.classes, &mut z);
            let best = z
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(c, _)| c)
                .unwrap_or(0);
            best == data.y[i]
        })
        .count();
    correct as f64 / data.len() as f64
}

/// Local SGD: `ceil(num_samples / batch_size)` mini-batches of
/// `batch_size` rows, drawn from a reshuffled cyclic pass over the shard.
/// Returns `new - old`.
pub fn local_train<R: Rng>(
    params: &ModelParams,
    shard: &DatasetShard,
    workload: &WorkloadSpec,
    lr: f64,
    rng: &mut R,
) -> ModelParams {
    let zero = ModelParams(vec![0.0; params.len()]);
    let batches = workload.num_batches();
    if batches == 0 {
        return zero;
    }
    let data = &shard.data;
    if data.is_empty() {
        warn!("client {} has an empty shard; returning a zero update", shard.owner);
        return zero;
    }
    let mut w = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    let mut batch = Vec::with_capacity(workload.batch_size as usize);
    for _ in 0..batches {
        batch.clear();
        for _ in 0..workload.batch_size {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (_, g) = loss_and_grad(&w, data, &batch);
        for (wi, gi) in w.0.iter_mut().zip(&g.0) {
            *wi -= lr * gi;
        }
    }
    w.sub(params)
}

/// `base + sum_i (w_i / sum w) * delta_i`.
pub fn fedavg(deltas: &[ModelParams], weights: &[f64], base: &ModelParams) -> Result<ModelParams, FlError> {
    if deltas.len() != weights.len() {
        return Err(FlError::Aggregation(format!(
            "{} deltas but {} weights",
            deltas.len(),
            weights.len()
        )));
    }
    if let Some(d) = deltas.iter().find(|d| d.len() != base.len()) {
        return Err(FlError::Aggregation(format!(
            "delta has {} parameters, model has {}",
            d.len(),
            base.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(FlError::Aggregation("negative weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(FlError::Aggregation("weights sum to zero".into()));
    }
    let mut out = base.clone();
    for (d, w) in deltas.iter().zip(weights) {
        let s = w / total;
        for (o, v) in out.0.iter_mut().zip(&d.0) {
            *o += s * v;
        }
    }
    Ok(out)
}
