//! Per-head linear probes separating linear from non-linear steps.
//!
//! Each probe is `sigmoid(θᵀa)` fitted with mean-squared error by full-batch
//! Adam under a cosine-annealed learning rate. The checkpoint with the best
//! validation accuracy is kept; heads are ranked by test accuracy.

use std::f64::consts::PI;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{HeadId, Trace, TraceError};

/// Smallest class size accepted by [`balanced_sample`].
pub const MIN_CLASS_SIZE: usize = 10;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("insufficient data: class {class} has {count} samples (need at least {MIN_CLASS_SIZE})")]
    InsufficientData { class: u8, count: usize },
    #[error("split error: {0}")]
    Split(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("accuracy map is empty")]
    EmptyMap,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub samples_per_class: usize,
    pub split_ratios: [f64; 3],
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub include_bias: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 1000,
            split_ratios: [0.8, 0.1, 0.1],
            learning_rate: 1e-3,
            epochs: 4000,
            seed: 0,
            include_bias: true,
        }
    }
}

impl ProbeConfig {
    /// `epochs == 0` is accepted and yields the untrained (all-zero) probe.
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.split_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split_ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(ProbeError::Config(format!(
                "split ratios must be positive and sum to 1, got {:?}",
                self.split_ratios
            )));
        }
        if self.samples_per_class < MIN_CLASS_SIZE {
            return Err(ProbeError::Config(format!(
                "samples_per_class must be >= {MIN_CLASS_SIZE}, got {}",
                self.samples_per_class
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ProbeError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedSample {
    /// Ascending record indices.
    pub indices: Vec<usize>,
    pub per_class: [usize; 2],
    pub advisories: Vec<String>,
}

/// Draws up to `n_per_class` indices of each label uniformly without replacement.
pub fn balanced_sample(labels: &[u8], n_per_class: usize, seed: u64) -> Result<BalancedSample> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        match y {
            0 | 1 => by_class[y as usize].push(i),
            other => return Err(ProbeError::Data(format!("label {other} at index {i} is not binary"))),
        }
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < MIN_CLASS_SIZE {
            return Err(ProbeError::InsufficientData { class: class as u8, count: members.len() });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::new();
    let mut per_class = [0; 2];
    let mut advisories = Vec::new();
    for (class, members) in by_class.iter().enumerate() {
        let take = n_per_class.min(members.len());
        if take < n_per_class {
            advisories.push(format!(
                "class {class} has only {} samples; using all of them instead of {n_per_class}",
                members.len()
            ));
        }
        per_class[class] = take;
        indices.extend(index::sample(&mut rng, members.len(), take).into_iter().map(|k| members[k]));
    }
    indices.sort_unstable();
    Ok(BalancedSample { indices, per_class, advisories })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `total` into parts proportional to `ratios` with largest-remainder rounding.
pub fn largest_remainder(total: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total.saturating_sub(sizes.iter().sum());
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Stratified train/val/test partition of `indices`.
///
/// Each class is shuffled and the classes are interleaved by relative rank,
/// so every contiguous cut of the merged order keeps the class balance.
pub fn split_dataset(indices: &[usize], labels: &[u8], ratios: [f64; 3], seed: u64) -> Result<DataSplit> {
    if indices.is_empty() {
        return Err(ProbeError::Split("no indices to split".into()));
    }
    let sizes = largest_remainder(indices.len(), &ratios);
    if let Some(which) = sizes.iter().position(|&s| s == 0) {
        let name = ["train", "val", "test"][which];
        return Err(ProbeError::Split(format!(
            "{} indices with ratios {ratios:?} leave the {name} split empty",
            indices.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in indices {
        by_class[(labels[i] & 1) as usize].push(i);
    }
    let mut keyed: Vec<(f64, u8, usize)> = Vec::with_capacity(indices.len());
    for (class, members) in by_class.iter_mut().enumerate() {
        let n = members.len();
        let perm = index::sample(&mut rng, n, n);
        for (rank, k) in perm.into_iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / n as f64, class as u8, members[k]));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();

    let (train, rest) = order.split_at(sizes[0]);
    let (val, test) = rest.split_at(sizes[1]);
    Ok(DataSplit { train: train.to_vec(), val: val.to_vec(), test: test.to_vec() })
}

/// Balanced sample followed by the stratified split; shared by every head.
pub fn prepare_split(labels: &[u8], config: &ProbeConfig) -> Result<(BalancedSample, DataSplit)> {
    config.validate()?;
    let sample = balanced_sample(labels, config.samples_per_class, config.seed)?;
    let split = split_dataset(&sample.indices, labels, config.split_ratios, config.seed)?;
    Ok((sample, split))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    /// Feature weights followed by the bias weight when enabled.
    pub weights: Vec<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// 1-based epoch of the kept checkpoint; 0 for the untrained probe.
    pub best_epoch: usize,
}

impl ProbeFit {
    pub fn predict(&self, x: &[f32]) -> u8 {
        (logit(&self.weights, x) >= 0.0) as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub head: HeadId,
    pub weights: Vec<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
}

fn logit(w: &[f64], x: &[f32]) -> f64 {
    let mut z: f64 = x.iter().zip(w).map(|(&a, &b)| a as f64 * b).sum();
    if w.len() > x.len() {
        z += w[x.len()];
    }
    z
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Dense row-major design matrix for one split.
struct Design {
    rows: Vec<f64>,
    labels: Vec<f64>,
    width: usize,
}

impl Design {
    fn build<'a, F>(row: &F, dim: usize, bias: bool, indices: &[usize], labels: &[u8]) -> Result<Self>
    where
        F: Fn(usize) -> &'a [f32],
    {
        let width = dim + bias as usize;
        let mut rows = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            let x = row(i);
            if x.len() != dim {
                return Err(ProbeError::Data(format!("row {i} has {} features, expected {dim}", x.len())));
            }
            if let Some(p) = x.iter().position(|v| !v.is_finite()) {
                return Err(ProbeError::Data(format!("non-finite feature at row {i}, column {p}")));
            }
            rows.extend(x.iter().map(|&v| v as f64));
            if bias {
                rows.push(1.0);
            }
        }
        let labels = indices.iter().map(|&i| labels[i] as f64).collect();
        Ok(Self { rows, labels, width })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn accuracy(&self, w: &[f64]) -> f64 {
        if self.len() == 0 {
            return 0.0;
        }
        let correct = self
            .rows
            .chunks_exact(self.width)
            .zip(&self.labels)
            .filter(|(x, &y)| {
                let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
                ((z >= 0.0) as u8 as f64) == y
            })
            .count();
        correct as f64 / self.len() as f64
    }

    /// Mean squared error of sigmoid outputs and its gradient.
    fn loss_and_grad(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (x, &y) in self.rows.chunks_exact(self.width).zip(&self.labels) {
            let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            let s = sigmoid(z);
            let r = s - y;
            loss += r * r;
            let coef = r * s * (1.0 - s);
            for (g, a) in grad.iter_mut().zip(x) {
                *g += coef * a;
            }
        }
        let n = self.len() as f64;
        grad.iter_mut().for_each(|g| *g *= 2.0 / n);
        loss / n
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, w: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            w[i] -= lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

/// Cosine annealing from `base` at epoch 0 towards 0 at `epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    base * 0.5 * (1.0 + (PI * epoch as f64 / epochs as f64).cos())
}

/// Fits one probe on a precomputed split. `row(i)` returns the feature vector of sample `i`.
pub fn fit_probe<'a, F>(row: F, dim: usize, labels: &[u8], split: &DataSplit, config: &ProbeConfig) -> Result<ProbeFit>
where
    F: Fn(usize) -> &'a [f32],
{
    let bias = config.include_bias;
    let train = Design::build(&row, dim, bias, &split.train, labels)?;
    let val = Design::build(&row, dim, bias, &split.val, labels)?;
    let test = Design::build(&row, dim, bias, &split.test, labels)?;
    let positives = train.labels.iter().filter(|&&y| y == 1.0).count();
    if train.len() < 2 || positives == 0 || positives == train.len() {
        return Err(ProbeError::Data("training split must contain both classes".into()));
    }

    let width = train.width;
    let mut w = vec![0.0; width];
    let mut grad = vec![0.0; width];
    let mut adam = Adam::new(width);
    let mut best = (w.clone(), val.accuracy(&w), 0usize);

    for epoch in 0..config.epochs {
        let loss = train.loss_and_grad(&w, &mut grad);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(ProbeError::Training(format!("non-finite loss at epoch {}", epoch + 1)));
        }
        adam.step(&mut w, &grad, cosine_lr(config.learning_rate, epoch, config.epochs));
        let acc = val.accuracy(&w);
        // ties go to the later, more trained checkpoint
        if acc >= best.1 {
            best = (w.clone(), acc, epoch + 1);
        }
    }

    let (weights, val_accuracy, best_epoch) = best;
    let test_accuracy = test.accuracy(&weights);
    Ok(ProbeFit { weights, val_accuracy, test_accuracy, best_epoch })
}

/// Samples, splits and fits a probe on an `N × dim` row-major feature matrix.
pub fn train_probe(features: &[f32], dim: usize, labels: &[u8], config: &ProbeConfig) -> Result<ProbeFit> {
    if dim == 0 || features.len() != labels.len() * dim {
        return Err(ProbeError::Data(format!(
            "feature matrix of {} values does not match {} rows of width {dim}",
            features.len(),
            labels.len()
        )));
    }
    if labels.len() < 3 {
        return Err(ProbeError::Data(format!("need at least 3 samples, got {}", labels.len())));
    }
    let (_, split) = prepare_split(labels, config)?;
    fit_probe(|i| &features[i * dim..(i + 1) * dim], dim, labels, &split, config)
}

/// Test-accuracy grid over every head of a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMap {
    pub num_layers: u16,
    pub num_heads: u16,
    pub config: ProbeConfig,
    pub trace_digest: String,
    /// `test_accuracy[layer][head]`.
    pub test_accuracy: Vec<Vec<f64>>,
    pub val_accuracy: Vec<Vec<f64>>,
    pub samples_per_class: [usize; 2],
    pub split_sizes: [usize; 3],
}

impl AccuracyMap {
    pub fn accuracy(&self, head: HeadId) -> f64 {
        self.test_accuracy[head.layer as usize][head.head as usize]
    }

    pub fn head_count(&self) -> usize {
        self.num_layers as usize * self.num_heads as usize
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.num_layers).flat_map(move |l| (0..self.num_heads).map(move |h| HeadId::new(l, h)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("accuracy map serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn check_shape(&self) -> Result<()> {
        let ok = self.test_accuracy.len() == self.num_layers as usize
            && self.val_accuracy.len() == self.num_layers as usize
            && self
                .test_accuracy
                .iter()
                .chain(&self.val_accuracy)
                .all(|row| row.len() == self.num_heads as usize && row.iter().all(|a| (0.0..=1.0).contains(a)));
        if ok {
            Ok(())
        } else {
            Err(ProbeError::Data("accuracy grid does not match declared L x H or has values outside [0, 1]".into()))
        }
    }
}

/// Everything produced by probing a trace.
#[derive(Debug, Clone)]
pub struct ProbeRun {
    pub map: AccuracyMap,
    pub results: Vec<ProbeResult>,
    pub sample: BalancedSample,
    pub split: DataSplit,
}

/// Fits one probe per head on the shared balanced sample and split.
pub fn probe_heads(trace: &Trace, config: &ProbeConfig) -> Result<ProbeRun> {
    let labels = trace.labels();
    let (sample, split) = prepare_split(&labels, config)?;
    let dim = trace.dim();
    let heads: Vec<HeadId> = trace.header.heads().collect();

    let results = heads
        .par_iter()
        .map(|&head| {
            let fit = fit_probe(|i| trace.activation(i, head), dim, &labels, &split, config)?;
            Ok(ProbeResult {
                head,
                weights: fit.weights,
                val_accuracy: fit.val_accuracy,
                test_accuracy: fit.test_accuracy,
                best_epoch: fit.best_epoch,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (l, h) = (trace.header.num_layers as usize, trace.header.num_heads as usize);
    let mut test_accuracy = vec![vec![0.0; h]; l];
    let mut val_accuracy = vec![vec![0.0; h]; l];
    for r in &results {
        test_accuracy[r.head.layer as usize][r.head.head as usize] = r.test_accuracy;
        val_accuracy[r.head.layer as usize][r.head.head as usize] = r.val_accuracy;
    }
    let map = AccuracyMap {
        num_layers: trace.header.num_layers,
        num_heads: trace.header.num_heads,
        config: config.clone(),
        trace_digest: trace.digest()?,
        test_accuracy,
        val_accuracy,
        samples_per_class: sample.per_class,
        split_sizes: [split.train.len(), split.val.len(), split.test.len()],
    };
    Ok(ProbeRun { map, results, sample, split })
}

pub fn probe_all_heads(trace: &Trace, config: &ProbeConfig) -> Result<AccuracyMap> {
    probe_heads(trace, config).map(|run| run.map)
}

/// Number of heads selected by `fraction` of `total`, i.e. `ceil(fraction * total)`.
pub fn selection_size(fraction: f64, total: usize) -> usize {
    // absorb representation error such as 0.1 * 30 = 3.0000000000000004
    let k = (fraction * total as f64 - 1e-9).ceil().max(0.0) as usize;
    k.min(total)
}

/// The `k` most accurate heads, descending; ties go to the lower (layer, head).
pub fn top_heads(map: &AccuracyMap, k: usize) -> Vec<HeadId> {
    let mut heads: Vec<HeadId> = map.heads().collect();
    heads.sort_by(|a, b| map.accuracy(*b).total_cmp(&map.accuracy(*a)).then(a.cmp(b)));
    heads.truncate(k);
    heads
}

pub fn rank_heads(map: &AccuracyMap, fraction: f64) -> Result<Vec<HeadId>> {
    if map.head_count() == 0 {
        return Err(ProbeError::EmptyMap);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ProbeError::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    Ok(top_heads(map, selection_size(fraction, map.head_count())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn alternating(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i % 2) as u8).collect()
    }

    #[test]
    fn balanced_sample_takes_n_per_class() {
        let labels = alternating(4000);
        let s = balanced_sample(&labels, 1000, 7).unwrap();
        assert_eq!(s.per_class, [1000, 1000]);
        assert_eq!(s.indices.iter().filter(|&&i| labels[i] == 1).count(), 1000);
        assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, balanced_sample(&labels, 1000, 7).unwrap());
    }

    #[test]
    fn balanced_sample_errors_and_clamps() {
        let err = balanced_sample(&[0; 50], 10, 0).unwrap_err();
        assert!(matches!(err, ProbeError::InsufficientData { class: 1, count: 0 }));
        let mut labels = vec![0u8; 100];
        labels[..20].iter_mut().for_each(|y| *y = 1);
        let s = balanced_sample(&labels, 50, 0).unwrap();
        assert_eq!(s.per_class, [50, 20]);
        assert_eq!(s.advisories.len(), 1);
    }

    #[test]
    fn split_sizes() {
        let labels = alternating(2000);
        let idx: Vec<usize> = (0..2000).collect();
        let s = split_dataset(&idx, &labels, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1600, 200, 200));
        let ones = |v: &[usize]| v.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!((ones(&s.train), ones(&s.val), ones(&s.test)), (800, 100, 100));

        let labels = alternating(10);
        let idx: Vec<usize> = (0..10).collect();
        let s = split_dataset(&idx, &labels, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, idx);

        assert!(matches!(split_dataset(&[0, 1], &[0, 1], [0.8, 0.1, 0.1], 1), Err(ProbeError::Split(_))));
    }

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(largest_remainder(2, &[0.8, 0.1, 0.1]), vec![2, 0, 0]);
        assert_eq!(largest_remainder(7, &[0.5, 0.25, 0.25]), vec![3, 2, 2]);
        assert_eq!(largest_remainder(11, &[0.8, 0.1, 0.1]).iter().sum::<usize>(), 11);
    }

    fn two_clusters(per_class: usize, seed: u64) -> (Vec<f32>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..2 * per_class {
            let label = (i % 2) as u8;
            let mean = if label == 1 { 5.0 } else { -5.0 };
            x.push((mean + noise.sample(&mut rng)) as f32);
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn separable_clusters_are_learned() {
        let (x, y) = two_clusters(200, 3);
        let cfg = ProbeConfig { samples_per_class: 1000, ..Default::default() };
        let fit = train_probe(&x, 1, &y, &cfg).unwrap();
        assert!(fit.test_accuracy >= 0.99, "test accuracy {}", fit.test_accuracy);
    }

    #[test]
    fn untrained_probe_predicts_majority() {
        let (x, y) = two_clusters(200, 4);
        let cfg = ProbeConfig { epochs: 0, ..Default::default() };
        let fit = train_probe(&x, 1, &y, &cfg).unwrap();
        assert_eq!(fit.best_epoch, 0);
        assert!(fit.weights.iter().all(|&w| w == 0.0));
        assert!((fit.test_accuracy - 0.5).abs() < 0.05);
    }

    #[test]
    fn non_finite_features_rejected() {
        let (mut x, y) = two_clusters(50, 5);
        x[3] = f32::NAN;
        let cfg = ProbeConfig { samples_per_class: 50, ..Default::default() };
        assert!(matches!(train_probe(&x, 1, &y, &cfg), Err(ProbeError::Data(_))));
    }

    #[test]
    fn huge_learning_rate_still_finite_or_reports() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f32> = (0..400).map(|_| rng.random_range(-1e30f32..1e30)).collect();
        let y = alternating(400);
        let cfg = ProbeConfig { learning_rate: 1e3, epochs: 5, ..Default::default() };
        match train_probe(&x, 1, &y, &cfg) {
            Ok(fit) => assert!(fit.weights.iter().all(|w| w.is_finite())),
            Err(e) => assert!(matches!(e, ProbeError::Training(_))),
        }
    }

    fn map_from(acc: Vec<Vec<f64>>) -> AccuracyMap {
        AccuracyMap {
            num_layers: acc.len() as u16,
            num_heads: acc[0].len() as u16,
            config: ProbeConfig::default(),
            trace_digest: String::new(),
            val_accuracy: acc.clone(),
            test_accuracy: acc,
            samples_per_class: [0, 0],
            split_sizes: [0, 0, 0],
        }
    }

    #[test]
    fn rank_heads_fraction_and_ties() {
        let map = map_from(vec![vec![0.5; 12]; 28]);
        assert_eq!(rank_heads(&map, 1.0).unwrap().len(), 336);
        assert_eq!(rank_heads(&map, 0.07).unwrap().len(), 24);

        let map = map_from(vec![vec![0.9, 0.5], vec![0.9, 0.7]]);
        assert_eq!(rank_heads(&map, 0.25).unwrap(), vec![HeadId::new(0, 0)]);
        assert_eq!(
            rank_heads(&map, 1.0).unwrap(),
            vec![HeadId::new(0, 0), HeadId::new(1, 0), HeadId::new(1, 1), HeadId::new(0, 1)]
        );
        assert!(rank_heads(&map, 0.0).is_err());
        assert!(rank_heads(&map, 1.5).is_err());
    }

    #[test]
    fn selection_size_absorbs_rounding() {
        assert_eq!(selection_size(0.1, 30), 3);
        assert_eq!(selection_size(0.07, 336), 24);
        assert_eq!(selection_size(0.38, 32), 13);
        assert_eq!(selection_size(4.0 / 32.0, 32), 4);
    }
}
