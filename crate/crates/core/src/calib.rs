//! Steering-vector calibration.
//!
//! For each selected head the prototype is the mean activation over all
//! non-linear steps. Prototypes are denoised by projecting onto the top
//! eigenvectors of a covariance shared by the whole layer, computed from the
//! head-summed activations.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::probe::{rank_heads, AccuracyMap, ProbeError};
use crate::profile::{PcaSetting, ProfileEntry, Provenance, SteerMode, SteeringProfile};
use crate::trace::{HeadId, Trace, TraceError};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("no signal: head {0} has no non-linear steps")]
    NoSignal(HeadId),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("degenerate covariance: all eigenvalues are zero")]
    DegenerateCovariance,
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

pub type Result<T> = std::result::Result<T, CalibError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrototypeVector {
    pub head: HeadId,
    pub v: Vec<f64>,
    pub n_contributing: usize,
}

/// Prompt-weighted mean of per-prompt non-linear means.
///
/// `v = (1/N) Σ_ℓ N_ℓ v_ℓ` with `v_ℓ` the mean over prompt ℓ's non-linear
/// steps; algebraically the flat mean over all non-linear steps.
pub fn prototype_vector(trace: &Trace, head: HeadId) -> Result<PrototypeVector> {
    if !trace.header.contains(head) {
        return Err(CalibError::Parameter(format!("head {head} outside the trace grid")));
    }
    let d = trace.dim();
    let mut per_prompt: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, r) in trace.records.iter().enumerate() {
        if !r.is_nonlinear() {
            continue;
        }
        let (sum, n) = per_prompt.entry(r.prompt_id).or_insert_with(|| (vec![0.0; d], 0));
        for (s, &a) in sum.iter_mut().zip(trace.activation(i, head)) {
            *s += a as f64;
        }
        *n += 1;
    }
    let total: usize = per_prompt.values().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(CalibError::NoSignal(head));
    }
    let mut v = vec![0.0; d];
    for (sum, n) in per_prompt.values() {
        let weight = *n as f64 / total as f64;
        for (acc, s) in v.iter_mut().zip(sum) {
            *acc += weight * (s / *n as f64);
        }
    }
    Ok(PrototypeVector { head, v, n_contributing: total })
}

/// Eigendecomposition of one layer's shared covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEigenbasis {
    pub layer: u16,
    /// Columns are eigenvectors, in descending eigenvalue order.
    pub eigenvectors: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub sample_count: usize,
}

impl LayerEigenbasis {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        self.eigenvectors.column(k).iter().copied().collect()
    }
}

/// `(1/N) Σ (x_k - x̄)(x_k - x̄)ᵀ` over the rows of an `N × d` matrix.
pub fn covariance(samples: &DMatrix<f64>) -> DMatrix<f64> {
    let n = samples.nrows() as f64;
    let mean = samples.row_mean();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let mut cov = centered.transpose() * &centered / n;
    // exact symmetry
    cov = (&cov + cov.transpose()) * 0.5;
    cov
}

/// Eigenvalues in descending order (negatives clamped to zero) and matching
/// eigenvector columns whose first nonzero component is positive.
pub fn symmetric_eigen(matrix: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let d = matrix.nrows();
    let eig = SymmetricEigen::new(matrix);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut values = Vec::with_capacity(d);
    let mut vectors = DMatrix::zeros(d, d);
    for (k, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src].max(0.0));
        let mut col: DVector<f64> = eig.eigenvectors.column(src).into_owned();
        if let Some(first) = col.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(k, &col);
    }
    (values, vectors)
}

/// Per-step head sums for `layer`, one row per step.
pub fn layer_aggregates(trace: &Trace, layer: u16) -> DMatrix<f64> {
    let d = trace.dim();
    let h = trace.header.num_heads;
    let n = trace.records.len();
    let mut m = DMatrix::zeros(n, d);
    for i in 0..n {
        for head in 0..h {
            let a = trace.activation(i, HeadId::new(layer, head));
            for (c, &v) in a.iter().enumerate() {
                m[(i, c)] += v as f64;
            }
        }
    }
    m
}

pub fn layer_covariance(trace: &Trace, layer: u16) -> Result<LayerEigenbasis> {
    if layer >= trace.header.num_layers {
        return Err(CalibError::Parameter(format!("layer {layer} outside 0..{}", trace.header.num_layers)));
    }
    let n = trace.records.len();
    if n < 2 {
        return Err(CalibError::InsufficientData(format!("layer covariance needs at least 2 steps, got {n}")));
    }
    let cov = covariance(&layer_aggregates(trace, layer));
    let (eigenvalues, eigenvectors) = symmetric_eigen(cov);
    Ok(LayerEigenbasis { layer, eigenvectors, eigenvalues, sample_count: n })
}

/// `Q[:, :n] Q[:, :n]ᵀ v`.
pub fn project_vector(v: &[f64], basis: &LayerEigenbasis, n: usize) -> Result<Vec<f64>> {
    let d = basis.dim();
    if n < 1 || n > d {
        return Err(CalibError::Parameter(format!("component count {n} outside 1..={d}")));
    }
    if v.len() != d {
        return Err(CalibError::Parameter(format!("vector length {} != basis dimension {d}", v.len())));
    }
    let q = basis.eigenvectors.columns(0, n);
    let v = DVector::from_column_slice(v);
    let coeffs = q.transpose() * v;
    Ok((q * coeffs).iter().copied().collect())
}

/// Running share of total variance captured by the leading components.
pub fn cumulative_variance(basis: &LayerEigenbasis) -> Result<Vec<f64>> {
    let total: f64 = basis.eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(CalibError::DegenerateCovariance);
    }
    let mut acc = 0.0;
    let mut out: Vec<f64> = basis
        .eigenvalues
        .iter()
        .map(|l| {
            acc += l;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    Ok(out)
}

/// Smallest `n` with `cumulative[n - 1] >= threshold`.
pub fn components_for_variance(cumulative: &[f64], threshold: f64) -> usize {
    cumulative.iter().position(|&c| c >= threshold).map_or(cumulative.len(), |i| i + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibSettings {
    pub fraction: f64,
    /// `None` selects [`PcaSetting::default_for`] the trace's head dimension.
    pub pca: Option<PcaSetting>,
    pub mode: SteerMode,
    pub alpha: f64,
}

impl Default for CalibSettings {
    fn default() -> Self {
        Self { fraction: 0.38, pca: None, mode: SteerMode::Rotate, alpha: 1.0 }
    }
}

/// Per-head intermediate values kept alongside the profile.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCalibration {
    pub prototype: PrototypeVector,
    pub denoised: Vec<f64>,
    pub components: usize,
    pub dropped: bool,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub profile: SteeringProfile,
    pub heads: Vec<HeadCalibration>,
    pub bases: BTreeMap<u16, LayerEigenbasis>,
    pub warnings: Vec<String>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Hex SHA-256 of the accuracy map's JSON form.
pub fn accuracy_map_digest(map: &AccuracyMap) -> String {
    hex::encode(Sha256::digest(map.to_json().as_bytes()))
}

/// Select heads, build prototypes, denoise per layer and assemble a profile.
pub fn build_profile(trace: &Trace, acc_map: &AccuracyMap, settings: &CalibSettings) -> Result<Calibration> {
    let trace_digest = trace.digest()?;
    if acc_map.trace_digest != trace_digest {
        return Err(CalibError::Provenance(format!(
            "accuracy map was computed from trace {} but this trace is {}",
            acc_map.trace_digest, trace_digest
        )));
    }
    if acc_map.num_layers != trace.header.num_layers || acc_map.num_heads != trace.header.num_heads {
        return Err(CalibError::Provenance("accuracy map grid does not match the trace".into()));
    }
    acc_map.check_shape()?;
    if !settings.alpha.is_finite() {
        return Err(CalibError::Parameter(format!("alpha must be finite, got {}", settings.alpha)));
    }
    let d = trace.dim();
    let pca = settings.pca.unwrap_or_else(|| PcaSetting::default_for(d));
    match pca {
        PcaSetting::Components(n) if n < 1 || n > d => {
            return Err(CalibError::Parameter(format!("pca components {n} outside 1..={d}")))
        }
        PcaSetting::VarianceThreshold(t) if !(t > 0.0 && t <= 1.0) => {
            return Err(CalibError::Parameter(format!("variance threshold {t} outside (0, 1]")))
        }
        _ => {}
    }

    let selected = rank_heads(acc_map, settings.fraction)?;
    let prototypes = selected.iter().map(|&h| prototype_vector(trace, h)).collect::<Result<Vec<_>>>()?;

    let mut bases: BTreeMap<u16, LayerEigenbasis> = BTreeMap::new();
    let mut layer_components: BTreeMap<u16, usize> = BTreeMap::new();
    for head in &selected {
        if bases.contains_key(&head.layer) {
            continue;
        }
        let basis = layer_covariance(trace, head.layer)?;
        let n = match pca {
            PcaSetting::Components(n) => n,
            PcaSetting::VarianceThreshold(t) => components_for_variance(&cumulative_variance(&basis)?, t),
        };
        layer_components.insert(head.layer, n);
        bases.insert(head.layer, basis);
    }

    let mut heads = Vec::with_capacity(selected.len());
    let mut entries = Vec::with_capacity(selected.len());
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    for proto in prototypes {
        let layer = proto.head.layer;
        let n = layer_components[&layer];
        let denoised = project_vector(&proto.v, &bases[&layer], n)?;
        let raw_norm = norm(&proto.v);
        let den_norm = norm(&denoised);
        let vanished = raw_norm == 0.0 || den_norm < 1e-8 * raw_norm;
        if vanished {
            warnings.push(format!(
                "head {}: denoised direction vanished (|v| = {raw_norm:e}, |v_hat| = {den_norm:e}); dropped",
                proto.head
            ));
            dropped.push(proto.head);
        } else {
            let vector: Vec<f32> = match settings.mode {
                SteerMode::Rotate => denoised.iter().map(|x| (x / den_norm) as f32).collect(),
                SteerMode::Additive => proto.v.iter().map(|&x| x as f32).collect(),
            };
            entries.push(ProfileEntry { head: proto.head, vector });
        }
        heads.push(HeadCalibration { prototype: proto, denoised, components: n, dropped: vanished });
    }

    let profile = SteeringProfile {
        model_id: trace.header.model_id.clone(),
        num_layers: trace.header.num_layers,
        num_heads: trace.header.num_heads,
        head_dim: trace.header.head_dim,
        mode: settings.mode,
        alpha: if settings.mode == SteerMode::Additive { settings.alpha } else { 0.0 },
        fraction: settings.fraction,
        pca,
        layer_components,
        entries,
        dropped,
        provenance: Provenance {
            trace_digest,
            accuracy_map_digest: accuracy_map_digest(acc_map),
            probe_config: acc_map.config.clone(),
        },
    };
    Ok(Calibration { profile, heads, bases, warnings })
}

/// Cosine similarity, 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Head lookup for profile entries.
pub fn entry_index(profile: &SteeringProfile) -> HashMap<HeadId, usize> {
    profile.entries.iter().enumerate().map(|(i, e)| (e.head, i)).collect()
}
