//! Synthetic traces with planted cognitive heads.
//!
//! Each layer owns a random orthonormal signal subspace of rank
//! `signal_rank`. A planted head gets a unit direction `u` inside its layer's
//! subspace. Its activation on a step with label `y` is
//!
//! ```text
//! a = y·δσ·u + δσ·(P_B z − (uᵀ P_B z) u) + σ·ε
//! ```
//!
//! where `z ~ N(0, I_r)` is shared by the planted heads of a layer for that
//! step and `P_B z` is its embedding in the subspace. The middle term gives
//! the layer covariance its low-rank structure without carrying label
//! information along `u`. Non-planted heads are pure `σ·ε` noise, so with
//! `δ = 0` every head looks alike.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::cosine;
use crate::probe::{top_heads, AccuracyMap};
use crate::profile::SteeringProfile;
use crate::trace::{HeadId, StepRecord, Trace, TraceHeader, LABEL_LINEAR, LABEL_NONLINEAR};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_layers: u16,
    pub num_heads: u16,
    pub head_dim: u32,
    pub planted_heads: Vec<HeadId>,
    /// Class-mean offset along the planted direction, in units of `noise_sigma`.
    pub separation: f64,
    pub noise_sigma: f64,
    pub signal_rank: usize,
    pub n_prompts: u32,
    pub steps_per_prompt: u32,
    pub nonlinear_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 8,
            head_dim: 32,
            planted_heads: vec![HeadId::new(1, 2), HeadId::new(2, 5), HeadId::new(3, 0), HeadId::new(3, 6)],
            separation: 4.0,
            noise_sigma: 1.0,
            signal_rank: 5,
            n_prompts: 100,
            steps_per_prompt: 20,
            nonlinear_rate: 0.5,
            seed: 20_240_917,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Parameter(m));
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.signal_rank == 0 || self.signal_rank > self.head_dim as usize {
            return bad(format!("signal_rank {} outside 1..={}", self.signal_rank, self.head_dim));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return bad(format!("separation must be finite and >= 0, got {}", self.separation));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma must be positive, got {}", self.noise_sigma));
        }
        if !(self.nonlinear_rate > 0.0 && self.nonlinear_rate < 1.0) {
            return bad(format!("nonlinear_rate must lie in (0, 1), got {}", self.nonlinear_rate));
        }
        let mut seen = HashSet::new();
        for h in &self.planted_heads {
            if h.layer >= self.num_layers || h.head >= self.num_heads {
                return bad(format!("planted head {h} outside {}x{} grid", self.num_layers, self.num_heads));
            }
            if !seen.insert(*h) {
                return bad(format!("planted head {h} listed twice"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub head: HeadId,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSubspace {
    pub layer: u16,
    /// Orthonormal basis vectors of the signal subspace.
    pub basis: Vec<Vec<f64>>,
}

impl LayerSubspace {
    /// Squared norm of the projection of `v` onto the subspace.
    pub fn captured_energy(&self, v: &[f64]) -> f64 {
        self.basis.iter().map(|b| dot(b, v).powi(2)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub num_layers: u16,
    pub num_heads: u16,
    pub head_dim: u32,
    pub planted: Vec<PlantedHead>,
    pub subspaces: Vec<LayerSubspace>,
}

impl GroundTruth {
    pub fn direction(&self, head: HeadId) -> Option<&[f64]> {
        self.planted.iter().find(|p| p.head == head).map(|p| p.direction.as_slice())
    }

    pub fn planted_heads(&self) -> Vec<HeadId> {
        self.planted.iter().map(|p| p.head).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Modified Gram-Schmidt on fresh Gaussian vectors.
fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize, r: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    while basis.len() < r {
        let mut v = gaussian_vec(rng, d);
        for b in &basis {
            let c = dot(b, &v);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

pub fn generate_synthetic_trace(config: &SynthConfig) -> Result<(Trace, GroundTruth), SynthError> {
    config.validate()?;
    let (l, h, d, r) = (config.num_layers, config.num_heads, config.head_dim as usize, config.signal_rank);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let subspaces: Vec<LayerSubspace> =
        (0..l).map(|layer| LayerSubspace { layer, basis: random_orthonormal(&mut rng, d, r) }).collect();
    let planted: Vec<PlantedHead> = config
        .planted_heads
        .iter()
        .map(|&head| {
            let basis = &subspaces[head.layer as usize].basis;
            let mut c = gaussian_vec(&mut rng, r);
            let n = dot(&c, &c).sqrt();
            c.iter_mut().for_each(|x| *x /= n);
            let mut u = vec![0.0; d];
            for (ci, b) in c.iter().zip(basis) {
                u.iter_mut().zip(b).for_each(|(x, y)| *x += ci * y);
            }
            PlantedHead { head, direction: u }
        })
        .collect();
    let planted_by_head: BTreeMap<HeadId, &PlantedHead> = planted.iter().map(|p| (p.head, p)).collect();
    let planted_layers: HashSet<u16> = planted.iter().map(|p| p.head.layer).collect();

    let sigma = config.noise_sigma;
    let shift = config.separation * sigma;
    let n_steps = config.n_prompts as u64 * config.steps_per_prompt as u64;
    let mut records = Vec::with_capacity(n_steps as usize);
    let mut latent = vec![0.0; d];
    for prompt in 0..config.n_prompts {
        for step in 0..config.steps_per_prompt {
            let nonlinear = rng.random::<f64>() < config.nonlinear_rate;
            let y = if nonlinear { 1.0 } else { 0.0 };
            let mut activations = Vec::with_capacity(d * h as usize * l as usize);
            for layer in 0..l {
                if planted_layers.contains(&layer) {
                    let z = gaussian_vec(&mut rng, r);
                    latent.iter_mut().for_each(|x| *x = 0.0);
                    for (zi, b) in z.iter().zip(&subspaces[layer as usize].basis) {
                        latent.iter_mut().zip(b).for_each(|(x, y)| *x += zi * y);
                    }
                }
                for head in 0..h {
                    let noise = gaussian_vec(&mut rng, d);
                    match planted_by_head.get(&HeadId::new(layer, head)) {
                        Some(p) => {
                            let u = &p.direction;
                            let along = dot(&latent, u);
                            activations.extend((0..d).map(|c| {
                                (y * shift * u[c] + shift * (latent[c] - along * u[c]) + sigma * noise[c]) as f32
                            }));
                        }
                        None => activations.extend(noise.iter().map(|e| (sigma * e) as f32)),
                    }
                }
            }
            records.push(StepRecord {
                prompt_id: prompt,
                step_index: step,
                label: if nonlinear { LABEL_NONLINEAR } else { LABEL_LINEAR },
                activations,
            });
        }
    }

    let header = TraceHeader {
        model_id: format!("synthetic-seed{}", config.seed),
        num_layers: l,
        num_heads: h,
        head_dim: config.head_dim,
        num_prompts: config.n_prompts,
        num_steps: n_steps,
        extraction_point: "synthetic".into(),
        created_at: "1970-01-01T00:00:00Z".into(),
    };
    let truth = GroundTruth { num_layers: l, num_heads: h, head_dim: config.head_dim, planted, subspaces };
    Ok((Trace::new(header, records), truth))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadRecovery {
    pub head: HeadId,
    /// `|cos(v̂, u)|`, or `None` when the head is not in the profile.
    pub abs_cosine: Option<f64>,
    pub subspace_capture: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryMetrics {
    pub k: usize,
    pub recall: f64,
    pub precision: f64,
    pub heads: Vec<HeadRecovery>,
    /// Mean over planted heads; heads missing from the profile count as 0.
    pub mean_abs_cosine: f64,
    pub mean_subspace_capture: f64,
}

/// Recovery metrics given an explicit head ranking (most accurate first).
pub fn evaluate_ranking(ranking: &[HeadId], profile: &SteeringProfile, truth: &GroundTruth) -> Result<RecoveryMetrics, SynthError> {
    if profile.head_dim != truth.head_dim {
        return Err(SynthError::Shape(format!("profile d = {} but truth d = {}", profile.head_dim, truth.head_dim)));
    }
    if profile.num_layers != 0 && (profile.num_layers, profile.num_heads) != (truth.num_layers, truth.num_heads) {
        return Err(SynthError::Shape("profile grid differs from the ground truth grid".into()));
    }
    let planted = truth.planted_heads();
    let k = planted.len();
    let top: HashSet<HeadId> = ranking.iter().take(k).copied().collect();
    let hits = planted.iter().filter(|h| top.contains(h)).count();
    let recall = if k == 0 { 1.0 } else { hits as f64 / k as f64 };
    let precision = if top.is_empty() { 0.0 } else { hits as f64 / top.len() as f64 };

    let heads: Vec<HeadRecovery> = truth
        .planted
        .iter()
        .map(|p| {
            let entry = profile.entry(p.head);
            let v: Option<Vec<f64>> = entry.map(|e| e.vector.iter().map(|&x| x as f64).collect());
            let abs_cosine = v.as_ref().map(|v| cosine(v, &p.direction).abs());
            let subspace_capture = v.as_ref().map(|v| {
                let total = dot(v, v);
                if total == 0.0 {
                    0.0
                } else {
                    truth.subspaces[p.head.layer as usize].captured_energy(v) / total
                }
            });
            HeadRecovery { head: p.head, abs_cosine, subspace_capture }
        })
        .collect();
    let mean = |f: fn(&HeadRecovery) -> Option<f64>| {
        if heads.is_empty() {
            0.0
        } else {
            heads.iter().map(|h| f(h).unwrap_or(0.0)).sum::<f64>() / heads.len() as f64
        }
    };
    Ok(RecoveryMetrics {
        k,
        recall,
        precision,
        mean_abs_cosine: mean(|h| h.abs_cosine),
        mean_subspace_capture: mean(|h| h.subspace_capture),
        heads,
    })
}

pub fn evaluate_recovery(acc_map: &AccuracyMap, profile: &SteeringProfile, truth: &GroundTruth) -> Result<RecoveryMetrics, SynthError> {
    if (acc_map.num_layers, acc_map.num_heads) != (truth.num_layers, truth.num_heads) {
        return Err(SynthError::Shape("accuracy map grid differs from the ground truth grid".into()));
    }
    let ranking = top_heads(acc_map, truth.planted.len());
    evaluate_ranking(&ranking, profile, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{ProfileEntry, SteerMode};
    use crate::trace::validate_trace;

    fn small() -> SynthConfig {
        SynthConfig { n_prompts: 10, steps_per_prompt: 30, ..Default::default() }
    }

    #[test]
    fn deterministic_and_valid() {
        let (a, ta) = generate_synthetic_trace(&small()).unwrap();
        let (b, tb) = generate_synthetic_trace(&small()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(ta, tb);
        assert!(validate_trace(&a.header, &a.records, true).is_empty());
    }

    #[test]
    fn truth_is_orthonormal() {
        let (_, truth) = generate_synthetic_trace(&small()).unwrap();
        for s in &truth.subspaces {
            for (i, a) in s.basis.iter().enumerate() {
                for (j, b) in s.basis.iter().enumerate() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot(a, b) - want).abs() < 1e-12);
                }
            }
        }
        for p in &truth.planted {
            assert!((dot(&p.direction, &p.direction) - 1.0).abs() < 1e-12);
            let s = &truth.subspaces[p.head.layer as usize];
            assert!((s.captured_energy(&p.direction) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn label_rate_tracks_config() {
        let cfg = SynthConfig { n_prompts: 50, steps_per_prompt: 40, nonlinear_rate: 0.3, ..Default::default() };
        let (t, _) = generate_synthetic_trace(&cfg).unwrap();
        let rate = t.records.iter().filter(|r| r.is_nonlinear()).count() as f64 / t.records.len() as f64;
        assert!((rate - 0.3).abs() <= 0.05, "rate {rate}");
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SynthConfig { signal_rank: 33, ..small() },
            SynthConfig { planted_heads: vec![HeadId::new(4, 0)], ..small() },
            SynthConfig { noise_sigma: 0.0, ..small() },
            SynthConfig { nonlinear_rate: 1.0, ..small() },
            SynthConfig { planted_heads: vec![HeadId::new(0, 0), HeadId::new(0, 0)], ..small() },
        ];
        for c in bad {
            assert!(matches!(generate_synthetic_trace(&c), Err(SynthError::Parameter(_))));
        }
    }

    #[test]
    fn truth_directions_score_perfectly() {
        let (_, truth) = generate_synthetic_trace(&small()).unwrap();
        let mut profile = SteeringProfile::empty(truth.head_dim, SteerMode::Rotate);
        profile.entries = truth
            .planted
            .iter()
            .map(|p| ProfileEntry { head: p.head, vector: p.direction.iter().map(|&x| x as f32).collect() })
            .collect();
        let ranking = truth.planted_heads();
        let m = evaluate_ranking(&ranking, &profile, &truth).unwrap();
        assert_eq!(m.recall, 1.0);
        assert!((m.mean_abs_cosine - 1.0).abs() < 1e-6);
        assert!((m.mean_subspace_capture - 1.0).abs() < 1e-6);
    }
}
