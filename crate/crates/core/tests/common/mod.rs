#![allow(dead_code)]

use headsteer_core::trace::{StepRecord, Trace, TraceHeader};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn header(l: u16, h: u16, d: u32, prompts: u32, steps: u64) -> TraceHeader {
    TraceHeader {
        model_id: "test-model".into(),
        num_layers: l,
        num_heads: h,
        head_dim: d,
        num_prompts: prompts,
        num_steps: steps,
        extraction_point: "attn.head_out".into(),
        created_at: "2026-01-01T00:00:00Z".into(),
    }
}

/// Trace with random shape, prompt grouping and labels; every prompt has at
/// least one step and at least one step is non-linear.
pub fn random_trace(rng: &mut ChaCha8Rng, max_dim: u32) -> Trace {
    let (l, h, d) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..=max_dim));
    let prompts = rng.random_range(1..8u32);
    let mut records = Vec::new();
    for p in 0..prompts {
        for s in 0..rng.random_range(1..10u32) {
            let label = rng.random_bool(0.4) as u8;
            let scale = rng.random_range(0.1f32..100.0);
            let activations = (0..l as usize * h as usize * d as usize).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
            records.push(StepRecord { prompt_id: p, step_index: s, label, activations });
        }
    }
    if records.iter().all(|r| r.label == 0) {
        let i = rng.random_range(0..records.len());
        records[i].label = 1;
    }
    Trace::new(header(l, h, d, prompts, records.len() as u64), records)
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&a| a as f64).collect()
}
