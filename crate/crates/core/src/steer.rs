//! Activation edits applied to selected heads at step boundaries.

use std::borrow::Borrow;
use std::collections::HashMap;

use thiserror::Error;

use crate::profile::{SteerMode, SteeringProfile, UNIT_NORM_TOL};
use crate::trace::HeadId;

/// Below this `||r|| / ||x||` the rotation is undefined and `x` is returned as is.
pub const DEGENERATE_RATIO: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SteerError {
    #[error("dimension mismatch{}: expected {expected}, got {got}", head.map(|h| format!(" at head {h}")).unwrap_or_default())]
    Dimension { head: Option<HeadId>, expected: usize, got: usize },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, SteerError>;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadActivation {
    pub head: HeadId,
    pub x: Vec<f32>,
}

fn check_len(x: &[f32], v: &[f32]) -> Result<()> {
    if x.len() != v.len() {
        return Err(SteerError::Dimension { head: None, expected: v.len(), got: x.len() });
    }
    Ok(())
}

/// `x - alpha * v`, evaluated in f64 and rounded once.
pub fn steer_additive(x: &[f32], v: &[f32], alpha: f64) -> Result<Vec<f32>> {
    check_len(x, v)?;
    if alpha == 0.0 {
        // -0.0 - 0.0 * v can flip the sign of a zero; alpha = 0 must be the identity
        return Ok(x.to_vec());
    }
    Ok(x.iter().zip(v).map(|(&a, &b)| (a as f64 - alpha * b as f64) as f32).collect())
}

/// Removes the component of `x` along the unit direction `v` and rescales the
/// remainder back to `||x||`.
///
/// `v` is renormalized in f64 so the result is orthogonal to the exact
/// direction rather than to its f32 rounding.
pub fn steer_rotate(x: &[f32], v: &[f32]) -> Result<Vec<f32>> {
    check_len(x, v)?;
    if x.iter().chain(v).any(|a| !a.is_finite()) {
        return Err(SteerError::Data("non-finite activation or direction".into()));
    }
    let v_norm = v.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt();
    if (v_norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(SteerError::Parameter(format!("steering direction has norm {v_norm}, expected 1")));
    }
    let u: Vec<f64> = v.iter().map(|&a| a as f64 / v_norm).collect();
    let xs: Vec<f64> = x.iter().map(|&a| a as f64).collect();

    let x_norm = xs.iter().map(|a| a * a).sum::<f64>().sqrt();
    if x_norm == 0.0 {
        return Ok(x.to_vec());
    }
    let dot: f64 = xs.iter().zip(&u).map(|(a, b)| a * b).sum();
    let r: Vec<f64> = xs.iter().zip(&u).map(|(a, b)| a - dot * b).collect();
    let r_norm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
    if r_norm < DEGENERATE_RATIO * x_norm {
        return Ok(x.to_vec());
    }
    let scale = x_norm / r_norm;
    Ok(r.iter().map(|a| (a * scale) as f32).collect())
}

/// A profile indexed by head for repeated frame edits. Holds the profile by
/// reference or through any owner such as `Arc`.
#[derive(Debug, Clone)]
pub struct Steerer<P: Borrow<SteeringProfile>> {
    profile: P,
    index: HashMap<HeadId, usize>,
}

impl<P: Borrow<SteeringProfile>> Steerer<P> {
    pub fn new(profile: P) -> Self {
        let index = profile.borrow().entries.iter().enumerate().map(|(i, e)| (e.head, i)).collect();
        Self { profile, index }
    }

    pub fn profile(&self) -> &SteeringProfile {
        self.profile.borrow()
    }

    pub fn contains(&self, head: HeadId) -> bool {
        self.index.contains_key(&head)
    }

    /// Edits one head's vector, or returns `None` for heads outside the profile.
    pub fn steer(&self, head: HeadId, x: &[f32]) -> Option<Result<Vec<f32>>> {
        let profile = self.profile();
        let entry = &profile.entries[*self.index.get(&head)?];
        let out = match profile.mode {
            SteerMode::Rotate => steer_rotate(x, &entry.vector),
            SteerMode::Additive => steer_additive(x, &entry.vector, profile.alpha),
        };
        Some(out.map_err(|e| match e {
            SteerError::Dimension { expected, got, .. } => SteerError::Dimension { head: Some(head), expected, got },
            other => other,
        }))
    }

    /// Edits every profiled head; the whole frame is rejected on any error.
    pub fn apply(&self, frame: &[HeadActivation]) -> Result<Vec<HeadActivation>> {
        let d = self.profile().dim();
        for a in frame {
            if self.contains(a.head) && a.x.len() != d {
                return Err(SteerError::Dimension { head: Some(a.head), expected: d, got: a.x.len() });
            }
        }
        frame
            .iter()
            .map(|a| {
                let x = match self.steer(a.head, &a.x) {
                    Some(edited) => edited?,
                    None => a.x.clone(),
                };
                Ok(HeadActivation { head: a.head, x })
            })
            .collect()
    }
}

pub fn apply_profile(frame: &[HeadActivation], profile: &SteeringProfile) -> Result<Vec<HeadActivation>> {
    Steerer::new(profile).apply(frame)
}
