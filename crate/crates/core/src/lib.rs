//! Offline calibration and test-time steering of attention-head activations.
//!
//! The pipeline runs in one direction:
//!
//! 1. [`segment`] splits chain-of-thought text into steps and labels each one
//!    linear or non-linear by keyword.
//! 2. A model runner captures per-head activations at step delimiters into a
//!    [`trace`] file (CRTF).
//! 3. [`probe`] fits one linear probe per head and ranks heads by accuracy.
//! 4. [`calib`] builds per-head prototype vectors, denoises them in a shared
//!    per-layer eigenbasis and writes a [`profile`] (CRSP).
//! 5. [`steer`] applies the profile to live activations, in process or over
//!    the [`wire`] protocol (CRWP).
//!
//! [`synth`] generates traces with planted heads for end-to-end checks.

pub mod calib;
pub mod probe;
pub mod profile;
pub mod segment;
pub mod steer;
pub mod synth;
pub mod trace;
pub mod wire;

pub use trace::HeadId;
