//! Config file sections. Every field mirrors a flag of the same name.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

use crate::exit::{Exit, Failure, OrExit};

pub const LISTEN_ENV: &str = "HEADSTEER_LISTEN";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    /// Fallback seed for every randomized subcommand.
    pub seed: Option<u64>,
    pub segment: SegmentSection,
    pub validate: ValidateSection,
    pub probe: ProbeSection,
    pub calibrate: CalibrateSection,
    pub serve: ServeSection,
    pub synth: SynthSection,
    pub verify: VerifySection,
    pub report: ReportSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSection {
    pub input: Option<PathBuf>,
    pub keywords: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub think_region: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub trace: Option<PathBuf>,
    pub probe_ready: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub trace: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub samples_per_class: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub no_bias: Option<bool>,
    pub threshold: Option<f64>,
    pub fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    pub trace: Option<PathBuf>,
    pub acc_map: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub fraction: Option<f64>,
    pub pca_components: Option<usize>,
    pub pca_variance: Option<f64>,
    pub mode: Option<String>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub profile: Option<PathBuf>,
    pub listen: Option<String>,
    pub permissive: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub output: Option<PathBuf>,
    pub layers: Option<u16>,
    pub heads: Option<u16>,
    pub dim: Option<u32>,
    pub planted: Option<String>,
    pub separation: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub signal_rank: Option<usize>,
    pub prompts: Option<u32>,
    pub steps_per_prompt: Option<u32>,
    pub nonlinear_rate: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub profile: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub frames: Option<usize>,
    pub seed: Option<u64>,
    pub endpoint: Option<String>,
    pub min_recall: Option<f64>,
    pub min_cosine: Option<f64>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub input: Option<PathBuf>,
    pub percentile: Option<f64>,
    pub bins: Option<usize>,
    pub output: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))
            .or_exit(Exit::Input)?;
        toml::from_str(&text).with_context(|| format!("invalid config file {}", path.display())).or_exit(Exit::Input)
    }
}

/// Flag, else config value.
pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

/// A switch is on when given on the command line or enabled in the file.
pub fn switch(flag: bool, file: Option<bool>) -> bool {
    flag || file.unwrap_or(false)
}

pub fn required<T>(value: Option<T>, flag: &str, section: &str) -> Result<T, Failure> {
    value.ok_or_else(|| Failure::new(Exit::Input, anyhow::anyhow!("missing --{flag} (or `{}` in [{section}] of the config file)", flag.replace('-', "_"))))
}
