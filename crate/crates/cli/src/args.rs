use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Probe attention heads for reasoning-mode signal, calibrate steering
/// profiles and serve them to a model runner.
#[derive(Debug, Parser)]
#[command(name = "headsteer", version)]
pub struct Cli {
    /// TOML file whose sections mirror the subcommand flags; flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split chain-of-thought trajectories into labeled reasoning steps.
    Segment(SegmentArgs),
    /// Check a CRTF activation trace.
    Validate(ValidateArgs),
    /// Fit one linear probe per head and write the accuracy map.
    Probe(ProbeArgs),
    /// Build a steering profile from a trace and its accuracy map.
    Calibrate(CalibrateArgs),
    /// Serve a steering profile over CRWP.
    Serve(ServeArgs),
    /// Generate a synthetic trace with planted heads and its ground truth.
    Synth(SynthArgs),
    /// Check a profile's invariants, recovery and optionally a live service.
    Verify(VerifyArgs),
    /// Histogram and coverage threshold of per-sample counts.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// JSONL file, one {"id": ..., "text": ...} object per trajectory.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Keyword file, one phrase per line; defaults to the built-in set.
    #[arg(long)]
    pub keywords: Option<PathBuf>,
    /// Step dump (JSONL).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Cut each text down to its <think> region before segmenting.
    #[arg(long)]
    pub think_region: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub trace: Option<PathBuf>,
    /// Also flag traces that cannot train a probe (single class).
    #[arg(long)]
    pub probe_ready: bool,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Accuracy map (JSON).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Heatmap grid (CSV); defaults to the output path with a .grid.csv suffix.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fit without the constant bias feature.
    #[arg(long)]
    pub no_bias: bool,
    /// Accuracy above which a head is marked in the printed grid.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// List the heads a calibration at this fraction would select.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub acc_map: Option<PathBuf>,
    /// Steering profile (CRSP).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Share of all heads to steer.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Fixed number of principal components.
    #[arg(long, conflicts_with = "pca_variance")]
    pub pca_components: Option<usize>,
    /// Smallest component count reaching this cumulative variance.
    #[arg(long)]
    pub pca_variance: Option<f64>,
    /// rotate or additive.
    #[arg(long)]
    pub mode: Option<String>,
    /// Additive strength; ignored by rotate.
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Address to bind; HEADSTEER_LISTEN overrides the config file.
    #[arg(long)]
    pub listen: Option<String>,
    /// Pass unknown heads through unchanged instead of rejecting the frame.
    #[arg(long)]
    pub permissive: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Trace (CRTF); the ground truth goes next to it as <output>.truth.json.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<u16>,
    #[arg(long)]
    pub heads: Option<u16>,
    #[arg(long)]
    pub dim: Option<u32>,
    /// Comma-separated heads such as L1H2,L3H0.
    #[arg(long)]
    pub planted: Option<String>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub signal_rank: Option<usize>,
    #[arg(long)]
    pub prompts: Option<u32>,
    #[arg(long)]
    pub steps_per_prompt: Option<u32>,
    #[arg(long)]
    pub nonlinear_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Trace the profile was calibrated from; checks shape and digest.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Ground-truth sidecar from `synth`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Random frames per steering check.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Running service to compare against in-process steering.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Fail unless recall reaches this value (needs --truth).
    #[arg(long)]
    pub min_recall: Option<f64>,
    /// Fail unless the mean |cosine| reaches this value (needs --truth).
    #[arg(long)]
    pub min_cosine: Option<f64>,
    /// JSON report.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// One count per line; blank lines and # comments are skipped.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Coverage level for the threshold marker.
    #[arg(long)]
    pub percentile: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Report as JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
}
