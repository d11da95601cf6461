use std::path::PathBuf;

use headsteer_core::synth::{generate_synthetic_trace, SynthConfig};
use headsteer_core::HeadId;
use serde::Serialize;

use super::{finish_manifest, sibling, write_file};
use crate::args::SynthArgs;
use crate::config::{pick, required, FileConfig};
use crate::exit::{Exit, Failure, OrExit};
use crate::manifest::Recorder;

#[derive(Serialize)]
struct Settings {
    output: PathBuf,
    synth: SynthConfig,
}

pub fn parse_heads(list: &str) -> Result<Vec<HeadId>, String> {
    list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

pub fn run(args: SynthArgs, file: &FileConfig) -> Result<(), Failure> {
    let f = &file.synth;
    let d = SynthConfig::default();
    let planted = match pick(args.planted, f.planted.clone()) {
        Some(list) => parse_heads(&list).map_err(anyhow::Error::msg).or_exit(Exit::Input)?,
        None => d.planted_heads.clone(),
    };
    let settings = Settings {
        output: required(pick(args.output, f.output.clone()), "output", "synth")?,
        synth: SynthConfig {
            num_layers: pick(args.layers, f.layers).unwrap_or(d.num_layers),
            num_heads: pick(args.heads, f.heads).unwrap_or(d.num_heads),
            head_dim: pick(args.dim, f.dim).unwrap_or(d.head_dim),
            planted_heads: planted,
            separation: pick(args.separation, f.separation).unwrap_or(d.separation),
            noise_sigma: pick(args.noise_sigma, f.noise_sigma).unwrap_or(d.noise_sigma),
            signal_rank: pick(args.signal_rank, f.signal_rank).unwrap_or(d.signal_rank),
            n_prompts: pick(args.prompts, f.prompts).unwrap_or(d.n_prompts),
            steps_per_prompt: pick(args.steps_per_prompt, f.steps_per_prompt).unwrap_or(d.steps_per_prompt),
            nonlinear_rate: pick(args.nonlinear_rate, f.nonlinear_rate).unwrap_or(d.nonlinear_rate),
            seed: pick(args.seed, f.seed).or(file.seed).unwrap_or(d.seed),
        },
    };
    let recorder = Recorder::start("synth", &settings, Some(settings.synth.seed));
    let (trace, truth) = generate_synthetic_trace(&settings.synth).or_exit(Exit::Input)?;
    write_file(&settings.output, &trace.to_bytes().or_exit(Exit::Input)?)?;
    let truth_path = sibling(&settings.output, ".truth.json");
    let mut json = truth.to_json().into_bytes();
    json.push(b'\n');
    write_file(&truth_path, &json)?;

    let planted: Vec<String> = truth.planted_heads().iter().map(|h| h.to_string()).collect();
    println!(
        "wrote {} steps, {} layers x {} heads, d = {}; planted {}",
        trace.records.len(),
        trace.header.num_layers,
        trace.header.num_heads,
        trace.header.head_dim,
        if planted.is_empty() { "none".to_string() } else { planted.join(" ") }
    );
    println!("ground truth: {}", truth_path.display());
    finish_manifest(recorder, &settings.output, &[truth_path])
}
