use std::fmt::Write as _;
use std::path::PathBuf;

use headsteer_core::probe::{probe_heads, rank_heads, AccuracyMap, ProbeConfig, ProbeError};
use serde::Serialize;

use super::{finish_manifest, load_trace, sibling, write_file};
use crate::args::ProbeArgs;
use crate::config::{pick, required, switch, FileConfig};
use crate::exit::{Exit, Failure, OrExit};
use crate::manifest::Recorder;

/// Accuracy above which a head is highlighted in the printed grid.
pub const DEFAULT_THRESHOLD: f64 = 0.85;

#[derive(Serialize)]
struct Settings {
    trace: PathBuf,
    output: PathBuf,
    grid: PathBuf,
    probe: ProbeConfig,
    threshold: f64,
    fraction: Option<f64>,
}

pub fn probe_exit(e: &ProbeError) -> Exit {
    match e {
        ProbeError::InsufficientData { .. } | ProbeError::Split(_) => Exit::Data,
        _ => Exit::Input,
    }
}

/// CSV with one row per layer and one column per head.
pub fn grid_csv(map: &AccuracyMap) -> String {
    let mut out = String::from("layer");
    for h in 0..map.num_heads {
        let _ = write!(out, ",H{h}");
    }
    out.push('\n');
    for (l, row) in map.test_accuracy.iter().enumerate() {
        let _ = write!(out, "L{l}");
        for a in row {
            let _ = write!(out, ",{a:.4}");
        }
        out.push('\n');
    }
    out
}

pub fn run(args: ProbeArgs, file: &FileConfig) -> Result<(), Failure> {
    let f = &file.probe;
    let defaults = ProbeConfig::default();
    let output = required(pick(args.output, f.output.clone()), "output", "probe")?;
    let settings = Settings {
        trace: required(pick(args.trace, f.trace.clone()), "trace", "probe")?,
        grid: pick(args.grid, f.grid.clone()).unwrap_or_else(|| sibling(&output, ".grid.csv")),
        output,
        probe: ProbeConfig {
            samples_per_class: pick(args.samples_per_class, f.samples_per_class).unwrap_or(defaults.samples_per_class),
            epochs: pick(args.epochs, f.epochs).unwrap_or(defaults.epochs),
            learning_rate: pick(args.learning_rate, f.learning_rate).unwrap_or(defaults.learning_rate),
            seed: pick(args.seed, f.seed).or(file.seed).unwrap_or(defaults.seed),
            include_bias: !switch(args.no_bias, f.no_bias),
            ..defaults
        },
        threshold: pick(args.threshold, f.threshold).unwrap_or(DEFAULT_THRESHOLD),
        fraction: pick(args.fraction, f.fraction),
    };
    settings.probe.validate().or_exit(Exit::Input)?;
    let mut recorder = Recorder::start("probe", &settings, Some(settings.probe.seed));
    recorder.input(&settings.trace);

    let trace = load_trace(&settings.trace)?;
    let run = probe_heads(&trace, &settings.probe).map_err(|e| Failure::new(probe_exit(&e), e.into()))?;
    for a in &run.sample.advisories {
        eprintln!("advisory: {a}");
        recorder.note(a.clone());
    }
    let map = &run.map;

    let mut json = map.to_json().into_bytes();
    json.push(b'\n');
    write_file(&settings.output, &json)?;
    write_file(&settings.grid, grid_csv(map).as_bytes())?;

    println!(
        "probed {} heads on {}/{}/{} train/val/test steps ({} + {} per class)",
        map.head_count(),
        map.split_sizes[0],
        map.split_sizes[1],
        map.split_sizes[2],
        map.samples_per_class[0],
        map.samples_per_class[1]
    );
    println!("test accuracy (* marks > {}):", settings.threshold);
    let mut line = String::from("     ");
    for h in 0..map.num_heads {
        let _ = write!(line, "{:>8}", format!("H{h}"));
    }
    println!("{line}");
    let mut above = 0;
    for (l, row) in map.test_accuracy.iter().enumerate() {
        let mut line = format!("{:<5}", format!("L{l}"));
        for &a in row {
            let mark = if a > settings.threshold { '*' } else { ' ' };
            above += (a > settings.threshold) as usize;
            let _ = write!(line, " {a:>6.3}{mark}");
        }
        println!("{line}");
    }
    println!("{above} head(s) above {}", settings.threshold);
    if let Some(fraction) = settings.fraction {
        let heads = rank_heads(map, fraction).or_exit(Exit::Input)?;
        let names: Vec<String> = heads.iter().map(|h| h.to_string()).collect();
        println!("fraction {fraction} selects {} of {} heads: {}", heads.len(), map.head_count(), names.join(" "));
    }
    finish_manifest(recorder, &settings.output, std::slice::from_ref(&settings.grid))
}
