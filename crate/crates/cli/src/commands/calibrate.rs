use std::path::PathBuf;

use anyhow::Context;
use headsteer_core::calib::{build_profile, CalibError, CalibSettings};
use headsteer_core::probe::AccuracyMap;
use headsteer_core::profile::{PcaSetting, SteerMode};
use serde::Serialize;

use super::probe::probe_exit;
use super::{finish_manifest, load_trace, write_file};
use crate::args::CalibrateArgs;
use crate::config::{pick, required, FileConfig};
use crate::exit::{fail, Exit, Failure, OrExit};
use crate::manifest::Recorder;

#[derive(Serialize)]
struct Settings {
    trace: PathBuf,
    acc_map: PathBuf,
    output: PathBuf,
    fraction: f64,
    pca: Option<PcaSetting>,
    mode: SteerMode,
    alpha: f64,
}

fn calib_exit(e: &CalibError) -> Exit {
    match e {
        CalibError::Provenance(_) => Exit::Provenance,
        CalibError::NoSignal(_) | CalibError::InsufficientData(_) | CalibError::DegenerateCovariance => Exit::Data,
        CalibError::Probe(p) => probe_exit(p),
        CalibError::Parameter(_) | CalibError::Trace(_) => Exit::Input,
    }
}

pub fn run(args: CalibrateArgs, file: &FileConfig) -> Result<(), Failure> {
    let f = &file.calibrate;
    let defaults = CalibSettings::default();
    // the two PCA flags are alternatives, so they override the file as a pair
    let (components, variance) = if args.pca_components.is_some() || args.pca_variance.is_some() {
        (args.pca_components, args.pca_variance)
    } else {
        (f.pca_components, f.pca_variance)
    };
    let pca = match (components, variance) {
        (Some(_), Some(_)) => return fail(Exit::Input, "pca_components and pca_variance are mutually exclusive"),
        (Some(n), None) => Some(PcaSetting::Components(n)),
        (None, Some(t)) => Some(PcaSetting::VarianceThreshold(t)),
        (None, None) => None,
    };
    let mode = match pick(args.mode, f.mode.clone()) {
        Some(m) => m.parse::<SteerMode>().map_err(anyhow::Error::msg).or_exit(Exit::Input)?,
        None => defaults.mode,
    };
    let settings = Settings {
        trace: required(pick(args.trace, f.trace.clone()), "trace", "calibrate")?,
        acc_map: required(pick(args.acc_map, f.acc_map.clone()), "acc-map", "calibrate")?,
        output: required(pick(args.output, f.output.clone()), "output", "calibrate")?,
        fraction: pick(args.fraction, f.fraction).unwrap_or(defaults.fraction),
        pca,
        mode,
        alpha: pick(args.alpha, f.alpha).unwrap_or(defaults.alpha),
    };
    let mut recorder = Recorder::start("calibrate", &settings, None);
    recorder.input(&settings.trace);
    recorder.input(&settings.acc_map);

    let trace = load_trace(&settings.trace)?;
    let text = std::fs::read_to_string(&settings.acc_map)
        .with_context(|| format!("cannot read {}", settings.acc_map.display()))
        .or_exit(Exit::Input)?;
    let map = AccuracyMap::from_json(&text)
        .with_context(|| format!("{} is not an accuracy map", settings.acc_map.display()))
        .or_exit(Exit::Input)?;

    let calib_settings = CalibSettings { fraction: settings.fraction, pca: settings.pca, mode: settings.mode, alpha: settings.alpha };
    let calibration = build_profile(&trace, &map, &calib_settings).map_err(|e| Failure::new(calib_exit(&e), e.into()))?;
    for w in &calibration.warnings {
        eprintln!("warning: {w}");
        recorder.note(w.clone());
    }
    let profile = &calibration.profile;
    let bytes = profile.to_bytes().or_exit(Exit::Input)?;
    write_file(&settings.output, &bytes)?;

    let mode = match profile.mode {
        SteerMode::Rotate => "rotate".to_string(),
        SteerMode::Additive => format!("additive, alpha {}", profile.alpha),
    };
    println!(
        "profile: {} heads steered ({} dropped), {mode}, fraction {}, d = {}",
        profile.entries.len(),
        profile.dropped.len(),
        profile.fraction,
        profile.head_dim
    );
    for (layer, n) in &profile.layer_components {
        println!("layer {layer}: {n} principal components");
    }
    let heads: Vec<String> = profile.entries.iter().map(|e| e.head.to_string()).collect();
    println!("heads: {}", heads.join(" "));
    println!("digest: {}", hex::encode(profile.digest().or_exit(Exit::Input)?));
    finish_manifest(recorder, &settings.output, &[])
}
