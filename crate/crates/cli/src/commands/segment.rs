use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use anyhow::Context;
use headsteer_core::segment::{extract_think_region, segment_and_label, KeywordSet};
use serde::{Deserialize, Serialize};

use super::{create, finish_manifest, open, sibling, write_file};
use crate::args::SegmentArgs;
use crate::config::{pick, required, switch, FileConfig};
use crate::exit::{Exit, Failure, OrExit};
use crate::manifest::Recorder;

#[derive(Deserialize)]
struct Trajectory {
    #[serde(default)]
    id: Option<serde_json::Value>,
    text: String,
}

#[derive(Serialize)]
struct StepOut<'a> {
    trajectory: &'a str,
    index: usize,
    label: u8,
    keyword: Option<&'a str>,
    text: &'a str,
}

#[derive(Debug, Default, Serialize)]
pub struct SegmentStats {
    pub trajectories: usize,
    pub steps: usize,
    pub nonlinear_steps: usize,
    pub linear_steps: usize,
    /// `None` when there are no trajectories.
    pub mean_steps_per_trajectory: Option<f64>,
    pub keyword_counts: BTreeMap<String, usize>,
    pub partial_think_regions: usize,
    pub missing_think_markers: usize,
}

#[derive(Serialize)]
struct Settings {
    input: PathBuf,
    output: PathBuf,
    keywords: Option<PathBuf>,
    think_region: bool,
}

pub fn run(args: SegmentArgs, file: &FileConfig) -> Result<(), Failure> {
    let f = &file.segment;
    let settings = Settings {
        input: required(pick(args.input, f.input.clone()), "input", "segment")?,
        output: required(pick(args.output, f.output.clone()), "output", "segment")?,
        keywords: pick(args.keywords, f.keywords.clone()),
        think_region: switch(args.think_region, f.think_region),
    };
    let mut recorder = Recorder::start("segment", &settings, None);
    recorder.input(&settings.input);

    let keywords = match &settings.keywords {
        Some(path) => {
            recorder.input(path);
            let kw = KeywordSet::from_reader(open(path)?).with_context(|| format!("bad keyword file {}", path.display())).or_exit(Exit::Input)?;
            recorder.note(format!("keywords: {} phrases from {}", kw.keywords().len(), path.display()));
            kw
        }
        None => {
            recorder.note("keywords: built-in default set (no keyword file given)");
            KeywordSet::default()
        }
    };

    let input = open(&settings.input)?;
    let mut out = create(&settings.output)?;
    let mut stats = SegmentStats::default();
    for (n, line) in input.lines().enumerate() {
        let line = line.with_context(|| format!("cannot read {}", settings.input.display())).or_exit(Exit::Input)?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: expected a JSON object with a \"text\" field", settings.input.display(), n + 1))
            .or_exit(Exit::Input)?;
        let id = match &traj.id {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(other) => other.to_string(),
            None => stats.trajectories.to_string(),
        };
        let text = if settings.think_region {
            let region = extract_think_region(&traj.text).with_context(|| format!("trajectory {id}")).or_exit(Exit::Input)?;
            stats.partial_think_regions += region.partial as usize;
            stats.missing_think_markers += region.marker_absent as usize;
            region.text
        } else {
            traj.text.as_str()
        };
        let steps = segment_and_label(text, &keywords);
        stats.trajectories += 1;
        for s in &steps {
            stats.steps += 1;
            if s.label == 1 {
                stats.nonlinear_steps += 1;
            } else {
                stats.linear_steps += 1;
            }
            if let Some(k) = &s.matched_keyword {
                *stats.keyword_counts.entry(k.clone()).or_default() += 1;
            }
            let row = StepOut { trajectory: &id, index: s.index, label: s.label, keyword: s.matched_keyword.as_deref(), text: &s.text };
            serde_json::to_writer(&mut out, &row).or_exit(Exit::Input)?;
            out.write_all(b"\n").or_exit(Exit::Input)?;
        }
    }
    out.flush().or_exit(Exit::Input)?;
    drop(out);
    if stats.trajectories > 0 {
        stats.mean_steps_per_trajectory = Some(stats.steps as f64 / stats.trajectories as f64);
    }

    println!("trajectories: {}", stats.trajectories);
    println!("steps: {} ({} non-linear, {} linear)", stats.steps, stats.nonlinear_steps, stats.linear_steps);
    match stats.mean_steps_per_trajectory {
        Some(m) => println!("mean steps per trajectory: {m:.2}"),
        None => println!("mean steps per trajectory: n/a"),
    }
    for (k, n) in &stats.keyword_counts {
        println!("keyword {k:?}: {n}");
    }

    let stats_path = sibling(&settings.output, ".stats.json");
    let mut json = serde_json::to_vec_pretty(&stats).or_exit(Exit::Input)?;
    json.push(b'\n');
    write_file(&stats_path, &json)?;
    finish_manifest(recorder, &settings.output, &[stats_path])
}
