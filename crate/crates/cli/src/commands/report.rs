use std::io::BufRead;
use std::path::PathBuf;

use anyhow::Context;
use serde::Serialize;

use super::{finish_manifest, open, write_file};
use crate::args::ReportArgs;
use crate::config::{pick, required, FileConfig};
use crate::exit::{fail, Exit, Failure, OrExit};
use crate::manifest::Recorder;

pub const DEFAULT_PERCENTILE: f64 = 0.8;
pub const DEFAULT_BINS: usize = 10;

#[derive(Serialize)]
struct Settings {
    input: PathBuf,
    percentile: f64,
    bins: usize,
    output: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub samples: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub percentile: f64,
    pub threshold: f64,
    pub bins: Vec<Bin>,
}

/// Smallest value with at least `p` of the samples at or below it
/// (the `ceil(p * n)`-th order statistic). `sorted` must be ascending and non-empty.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Equal-width bins over `[min, max]`; the last bin is closed.
pub fn histogram(sorted: &[f64], bins: usize) -> Vec<Bin> {
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if min == max {
        return vec![Bin { lo: min, hi: max, count: sorted.len() }];
    }
    let width = (max - min) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin { lo: min + i as f64 * width, hi: if i + 1 == bins { max } else { min + (i + 1) as f64 * width }, count: 0 })
        .collect();
    for &v in sorted {
        let i = (((v - min) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

pub fn build_report(mut values: Vec<f64>, percentile: f64, bins: usize) -> Report {
    values.sort_by(f64::total_cmp);
    Report {
        samples: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        min: values[0],
        max: values[values.len() - 1],
        percentile,
        threshold: nearest_rank(&values, percentile),
        bins: histogram(&values, bins),
    }
}

pub fn run(args: ReportArgs, file: &FileConfig) -> Result<(), Failure> {
    let f = &file.report;
    let settings = Settings {
        input: required(pick(args.input, f.input.clone()), "input", "report")?,
        percentile: pick(args.percentile, f.percentile).unwrap_or(DEFAULT_PERCENTILE),
        bins: pick(args.bins, f.bins).unwrap_or(DEFAULT_BINS),
        output: pick(args.output, f.output.clone()),
    };
    if !(settings.percentile > 0.0 && settings.percentile <= 1.0) {
        return fail(Exit::Input, format!("percentile must lie in (0, 1], got {}", settings.percentile));
    }
    if settings.bins == 0 {
        return fail(Exit::Input, "bins must be at least 1");
    }
    let mut recorder = Recorder::start("report", &settings, None);
    recorder.input(&settings.input);

    let mut values = Vec::new();
    for (n, line) in open(&settings.input)?.lines().enumerate() {
        let line = line.with_context(|| format!("cannot read {}", settings.input.display())).or_exit(Exit::Input)?;
        let t = line.split('#').next().unwrap_or("").trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .with_context(|| format!("{}:{}: {t:?} is not a number", settings.input.display(), n + 1))
            .or_exit(Exit::Input)?;
        values.push(v);
    }
    if values.is_empty() {
        return fail(Exit::Input, format!("{} holds no counts", settings.input.display()));
    }
    let report = build_report(values, settings.percentile, settings.bins);

    println!("samples: {}", report.samples);
    println!("mean: {:.2}", report.mean);
    println!("min: {}  max: {}", report.min, report.max);
    let peak = report.bins.iter().map(|b| b.count).max().unwrap_or(1).max(1);
    for b in &report.bins {
        let marker = if b.lo <= report.threshold && report.threshold <= b.hi { "  <- threshold" } else { "" };
        let bar = "#".repeat((b.count * 40).div_ceil(peak));
        println!("[{:>10.1}, {:>10.1}] {:>7} {bar}{marker}", b.lo, b.hi, b.count);
    }
    println!("{}% coverage threshold: {}", report.percentile * 100.0, report.threshold);

    if let Some(out) = &settings.output {
        let mut json = serde_json::to_vec_pretty(&report).or_exit(Exit::Input)?;
        json.push(b'\n');
        write_file(out, &json)?;
        finish_manifest(recorder, out, &[])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_examples() {
        let v = [10.0, 20.0, 30.0, 40.0, 50.0];
        assert_eq!(nearest_rank(&v, 0.8), 40.0);
        assert_eq!(nearest_rank(&v, 1.0), 50.0);
        assert_eq!(nearest_rank(&v, 0.01), 10.0);
        assert_eq!(nearest_rank(&[7.0], 0.8), 7.0);
    }

    #[test]
    fn histogram_counts_everything_once() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let h = histogram(&v, 7);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 100);
        assert_eq!(h.len(), 7);
        assert_eq!(histogram(&[3.0, 3.0], 5).len(), 1);
    }
}
