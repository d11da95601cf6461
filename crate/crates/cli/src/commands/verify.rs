use std::path::PathBuf;

use anyhow::Context;
use headsteer_client::{ClientError, SteerClient};
use headsteer_core::profile::{SteerMode, SteeringProfile};
use headsteer_core::steer::{apply_profile, steer_rotate, HeadActivation};
use headsteer_core::synth::{evaluate_ranking, GroundTruth, RecoveryMetrics};
use headsteer_core::wire::SteerFrame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{finish_manifest, load_profile, load_trace, write_file};
use crate::args::VerifyArgs;
use crate::config::{pick, required, FileConfig};
use crate::exit::{fail, Exit, Failure, OrExit};
use crate::manifest::Recorder;

pub const DEFAULT_FRAMES: usize = 1000;
pub const DEFAULT_SEED: u64 = 0;
const TOL: f64 = 1e-5;

#[derive(Serialize)]
struct Settings {
    profile: PathBuf,
    trace: Option<PathBuf>,
    truth: Option<PathBuf>,
    frames: usize,
    seed: u64,
    endpoint: Option<String>,
    min_recall: Option<f64>,
    min_cosine: Option<f64>,
    output: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    passed: bool,
    detail: String,
}

#[derive(Serialize)]
struct VerifyReport {
    profile_digest: String,
    checks: Vec<Check>,
    recovery: Option<RecoveryMetrics>,
}

#[derive(Default)]
struct Checks(Vec<Check>);

impl Checks {
    fn add(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        let detail = detail.into();
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.0.push(Check { name: name.to_string(), passed, detail });
    }
}

fn norm(x: &[f32]) -> f64 {
    x.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn random_x(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let scale = 10f32.powi(rng.random_range(-3..4));
    (0..d).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect()
}

/// Worst-case rotate invariant errors over random inputs, all relative to `||x||`.
fn rotate_checks(profile: &SteeringProfile, frames: usize, rng: &mut ChaCha8Rng, checks: &mut Checks) {
    let (mut norm_err, mut ortho_err, mut idem_err) = (0f64, 0f64, 0f64);
    let mut parallel_ok = true;
    let d = profile.dim();
    for _ in 0..frames {
        for e in &profile.entries {
            let x = random_x(rng, d);
            let Ok(out) = steer_rotate(&x, &e.vector) else {
                norm_err = f64::INFINITY;
                continue;
            };
            let nx = norm(&x);
            norm_err = norm_err.max((norm(&out) - nx).abs() / nx);
            if out != x {
                ortho_err = ortho_err.max(dot(&out, &e.vector).abs() / nx);
            }
            if let Ok(again) = steer_rotate(&out, &e.vector) {
                let diff: Vec<f32> = again.iter().zip(&out).map(|(a, b)| a - b).collect();
                idem_err = idem_err.max(norm(&diff) / nx);
            }
            let c = rng.random_range(-10.0f32..10.0);
            let parallel: Vec<f32> = e.vector.iter().map(|v| v * c).collect();
            parallel_ok &= steer_rotate(&parallel, &e.vector).map(|o| o == parallel).unwrap_or(false);
        }
    }
    checks.add("rotate norm preservation", norm_err <= TOL, format!("max relative error {norm_err:.2e} (limit {TOL:e})"));
    checks.add("rotate orthogonality", ortho_err <= TOL, format!("max |x̂ᵀv| / ||x|| {ortho_err:.2e} (limit {TOL:e})"));
    checks.add("rotate idempotence", idem_err <= TOL, format!("max relative change {idem_err:.2e} (limit {TOL:e})"));
    checks.add("rotate parallel guard", parallel_ok, "inputs parallel to v come back unchanged");
}

fn additive_checks(profile: &SteeringProfile, frames: usize, rng: &mut ChaCha8Rng, checks: &mut Checks) {
    let mut worst = 0f64;
    let d = profile.dim();
    for _ in 0..frames {
        let frame: Vec<HeadActivation> =
            profile.entries.iter().map(|e| HeadActivation { head: e.head, x: random_x(rng, d) }).collect();
        let Ok(out) = apply_profile(&frame, profile) else {
            worst = f64::INFINITY;
            continue;
        };
        for ((a, o), e) in frame.iter().zip(&out).zip(&profile.entries) {
            for ((&x, &y), &v) in a.x.iter().zip(&o.x).zip(&e.vector) {
                let want = x as f64 - profile.alpha * v as f64;
                // one f32 rounding of the exact value
                worst = worst.max((y as f64 - want).abs() / want.abs().max(f32::MIN_POSITIVE as f64));
            }
        }
    }
    checks.add("additive edit", worst <= f32::EPSILON as f64, format!("max relative deviation from x - alpha v {worst:.2e}"));
}

fn passthrough_check(profile: &SteeringProfile, rng: &mut ChaCha8Rng, checks: &mut Checks) {
    if profile.num_layers == 0 {
        return;
    }
    let stranger = (0..profile.num_layers)
        .flat_map(|l| (0..profile.num_heads).map(move |h| headsteer_core::HeadId::new(l, h)))
        .find(|h| profile.entry(*h).is_none());
    if let Some(head) = stranger {
        let frame = vec![HeadActivation { head, x: random_x(rng, profile.dim()) }];
        let ok = apply_profile(&frame, profile).map(|o| o == frame).unwrap_or(false);
        checks.add("unprofiled heads untouched", ok, format!("{head} passes through unchanged"));
    }
}

fn ranking(profile: &SteeringProfile) -> Vec<headsteer_core::HeadId> {
    profile.entries.iter().map(|e| e.head).chain(profile.dropped.iter().copied()).collect()
}

async fn endpoint_check(endpoint: &str, profile: &SteeringProfile, digest: [u8; 32], frames: usize, seed: u64, checks: &mut Checks) -> Result<(), Failure> {
    let mut client = match SteerClient::connect(endpoint, Some(digest)).await {
        Ok(c) => c,
        Err(ClientError::Server { code, message }) => {
            checks.add("service handshake", false, format!("server refused: error {code}: {message}"));
            return Ok(());
        }
        Err(e) => return Err(Failure::new(Exit::Network, anyhow::Error::new(e).context(format!("cannot reach {endpoint}")))),
    };
    checks.add("service handshake", true, format!("{endpoint} serves this profile (d = {})", client.session().head_dim));
    if profile.entries.is_empty() {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut mismatches = 0usize;
    for i in 0..frames {
        let k = rng.random_range(1..=profile.entries.len());
        let entries: Vec<HeadActivation> = (0..k)
            .map(|_| {
                let e = &profile.entries[rng.random_range(0..profile.entries.len())];
                HeadActivation { head: e.head, x: random_x(&mut rng, profile.dim()) }
            })
            .collect();
        let frame = SteerFrame { request_id: i as u64, entries };
        let served = match client.steer_frame(&frame).await {
            Ok(s) => s,
            Err(ClientError::Server { code, message }) => {
                checks.add("service equivalence", false, format!("frame {i}: error {code}: {message}"));
                return Ok(());
            }
            Err(e) => return Err(Failure::new(Exit::Network, anyhow::Error::new(e).context("connection lost"))),
        };
        let local = apply_profile(&frame.entries, profile).or_exit(Exit::Verification)?;
        let same = served.entries.len() == local.len()
            && served.entries.iter().zip(&local).all(|(a, b)| {
                a.head == b.head && a.x.len() == b.x.len() && a.x.iter().zip(&b.x).all(|(p, q)| p.to_bits() == q.to_bits())
            });
        mismatches += !same as usize;
    }
    checks.add("service equivalence", mismatches == 0, format!("{mismatches} of {frames} served frames differ bitwise from in-process steering"));
    Ok(())
}

pub fn run(args: VerifyArgs, file: &FileConfig) -> Result<(), Failure> {
    let f = &file.verify;
    let settings = Settings {
        profile: required(pick(args.profile, f.profile.clone()), "profile", "verify")?,
        trace: pick(args.trace, f.trace.clone()),
        truth: pick(args.truth, f.truth.clone()),
        frames: pick(args.frames, f.frames).unwrap_or(DEFAULT_FRAMES),
        seed: pick(args.seed, f.seed).or(file.seed).unwrap_or(DEFAULT_SEED),
        endpoint: pick(args.endpoint, f.endpoint.clone()),
        min_recall: pick(args.min_recall, f.min_recall),
        min_cosine: pick(args.min_cosine, f.min_cosine),
        output: pick(args.output, f.output.clone()),
    };
    if (settings.min_recall.is_some() || settings.min_cosine.is_some()) && settings.truth.is_none() {
        return fail(Exit::Input, "--min-recall and --min-cosine need --truth");
    }
    let mut recorder = Recorder::start("verify", &settings, Some(settings.seed));
    recorder.input(&settings.profile);

    let profile = load_profile(&settings.profile, Exit::Verification)?;
    let digest = profile.digest().or_exit(Exit::Verification)?;
    let mut checks = Checks::default();
    let violations = profile.violations();
    checks.add(
        "profile invariants",
        violations.is_empty(),
        if violations.is_empty() { format!("{} entries, d = {}", profile.entries.len(), profile.head_dim) } else { violations.join("; ") },
    );

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    if violations.is_empty() {
        match profile.mode {
            SteerMode::Rotate => rotate_checks(&profile, settings.frames, &mut rng, &mut checks),
            SteerMode::Additive => additive_checks(&profile, settings.frames, &mut rng, &mut checks),
        }
        passthrough_check(&profile, &mut rng, &mut checks);
    }

    if let Some(path) = &settings.trace {
        recorder.input(path);
        let trace = load_trace(path)?;
        let h = &trace.header;
        let shape_ok = (h.num_layers, h.num_heads, h.head_dim) == (profile.num_layers, profile.num_heads, profile.head_dim);
        checks.add("trace shape", shape_ok, format!("trace {}x{} d={}, profile {}x{} d={}", h.num_layers, h.num_heads, h.head_dim, profile.num_layers, profile.num_heads, profile.head_dim));
        let trace_digest = trace.digest().or_exit(Exit::Input)?;
        checks.add(
            "trace provenance",
            trace_digest == profile.provenance.trace_digest,
            format!("trace digest {trace_digest}, profile records {}", profile.provenance.trace_digest),
        );
    }

    let mut recovery = None;
    if let Some(path) = &settings.truth {
        recorder.input(path);
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display())).or_exit(Exit::Input)?;
        let truth = GroundTruth::from_json(&text).with_context(|| format!("{} is not a ground-truth file", path.display())).or_exit(Exit::Input)?;
        match evaluate_ranking(&ranking(&profile), &profile, &truth) {
            Ok(m) => {
                println!(
                    "recovery: recall {:.3}, precision {:.3} at k = {}, mean |cos| {:.4}, mean subspace capture {:.4}",
                    m.recall, m.precision, m.k, m.mean_abs_cosine, m.mean_subspace_capture
                );
                if let Some(min) = settings.min_recall {
                    checks.add("recall", m.recall >= min, format!("{:.3} (minimum {min})", m.recall));
                }
                if let Some(min) = settings.min_cosine {
                    checks.add("mean |cosine|", m.mean_abs_cosine >= min, format!("{:.4} (minimum {min})", m.mean_abs_cosine));
                }
                recovery = Some(m);
            }
            Err(e) => checks.add("ground truth shape", false, e.to_string()),
        }
    }

    if let Some(endpoint) = &settings.endpoint {
        let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build().or_exit(Exit::Network)?;
        runtime.block_on(endpoint_check(endpoint, &profile, digest, settings.frames, settings.seed, &mut checks))?;
    }

    let failed: Vec<String> = checks.0.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    if let Some(out) = &settings.output {
        let report = VerifyReport { profile_digest: hex::encode(digest), checks: checks.0, recovery };
        let mut json = serde_json::to_vec_pretty(&report).or_exit(Exit::Input)?;
        json.push(b'\n');
        write_file(out, &json)?;
        finish_manifest(recorder, out, &[])?;
    }
    if !failed.is_empty() {
        return fail(Exit::Verification, format!("failed: {}", failed.join(", ")));
    }
    println!("all checks passed");
    Ok(())
}
