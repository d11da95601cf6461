use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use headsteer_core::profile::{ProfileError, SteeringProfile};
use headsteer_core::trace::Trace;

use crate::args::{Cli, Command};
use crate::config::FileConfig;
use crate::exit::{Exit, Failure, OrExit};

mod calibrate;
mod probe;
mod report;
mod segment;
mod serve;
mod synth;
mod validate;
mod verify;

pub fn run(cli: Cli) -> Result<(), Failure> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Segment(a) => segment::run(a, &file),
        Command::Validate(a) => validate::run(a, &file),
        Command::Probe(a) => probe::run(a, &file),
        Command::Calibrate(a) => calibrate::run(a, &file),
        Command::Serve(a) => serve::run(a, &file),
        Command::Synth(a) => synth::run(a, &file),
        Command::Verify(a) => verify::run(a, &file),
        Command::Report(a) => report::run(a, &file),
    }
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).with_context(|| format!("cannot open {}", path.display())).or_exit(Exit::Input)
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).with_context(|| format!("cannot create {}", path.display())).or_exit(Exit::Input)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let mut w = create(path)?;
    w.write_all(bytes).and_then(|_| w.flush()).with_context(|| format!("cannot write {}", path.display())).or_exit(Exit::Input)
}

pub(crate) fn load_trace(path: &Path) -> Result<Trace, Failure> {
    let reader = open(path)?;
    Trace::read_from(reader)
        .with_context(|| format!("cannot read trace {}", path.display()))
        .or_exit(Exit::Input)
}

/// Parse failures of a readable file are reported with `corrupt_exit`.
pub(crate) fn load_profile(path: &Path, corrupt_exit: Exit) -> Result<SteeringProfile, Failure> {
    let reader = open(path)?;
    SteeringProfile::read_from(reader).map_err(|e| {
        let exit = if matches!(e, ProfileError::Io(_)) { Exit::Input } else { corrupt_exit };
        Failure::new(exit, anyhow::Error::new(e).context(format!("cannot read profile {}", path.display())))
    })
}

/// `path` with `suffix` appended to the full file name.
pub(crate) fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

pub(crate) fn finish_manifest(recorder: crate::manifest::Recorder, primary: &Path, extra: &[PathBuf]) -> Result<(), Failure> {
    let path = recorder.finish(primary, extra).or_exit(Exit::Input)?;
    eprintln!("manifest: {}", path.display());
    Ok(())
}
