//! Steering profiles and the CRSP v1 file format.
//!
//! ```text
//! 0..4    b"CRSP"
//! 4..6    version (u16 LE) = 1
//! 6..10   header block length (u32 LE)
//! ...     header block: UTF-8 JSON (ProfileHeader)
//! ...     for each head in header order: head_dim f32 LE
//! ```
//!
//! Rotate profiles store the unit denoised direction, additive profiles the
//! raw prototype.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::Digest;
use thiserror::Error;

use crate::probe::{selection_size, ProbeConfig};
use crate::trace::{HashingWriter, HeadId};

pub const MAGIC: &[u8; 4] = b"CRSP";
pub const VERSION: u16 = 1;
const MAX_HEADER_LEN: u32 = 64 * 1024 * 1024;

/// Tolerance on `| ||v|| - 1 |` for rotate-mode directions.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt profile at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("invalid profile: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SteerMode {
    /// Norm-preserving rejection of the steering direction.
    #[default]
    Rotate,
    /// `x - alpha * v`.
    Additive,
}

impl std::str::FromStr for SteerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rotate" => Ok(Self::Rotate),
            "additive" => Ok(Self::Additive),
            other => Err(format!("unknown steering mode {other:?} (expected rotate or additive)")),
        }
    }
}

/// How many leading eigenvectors span the denoising subspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaSetting {
    Components(usize),
    /// Smallest `n` whose cumulative explained variance reaches the threshold.
    VarianceThreshold(f64),
}

impl PcaSetting {
    pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.99;

    /// 100 components for `d >= 128`, otherwise `ceil(0.8 d)`.
    pub fn default_for(head_dim: usize) -> Self {
        if head_dim >= 128 {
            Self::Components(100)
        } else {
            Self::Components((0.8 * head_dim as f64).ceil() as usize)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub trace_digest: String,
    pub accuracy_map_digest: String,
    pub probe_config: ProbeConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub head: HeadId,
    /// The vector applied at steering time.
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringProfile {
    pub model_id: String,
    pub num_layers: u16,
    pub num_heads: u16,
    pub head_dim: u32,
    pub mode: SteerMode,
    pub alpha: f64,
    pub fraction: f64,
    pub pca: PcaSetting,
    /// Subspace size actually used per layer.
    pub layer_components: BTreeMap<u16, usize>,
    /// In rank order, most accurate first.
    pub entries: Vec<ProfileEntry>,
    /// Selected heads whose denoised direction vanished.
    pub dropped: Vec<HeadId>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ProfileHeader {
    model_id: String,
    num_layers: u16,
    num_heads: u16,
    head_dim: u32,
    mode: SteerMode,
    alpha: f64,
    fraction: f64,
    pca: PcaSetting,
    layer_components: BTreeMap<u16, usize>,
    heads: Vec<HeadId>,
    dropped: Vec<HeadId>,
    provenance: Provenance,
}

impl SteeringProfile {
    /// A profile with no entries; applying it leaves every frame unchanged.
    pub fn empty(head_dim: u32, mode: SteerMode) -> Self {
        Self {
            model_id: String::new(),
            num_layers: 0,
            num_heads: 0,
            head_dim,
            mode,
            alpha: 0.0,
            fraction: 0.0,
            pca: PcaSetting::Components(head_dim as usize),
            layer_components: BTreeMap::new(),
            entries: Vec::new(),
            dropped: Vec::new(),
            provenance: Provenance {
                trace_digest: String::new(),
                accuracy_map_digest: String::new(),
                probe_config: ProbeConfig::default(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.head_dim as usize
    }

    pub fn entry(&self, head: HeadId) -> Option<&ProfileEntry> {
        self.entries.iter().find(|e| e.head == head)
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<u64, ProfileError> {
        let d = self.dim();
        if let Some(e) = self.entries.iter().find(|e| e.vector.len() != d) {
            return Err(ProfileError::Invalid(format!(
                "head {} has {} values, expected {d}",
                e.head,
                e.vector.len()
            )));
        }
        let header = ProfileHeader {
            model_id: self.model_id.clone(),
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            mode: self.mode,
            alpha: self.alpha,
            fraction: self.fraction,
            pca: self.pca,
            layer_components: self.layer_components.clone(),
            heads: self.entries.iter().map(|e| e.head).collect(),
            dropped: self.dropped.clone(),
            provenance: self.provenance.clone(),
        };
        let block = serde_json::to_vec(&header).map_err(|e| ProfileError::Invalid(e.to_string()))?;
        let len = u32::try_from(block.len()).map_err(|_| ProfileError::Invalid("header too large".into()))?;
        sink.write_all(MAGIC)?;
        sink.write_all(&VERSION.to_le_bytes())?;
        sink.write_all(&len.to_le_bytes())?;
        sink.write_all(&block)?;
        let mut buf = Vec::with_capacity(4 * d);
        for e in &self.entries {
            buf.clear();
            for v in &e.vector {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            sink.write_all(&buf)?;
        }
        sink.flush()?;
        Ok(10 + block.len() as u64 + (self.entries.len() * 4 * d) as u64)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ProfileError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self, ProfileError> {
        let mut pre = [0u8; 10];
        read_full(&mut source, &mut pre, 0).map_err(|_| ProfileError::UnsupportedFormat("shorter than CRSP preamble".into()))?;
        if &pre[0..4] != MAGIC {
            return Err(ProfileError::UnsupportedFormat(format!("bad magic {:02x?}", &pre[0..4])));
        }
        let version = u16::from_le_bytes([pre[4], pre[5]]);
        if version != VERSION {
            return Err(ProfileError::UnsupportedFormat(format!("CRSP version {version} (expected {VERSION})")));
        }
        let len = u32::from_le_bytes(pre[6..10].try_into().unwrap());
        if len > MAX_HEADER_LEN {
            return Err(ProfileError::Corrupt { offset: 6, reason: format!("header length {len} exceeds limit") });
        }
        let mut block = vec![0u8; len as usize];
        read_full(&mut source, &mut block, 10)?;
        let header: ProfileHeader = serde_json::from_slice(&block)
            .map_err(|e| ProfileError::Corrupt { offset: 10, reason: format!("invalid header block: {e}") })?;
        let d = header.head_dim as usize;
        let mut offset = 10 + len as u64;
        let mut buf = vec![0u8; 4 * d];
        let mut entries = Vec::with_capacity(header.heads.len());
        for &head in &header.heads {
            read_full(&mut source, &mut buf, offset)?;
            offset += buf.len() as u64;
            let vector = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push(ProfileEntry { head, vector });
        }
        let mut extra = [0u8; 1];
        if source.read(&mut extra)? != 0 {
            return Err(ProfileError::Corrupt { offset, reason: "trailing bytes after last vector".into() });
        }
        Ok(Self {
            model_id: header.model_id,
            num_layers: header.num_layers,
            num_heads: header.num_heads,
            head_dim: header.head_dim,
            mode: header.mode,
            alpha: header.alpha,
            fraction: header.fraction,
            pca: header.pca,
            layer_components: header.layer_components,
            entries,
            dropped: header.dropped,
            provenance: header.provenance,
        })
    }

    /// SHA-256 of the canonical CRSP encoding.
    pub fn digest(&self) -> Result<[u8; 32], ProfileError> {
        let mut w = HashingWriter::default();
        self.write_to(&mut w)?;
        Ok(w.hasher.finalize().into())
    }

    /// Lists every broken invariant; empty when the profile is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = self.dim();
        if d == 0 {
            out.push("head_dim is 0".to_string());
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.head) {
                out.push(format!("duplicate head {}", e.head));
            }
            if self.num_layers > 0 && (e.head.layer >= self.num_layers || e.head.head >= self.num_heads) {
                out.push(format!("head {} outside {}x{} grid", e.head, self.num_layers, self.num_heads));
            }
            if e.vector.len() != d {
                out.push(format!("head {}: {} values, expected {d}", e.head, e.vector.len()));
                continue;
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                out.push(format!("head {}: non-finite vector component", e.head));
                continue;
            }
            if self.mode == SteerMode::Rotate {
                let norm = e.vector.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    out.push(format!("head {}: direction norm {norm} is not 1 within {UNIT_NORM_TOL:e}", e.head));
                }
            }
        }
        if self.mode == SteerMode::Additive && !self.alpha.is_finite() {
            out.push(format!("alpha {} is not finite", self.alpha));
        }
        let total = self.num_layers as usize * self.num_heads as usize;
        if total > 0 {
            let expected = selection_size(self.fraction, total);
            if self.entries.len() + self.dropped.len() != expected {
                out.push(format!(
                    "{} entries + {} dropped != ceil({} * {total}) = {expected}",
                    self.entries.len(),
                    self.dropped.len(),
                    self.fraction
                ));
            }
        }
        out
    }
}

fn read_full<R: Read>(source: &mut R, buf: &mut [u8], offset: u64) -> Result<(), ProfileError> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(ProfileError::Corrupt {
                    offset: offset + filled as u64,
                    reason: format!("truncated: got {filled} of {} bytes", buf.len()),
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}
