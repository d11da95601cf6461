//! Activation traces and the CRTF v1 binary format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0..4    b"CRTF"
//! 4..6    version (u16) = 1
//! 6..10   header block length (u32)
//! ...     header block: UTF-8 JSON object (TraceHeader)
//! ...     num_steps records:
//!           prompt_id u32 | step_index u32 | label u8 | L*H*d f32
//! ```
//!
//! Activations are laid out layer-major, then head-major, then dimension.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"CRTF";
pub const VERSION: u16 = 1;
/// Magic, version and header-block length.
pub const PREAMBLE_LEN: u64 = 10;
/// prompt_id + step_index + label.
pub const RECORD_PREFIX_LEN: u64 = 9;

const MAX_HEADER_LEN: u32 = 16 * 1024 * 1024;

pub const LABEL_LINEAR: u8 = 0;
pub const LABEL_NONLINEAR: u8 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt trace at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TraceError>;

/// Index of one attention head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: u16,
    pub head: u16,
}

impl HeadId {
    pub const fn new(layer: u16, head: u16) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Parses the `L{layer}H{head}` form produced by `Display`, case-insensitively.
impl std::str::FromStr for HeadId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || format!("head {s:?} is not of the form L<layer>H<head>");
        let upper = s.trim().to_ascii_uppercase();
        let rest = upper.strip_prefix('L').ok_or_else(bad)?;
        let (layer, head) = rest.split_once('H').ok_or_else(bad)?;
        Ok(Self::new(layer.parse().map_err(|_| bad())?, head.parse().map_err(|_| bad())?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub model_id: String,
    pub num_layers: u16,
    pub num_heads: u16,
    pub head_dim: u32,
    pub num_prompts: u32,
    pub num_steps: u64,
    pub extraction_point: String,
    pub created_at: String,
}

impl TraceHeader {
    /// Number of f32 values in one record's activation block.
    pub fn record_values(&self) -> usize {
        self.num_layers as usize * self.num_heads as usize * self.head_dim as usize
    }

    pub fn record_bytes(&self) -> u64 {
        RECORD_PREFIX_LEN + 4 * self.record_values() as u64
    }

    pub fn head_count(&self) -> usize {
        self.num_layers as usize * self.num_heads as usize
    }

    /// All heads in (layer, head) order.
    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.num_layers).flat_map(move |l| (0..self.num_heads).map(move |h| HeadId::new(l, h)))
    }

    pub fn contains(&self, head: HeadId) -> bool {
        head.layer < self.num_layers && head.head < self.num_heads
    }

    /// Offset of `head`'s vector inside a record's activation block.
    pub fn head_offset(&self, head: HeadId) -> usize {
        (head.layer as usize * self.num_heads as usize + head.head as usize) * self.head_dim as usize
    }

    fn check_dims(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 {
            return Err(TraceError::Format(format!(
                "dimensions must be positive, got L={} H={} d={}",
                self.num_layers, self.num_heads, self.head_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub prompt_id: u32,
    pub step_index: u32,
    pub label: u8,
    pub activations: Vec<f32>,
}

impl StepRecord {
    pub fn is_nonlinear(&self) -> bool {
        self.label == LABEL_NONLINEAR
    }
}

/// A fully loaded trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<StepRecord>,
}

impl Trace {
    pub fn new(header: TraceHeader, records: Vec<StepRecord>) -> Self {
        Self { header, records }
    }

    pub fn dim(&self) -> usize {
        self.header.head_dim as usize
    }

    /// The activation vector of `head` in record `index`.
    pub fn activation(&self, index: usize, head: HeadId) -> &[f32] {
        let off = self.header.head_offset(head);
        &self.records[index].activations[off..off + self.dim()]
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn read_from<R: Read>(source: R) -> Result<Self> {
        read_trace_all(source)
    }

    pub fn write_to<W: Write>(&self, sink: W) -> Result<u64> {
        write_trace(&self.header, &self.records, sink)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(self.encoded_len() as usize);
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// Exact encoded size, excluding nothing.
    pub fn encoded_len(&self) -> u64 {
        let header_len = serde_json::to_vec(&self.header).map(|v| v.len()).unwrap_or(0) as u64;
        PREAMBLE_LEN + header_len + self.header.num_steps * self.header.record_bytes()
    }

    /// Hex SHA-256 of the canonical CRTF encoding.
    pub fn digest(&self) -> Result<String> {
        let mut w = HashingWriter::default();
        self.write_to(&mut w)?;
        Ok(hex::encode(w.hasher.finalize()))
    }
}

#[derive(Default)]
pub(crate) struct HashingWriter {
    pub(crate) hasher: Sha256,
}

impl Write for HashingWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.hasher.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Writes a CRTF v1 stream and returns the number of bytes written.
pub fn write_trace<W: Write>(header: &TraceHeader, records: &[StepRecord], mut sink: W) -> Result<u64> {
    header.check_dims()?;
    if records.len() as u64 != header.num_steps {
        return Err(TraceError::Format(format!(
            "header declares {} steps but {} records were given",
            header.num_steps,
            records.len()
        )));
    }
    let expected = header.record_values();
    if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| r.activations.len() != expected) {
        return Err(TraceError::Format(format!(
            "record {i}: activations length {} != L*H*d = {expected}",
            r.activations.len()
        )));
    }

    let header_block = serde_json::to_vec(header).map_err(|e| TraceError::Format(e.to_string()))?;
    let header_len = u32::try_from(header_block.len())
        .map_err(|_| TraceError::Format("header block too large".into()))?;

    sink.write_all(MAGIC)?;
    sink.write_all(&VERSION.to_le_bytes())?;
    sink.write_all(&header_len.to_le_bytes())?;
    sink.write_all(&header_block)?;
    let mut written = PREAMBLE_LEN + header_block.len() as u64;

    let mut buf = Vec::with_capacity(header.record_bytes() as usize);
    for r in records {
        buf.clear();
        buf.extend_from_slice(&r.prompt_id.to_le_bytes());
        buf.extend_from_slice(&r.step_index.to_le_bytes());
        buf.push(r.label);
        for v in &r.activations {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

/// Streaming record reader returned by [`read_trace`].
pub struct TraceRecords<R> {
    source: R,
    header: TraceHeader,
    remaining: u64,
    offset: u64,
    buf: Vec<u8>,
    failed: bool,
}

impl<R: Read> TraceRecords<R> {
    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    /// Byte offset of the next unread record.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn read_record(&mut self) -> Result<StepRecord> {
        let start = self.offset;
        read_full(&mut self.source, &mut self.buf, start, "record")?;
        self.offset += self.buf.len() as u64;
        let b = &self.buf;
        let prompt_id = u32::from_le_bytes(b[0..4].try_into().unwrap());
        let step_index = u32::from_le_bytes(b[4..8].try_into().unwrap());
        let label = b[8];
        let activations = b[9..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(StepRecord { prompt_id, step_index, label, activations })
    }
}

impl<R: Read> Iterator for TraceRecords<R> {
    type Item = Result<StepRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 || self.failed {
            return None;
        }
        let rec = self.read_record();
        match rec {
            Ok(_) => self.remaining -= 1,
            Err(_) => self.failed = true,
        }
        Some(rec)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = if self.failed { 0 } else { self.remaining as usize };
        (0, Some(n))
    }
}

/// Reads into `buf` completely, mapping a short read to a corruption error at `offset`.
fn read_full<R: Read>(source: &mut R, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(TraceError::Corrupt {
                    offset: offset + filled as u64,
                    reason: format!("truncated {what}: got {filled} of {} bytes", buf.len()),
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Parses the preamble and header block, returning the header and a record iterator.
pub fn read_trace<R: Read>(mut source: R) -> Result<(TraceHeader, TraceRecords<R>)> {
    let mut pre = [0u8; PREAMBLE_LEN as usize];
    read_full(&mut source, &mut pre, 0, "preamble").map_err(|e| match e {
        TraceError::Corrupt { .. } => TraceError::UnsupportedFormat("stream shorter than CRTF preamble".into()),
        other => other,
    })?;
    if &pre[0..4] != MAGIC {
        return Err(TraceError::UnsupportedFormat(format!("bad magic {:02x?}", &pre[0..4])));
    }
    let version = u16::from_le_bytes([pre[4], pre[5]]);
    if version != VERSION {
        return Err(TraceError::UnsupportedFormat(format!("CRTF version {version} (expected {VERSION})")));
    }
    let header_len = u32::from_le_bytes(pre[6..10].try_into().unwrap());
    if header_len > MAX_HEADER_LEN {
        return Err(TraceError::Corrupt {
            offset: 6,
            reason: format!("header block length {header_len} exceeds limit"),
        });
    }
    let mut block = vec![0u8; header_len as usize];
    read_full(&mut source, &mut block, PREAMBLE_LEN, "header block")?;
    let header: TraceHeader = serde_json::from_slice(&block).map_err(|e| TraceError::Corrupt {
        offset: PREAMBLE_LEN,
        reason: format!("invalid header block: {e}"),
    })?;
    header.check_dims()?;
    let rec_len = header.record_bytes() as usize;
    let records = TraceRecords {
        source,
        remaining: header.num_steps,
        offset: PREAMBLE_LEN + header_len as u64,
        buf: vec![0u8; rec_len],
        header: header.clone(),
        failed: false,
    };
    Ok((header, records))
}

/// Reads a whole trace and rejects trailing bytes.
pub fn read_trace_all<R: Read>(source: R) -> Result<Trace> {
    let (header, mut iter) = read_trace(source)?;
    let mut records = Vec::with_capacity(header.num_steps.min(1 << 20) as usize);
    for r in iter.by_ref() {
        records.push(r?);
    }
    let mut probe = [0u8; 1];
    let end = iter.offset();
    loop {
        match iter.source.read(&mut probe) {
            Ok(0) => break,
            Ok(_) => {
                return Err(TraceError::Corrupt { offset: end, reason: "trailing bytes after last record".into() })
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Trace { header, records })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Advisory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub severity: Severity,
    /// Record index, or `None` for header-level findings.
    pub record: Option<usize>,
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Error)
    }

    fn push(&mut self, severity: Severity, record: Option<usize>, field: &str, message: String) {
        self.violations.push(Violation { severity, record, field: field.to_string(), message });
    }
}

/// Checks the trace invariants. With `probe_ready`, a trace missing either
/// label gets a single-class advisory.
pub fn validate_trace(header: &TraceHeader, records: &[StepRecord], probe_ready: bool) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (field, v) in [
        ("num_layers", header.num_layers as u64),
        ("num_heads", header.num_heads as u64),
        ("head_dim", header.head_dim as u64),
    ] {
        if v == 0 {
            report.push(Severity::Error, None, field, format!("{field} must be >= 1"));
        }
    }
    if header.num_steps != records.len() as u64 {
        report.push(
            Severity::Error,
            None,
            "num_steps",
            format!("header declares {} steps, found {}", header.num_steps, records.len()),
        );
    }

    let expected = header.record_values();
    let mut seen: HashMap<(u32, u32), usize> = HashMap::new();
    let mut counts = [0usize; 2];
    for (i, r) in records.iter().enumerate() {
        match r.label {
            LABEL_LINEAR | LABEL_NONLINEAR => counts[r.label as usize] += 1,
            other => report.push(Severity::Error, Some(i), "label", format!("label {other} not in {{0, 1}}")),
        }
        if r.activations.len() != expected {
            report.push(
                Severity::Error,
                Some(i),
                "activations",
                format!("length {} != L*H*d = {expected}", r.activations.len()),
            );
        } else if let Some(p) = r.activations.iter().position(|v| !v.is_finite()) {
            report.push(Severity::Error, Some(i), "activations", format!("non-finite value at position {p}"));
        }
        if let Some(first) = seen.insert((r.prompt_id, r.step_index), i) {
            report.push(
                Severity::Error,
                Some(i),
                "prompt_id/step_index",
                format!(
                    "duplicate (prompt_id={}, step_index={}) in records {first} and {i}",
                    r.prompt_id, r.step_index
                ),
            );
        }
    }

    if probe_ready && !records.is_empty() {
        for (label, &n) in counts.iter().enumerate() {
            if n == 0 {
                report.push(
                    Severity::Advisory,
                    None,
                    "label",
                    format!("single-class trace: no records with label {label}"),
                );
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(l: u16, h: u16, d: u32, n: u64) -> TraceHeader {
        TraceHeader {
            model_id: "test".into(),
            num_layers: l,
            num_heads: h,
            head_dim: d,
            num_prompts: 1,
            num_steps: n,
            extraction_point: "attn.o_proj.input".into(),
            created_at: "2026-01-01T00:00:00Z".into(),
        }
    }

    fn record(p: u32, k: u32, label: u8, len: usize) -> StepRecord {
        StepRecord {
            prompt_id: p,
            step_index: k,
            label,
            activations: (0..len).map(|i| i as f32 * 0.5 - k as f32).collect(),
        }
    }

    #[test]
    fn head_ids_parse_their_display_form() {
        let h = HeadId::new(12, 3);
        assert_eq!(h.to_string().parse::<HeadId>(), Ok(h));
        assert_eq!("l0h7".parse::<HeadId>(), Ok(HeadId::new(0, 7)));
        assert!("L1".parse::<HeadId>().is_err());
        assert!("H1L2".parse::<HeadId>().is_err());
        assert!("L-1H2".parse::<HeadId>().is_err());
    }

    #[test]
    fn one_record_payload_is_73_bytes() {
        let h = header(2, 2, 4, 1);
        let recs = vec![record(0, 0, 1, 16)];
        let mut buf = Vec::new();
        let n = write_trace(&h, &recs, &mut buf).unwrap();
        let header_len = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as u64;
        assert_eq!(n, buf.len() as u64);
        assert_eq!(n - PREAMBLE_LEN - header_len, 73);
    }

    #[test]
    fn empty_trace_round_trips() {
        let h = header(1, 1, 1, 0);
        let mut buf = Vec::new();
        write_trace(&h, &[], &mut buf).unwrap();
        let t = read_trace_all(&buf[..]).unwrap();
        assert_eq!(t.header, h);
        assert!(t.records.is_empty());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let h = header(2, 2, 4, 1);
        let err = write_trace(&h, &[record(0, 0, 0, 15)], Vec::new()).unwrap_err();
        assert!(matches!(err, TraceError::Format(_)));
        let err = write_trace(&h, &[], Vec::new()).unwrap_err();
        assert!(matches!(err, TraceError::Format(_)));
    }

    #[test]
    fn truncation_names_offset() {
        let h = header(1, 2, 3, 2);
        let recs = vec![record(0, 0, 0, 6), record(0, 1, 1, 6)];
        let mut buf = Vec::new();
        write_trace(&h, &recs, &mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        let (_, mut it) = read_trace(&buf[..]).unwrap();
        assert!(it.next().unwrap().is_ok());
        match it.next().unwrap() {
            Err(TraceError::Corrupt { offset, .. }) => assert!(offset > 10),
            other => panic!("expected corruption, got {other:?}"),
        }
        assert!(it.next().is_none());
    }

    #[test]
    fn bad_magic_and_version() {
        let h = header(1, 1, 1, 0);
        let mut buf = Vec::new();
        write_trace(&h, &[], &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_trace(&bad[..]), Err(TraceError::UnsupportedFormat(_))));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_trace(&bad[..]), Err(TraceError::UnsupportedFormat(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let h = header(1, 1, 1, 0);
        let mut buf = Vec::new();
        write_trace(&h, &[], &mut buf).unwrap();
        buf.push(0);
        assert!(matches!(read_trace_all(&buf[..]), Err(TraceError::Corrupt { .. })));
    }

    #[test]
    fn validation_flags_duplicates_and_single_class() {
        let h = header(1, 1, 2, 3);
        let recs = vec![record(0, 0, 0, 2), record(0, 1, 0, 2), record(0, 0, 0, 2)];
        let report = validate_trace(&h, &recs, true);
        let dups: Vec<_> = report.violations.iter().filter(|v| v.field == "prompt_id/step_index").collect();
        assert_eq!(dups.len(), 1);
        assert!(dups[0].message.contains("records 0 and 2"));
        assert!(report
            .violations
            .iter()
            .any(|v| v.severity == Severity::Advisory && v.message.contains("single-class")));
    }

    #[test]
    fn validation_clean_trace() {
        let h = header(1, 1, 2, 2);
        let recs = vec![record(0, 0, 0, 2), record(0, 1, 1, 2)];
        assert!(validate_trace(&h, &recs, true).is_empty());
    }

    #[test]
    fn validation_bad_label_and_length() {
        let h = header(1, 1, 2, 2);
        let recs = vec![record(0, 0, 2, 2), record(0, 1, 1, 3)];
        let report = validate_trace(&h, &recs, false);
        assert!(report.violations.iter().any(|v| v.record == Some(0) && v.field == "label"));
        assert!(report.violations.iter().any(|v| v.record == Some(1) && v.field == "activations"));
    }

    #[test]
    fn head_offsets_are_layer_major() {
        let h = header(3, 4, 5, 0);
        assert_eq!(h.head_offset(HeadId::new(0, 0)), 0);
        assert_eq!(h.head_offset(HeadId::new(0, 1)), 5);
        assert_eq!(h.head_offset(HeadId::new(1, 0)), 20);
        assert_eq!(h.head_offset(HeadId::new(2, 3)), 55);
    }
}
