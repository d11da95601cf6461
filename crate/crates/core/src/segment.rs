//! Chain-of-thought segmentation and keyword labeling.

use std::collections::HashSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{LABEL_LINEAR, LABEL_NONLINEAR};

pub const DELIMITER: &str = "\n\n";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

/// Phrases that mark a step as non-linear. The misspelled "think differenly"
/// is kept alongside the corrected spelling.
pub const DEFAULT_KEYWORDS: &[&str] = &[
    "Wait",
    "Alternatively",
    "Let me verify",
    "another solution",
    "Let me make sure",
    "hold on",
    "think again",
    "think differenly",
    "think differently",
    "another approach",
    "another method",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("malformed think markers: {0}")]
    MalformedMarkers(String),
    #[error("invalid keyword set: {0}")]
    InvalidKeywords(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// An ordered, non-empty list of trigger phrases, matched case-insensitively.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordSet {
    keywords: Vec<String>,
    folded: Vec<String>,
}

impl KeywordSet {
    pub fn new<I, S>(keywords: I) -> Result<Self, SegmentError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let keywords: Vec<String> = keywords.into_iter().map(Into::into).collect();
        if keywords.is_empty() {
            return Err(SegmentError::InvalidKeywords("keyword set is empty".into()));
        }
        let mut seen = HashSet::new();
        let mut folded = Vec::with_capacity(keywords.len());
        for k in &keywords {
            if k.is_empty() {
                return Err(SegmentError::InvalidKeywords("empty keyword".into()));
            }
            let f = k.to_lowercase();
            if !seen.insert(f.clone()) {
                return Err(SegmentError::InvalidKeywords(format!("duplicate keyword {k:?}")));
            }
            folded.push(f);
        }
        Ok(Self { keywords, folded })
    }

    /// One phrase per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, SegmentError> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string),
        )
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, SegmentError> {
        let mut text = String::new();
        for line in reader.lines() {
            text.push_str(&line.map_err(|e| SegmentError::Io(e.to_string()))?);
            text.push('\n');
        }
        Self::parse(&text)
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    /// First keyword (in list order) occurring in `text`, ignoring case.
    pub fn first_match(&self, text: &str) -> Option<&str> {
        let haystack = text.to_lowercase();
        self.folded
            .iter()
            .position(|k| haystack.contains(k.as_str()))
            .map(|i| self.keywords[i].as_str())
    }
}

impl Default for KeywordSet {
    fn default() -> Self {
        Self::new(DEFAULT_KEYWORDS.iter().copied()).expect("default keywords are valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub index: usize,
    pub text: String,
    pub label: u8,
    pub matched_keyword: Option<String>,
}

/// Splits at every `"\n\n"`, keeping the delimiter on the step it ends.
///
/// Runs of newlines longer than two stay attached to the following step, so
/// no step contains an interior delimiter.
pub fn segment_cot(text: &str) -> Vec<&str> {
    let mut steps = Vec::new();
    let mut start = 0;
    while let Some(pos) = text[start..].find(DELIMITER) {
        let end = start + pos + DELIMITER.len();
        steps.push(&text[start..end]);
        start = end;
    }
    if start < text.len() {
        steps.push(&text[start..]);
    }
    steps
}

/// Returns `(label, matched_keyword)`.
pub fn label_step<'k>(step: &str, keywords: &'k KeywordSet) -> (u8, Option<&'k str>) {
    match keywords.first_match(step) {
        Some(k) => (LABEL_NONLINEAR, Some(k)),
        None => (LABEL_LINEAR, None),
    }
}

/// Segments and labels a trajectory in one pass.
pub fn segment_and_label(text: &str, keywords: &KeywordSet) -> Vec<ReasoningStep> {
    segment_cot(text)
        .into_iter()
        .enumerate()
        .map(|(index, s)| {
            let (label, kw) = label_step(s, keywords);
            ReasoningStep { index, text: s.to_string(), label, matched_keyword: kw.map(str::to_string) }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThinkRegion<'a> {
    pub text: &'a str,
    /// Neither marker was present; `text` is the whole input.
    pub marker_absent: bool,
    /// Only one of the two markers was present.
    pub partial: bool,
}

/// Extracts the text between the first `<think>` and the next `</think>`.
///
/// A lone `</think>` (the opening marker lives in the prompt template) yields
/// everything before it; a lone `<think>` (generation cut off) yields
/// everything after it. Both cases set `partial`.
pub fn extract_think_region(response: &str) -> Result<ThinkRegion<'_>, SegmentError> {
    let open = response.find(THINK_OPEN);
    let close = response.find(THINK_CLOSE);
    match (open, close) {
        (None, None) => Ok(ThinkRegion { text: response, marker_absent: true, partial: false }),
        (Some(o), Some(c)) if c < o => Err(SegmentError::MalformedMarkers(format!(
            "{THINK_CLOSE} at byte {c} precedes {THINK_OPEN} at byte {o}"
        ))),
        (Some(o), _) => {
            let body = o + THINK_OPEN.len();
            match response[body..].find(THINK_CLOSE) {
                Some(c) => Ok(ThinkRegion { text: &response[body..body + c], marker_absent: false, partial: false }),
                None => Ok(ThinkRegion { text: &response[body..], marker_absent: false, partial: true }),
            }
        }
        (None, Some(c)) => Ok(ThinkRegion { text: &response[..c], marker_absent: false, partial: true }),
    }
}
