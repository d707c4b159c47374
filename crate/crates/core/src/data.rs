//! Preference datasets: vocabulary, examples, validation and the on-disk
//! JSON Lines format.
//!
//! A dataset is stored as two files: a JSON header carrying the dimension
//! list, vocabulary and provenance, and a JSON Lines body with one example
//! per line. The dataset fingerprint is the SHA-256 of the canonical
//! serialization (compact header, newline, body), which is what every
//! log-probability cache records.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SpoError};

pub type TokenId = u32;

/// Token vocabulary with reserved marker tokens and an end-of-sequence id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: u32,
    pub special_tokens: Vec<TokenId>,
    pub eos: TokenId,
}

impl Vocab {
    pub fn new(size: u32, special_tokens: Vec<TokenId>, eos: TokenId) -> Result<Self> {
        let vocab = Self {
            size,
            special_tokens,
            eos,
        };
        vocab.check()?;
        Ok(vocab)
    }

    fn check(&self) -> Result<()> {
        if self.size == 0 {
            return Err(SpoError::InvalidArgument("vocabulary size must be positive".into()));
        }
        if self.eos >= self.size {
            return Err(SpoError::InvalidArgument(format!(
                "eos id {} outside vocabulary of size {}",
                self.eos, self.size
            )));
        }
        let mut seen = HashSet::new();
        for &t in &self.special_tokens {
            if t >= self.size {
                return Err(SpoError::InvalidArgument(format!(
                    "special token {t} outside vocabulary of size {}",
                    self.size
                )));
            }
            if t == self.eos || !seen.insert(t) {
                return Err(SpoError::InvalidArgument(format!(
                    "special token {t} repeats eos or another special token"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token < self.size
    }

    pub fn is_special(&self, token: TokenId) -> bool {
        self.special_tokens.contains(&token)
    }

    /// Ids that are neither special nor eos, ascending.
    pub fn regular_tokens(&self) -> Vec<TokenId> {
        (0..self.size)
            .filter(|&t| t != self.eos && !self.is_special(t))
            .collect()
    }

    /// Hex SHA-256 of the compact JSON form; stored in checkpoints.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("vocab serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Which response of a pair is preferred on one dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "a")]
    AFirst,
    #[serde(rename = "b")]
    BFirst,
}

impl Label {
    pub fn flipped(self) -> Self {
        match self {
            Label::AFirst => Label::BFirst,
            Label::BFirst => Label::AFirst,
        }
    }

    pub fn from_a_preferred(a_preferred: bool) -> Self {
        if a_preferred {
            Label::AFirst
        } else {
            Label::BFirst
        }
    }
}

/// One prompt with a response pair and one label per dimension.
///
/// `focus`, when set, restricts the example to training rounds of that
/// dimension; its other labels are still recorded for evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt: Vec<TokenId>,
    pub response_a: Vec<TokenId>,
    pub response_b: Vec<TokenId>,
    pub labels: BTreeMap<String, Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<String>,
}

impl PreferenceExample {
    /// `(preferred, dispreferred)` on `dimension`.
    pub fn ordered(&self, dimension: &str) -> Option<(&[TokenId], &[TokenId])> {
        self.labels.get(dimension).map(|label| match label {
            Label::AFirst => (self.response_a.as_slice(), self.response_b.as_slice()),
            Label::BFirst => (self.response_b.as_slice(), self.response_a.as_slice()),
        })
    }

    /// Whether a training round on `dimension` consumes this example.
    pub fn trains_dimension(&self, dimension: &str) -> bool {
        self.focus.as_deref().is_none_or(|f| f == dimension)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
}

/// Header file contents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub dimensions: Vec<String>,
    pub vocab_size: u32,
    pub special_tokens: Vec<TokenId>,
    pub eos: TokenId,
    pub max_response_len: usize,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreferenceDataset {
    pub dimensions: Vec<String>,
    pub vocab: Vocab,
    pub examples: Vec<PreferenceExample>,
    pub provenance: Provenance,
    pub max_response_len: usize,
}

/// Reason a dataset fails validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    NoDimensions,
    DuplicateDimension(String),
    InvalidVocab(String),
    MissingLabel(String),
    UnexpectedLabel(String),
    UnknownFocus(String),
    DuplicatePair,
    EmptySequence(&'static str),
    TokenOutOfRange { field: &'static str, token: TokenId },
    ResponseTooLong { field: &'static str, len: usize },
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::NoDimensions => write!(f, "no dimensions"),
            ViolationKind::DuplicateDimension(d) => write!(f, "duplicate dimension `{d}`"),
            ViolationKind::InvalidVocab(m) => write!(f, "invalid vocabulary: {m}"),
            ViolationKind::MissingLabel(d) => write!(f, "missing label for `{d}`"),
            ViolationKind::UnexpectedLabel(d) => write!(f, "label for unknown dimension `{d}`"),
            ViolationKind::UnknownFocus(d) => write!(f, "focus on unknown dimension `{d}`"),
            ViolationKind::DuplicatePair => write!(f, "duplicate pair"),
            ViolationKind::EmptySequence(field) => write!(f, "empty {field}"),
            ViolationKind::TokenOutOfRange { field, token } => {
                write!(f, "token {token} in {field} outside vocabulary")
            }
            ViolationKind::ResponseTooLong { field, len } => {
                write!(f, "{field} has length {len} above the configured maximum")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// `None` for dataset-level violations.
    pub example: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.example {
            Some(i) => write!(f, "example {i}: {}", self.kind),
            None => write!(f, "dataset: {}", self.kind),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every dataset invariant and collects all violations.
pub fn validate_dataset(dataset: &PreferenceDataset) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |example, kind| violations.push(Violation { example, kind });

    if dataset.dimensions.is_empty() {
        push(None, ViolationKind::NoDimensions);
    }
    let mut seen = HashSet::new();
    for d in &dataset.dimensions {
        if !seen.insert(d.as_str()) {
            push(None, ViolationKind::DuplicateDimension(d.clone()));
        }
    }
    if let Err(e) = dataset.vocab.check() {
        push(None, ViolationKind::InvalidVocab(e.to_string()));
    }

    for (i, ex) in dataset.examples.iter().enumerate() {
        for d in &dataset.dimensions {
            if !ex.labels.contains_key(d) {
                push(Some(i), ViolationKind::MissingLabel(d.clone()));
            }
        }
        for d in ex.labels.keys() {
            if !seen.contains(d.as_str()) {
                push(Some(i), ViolationKind::UnexpectedLabel(d.clone()));
            }
        }
        if let Some(f) = &ex.focus {
            if !seen.contains(f.as_str()) {
                push(Some(i), ViolationKind::UnknownFocus(f.clone()));
            }
        }
        let fields: [(&'static str, &[TokenId]); 3] = [
            ("prompt", &ex.prompt),
            ("response_a", &ex.response_a),
            ("response_b", &ex.response_b),
        ];
        for (field, seq) in fields {
            if seq.is_empty() {
                push(Some(i), ViolationKind::EmptySequence(field));
            }
            if let Some(&token) = seq.iter().find(|&&t| !dataset.vocab.contains(t)) {
                push(Some(i), ViolationKind::TokenOutOfRange { field, token });
            }
            if field != "prompt" && seq.len() > dataset.max_response_len {
                push(
                    Some(i),
                    ViolationKind::ResponseTooLong {
                        field,
                        len: seq.len(),
                    },
                );
            }
        }
        if ex.response_a == ex.response_b {
            push(Some(i), ViolationKind::DuplicatePair);
        }
    }
    ValidationReport { violations }
}

/// Paths of the two files making up a stored dataset.
#[derive(Clone, Debug)]
pub struct DatasetFiles {
    pub header: PathBuf,
    pub examples: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            header: dir.join("dataset.header.json"),
            examples: dir.join("dataset.jsonl"),
        }
    }
}

impl PreferenceDataset {
    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            dimensions: self.dimensions.clone(),
            vocab_size: self.vocab.size,
            special_tokens: self.vocab.special_tokens.clone(),
            eos: self.vocab.eos,
            max_response_len: self.max_response_len,
            provenance: self.provenance.clone(),
        }
    }

    pub fn has_dimension(&self, dimension: &str) -> bool {
        self.dimensions.iter().any(|d| d == dimension)
    }

    /// Indices of the examples a round on `dimension` trains on.
    pub fn training_indices(&self, dimension: &str) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, ex)| ex.trains_dimension(dimension))
            .map(|(i, _)| i)
            .collect()
    }

    /// JSON Lines body, one example per line, trailing newline included.
    pub fn examples_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn header_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.header())?;
        s.push('\n');
        Ok(s)
    }

    /// Canonical bytes hashed into the fingerprint.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(&self.header())?;
        bytes.push(b'\n');
        bytes.extend_from_slice(self.examples_jsonl()?.as_bytes());
        Ok(bytes)
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_bytes()?)))
    }

    pub fn from_parts(header: DatasetHeader, examples_jsonl: &str) -> Result<Self> {
        let vocab = Vocab::new(header.vocab_size, header.special_tokens, header.eos)?;
        let mut examples = Vec::new();
        for (line_no, line) in examples_jsonl.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ex: PreferenceExample = serde_json::from_str(line).map_err(|e| {
                SpoError::Format(format!("dataset line {}: {e}", line_no + 1))
            })?;
            examples.push(ex);
        }
        Ok(Self {
            dimensions: header.dimensions,
            vocab,
            examples,
            provenance: header.provenance,
            max_response_len: header.max_response_len,
        })
    }

    pub fn save(&self, files: &DatasetFiles) -> Result<()> {
        fs::write(&files.header, self.header_json()?)?;
        fs::write(&files.examples, self.examples_jsonl()?)?;
        Ok(())
    }

    pub fn load(files: &DatasetFiles) -> Result<Self> {
        let header: DatasetHeader = serde_json::from_str(&fs::read_to_string(&files.header)?)?;
        Self::from_parts(header, &fs::read_to_string(&files.examples)?)
    }
}
