//! Candidate filtering: uninformative words, non-visual concepts and
//! near-synonyms of the target. Stages run in a fixed order and each one only
//! removes members.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cooc::CandidateSet;
use crate::corpus::{ConceptId, Lexicon, normalize_concept};
use crate::embed::{EmbedError, EmbeddingTable, cosine};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("delta must lie in [-1, 1], got {0}")]
    InvalidDelta(f64),
    #[error("no embedding for concept {0:?}")]
    MissingEmbedding(String),
    #[error("unknown concept id {0}")]
    UnknownConcept(ConceptId),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("visibility table line {line}: {message}")]
    TableFormat { line: usize, message: String },
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Stage names in application order, recorded in dictionary metadata.
pub const PIPELINE_ORDER: [&str; 3] = ["stopwords", "abstract", "semantic"];

pub const DEFAULT_STOPWORDS: [&str; 4] = ["image", "photo", "picture", "view"];
pub const DEFAULT_DELTA: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub stopwords: BTreeSet<String>,
    pub delta: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            delta: DEFAULT_DELTA,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(-1.0..=1.0).contains(&self.delta) {
            return Err(FilterError::InvalidDelta(self.delta));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Cached,
    Llm,
    Manual,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Cached => "cached",
            Source::Llm => "llm",
            Source::Manual => "manual",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityEntry {
    pub concept: String,
    pub visible: bool,
    pub source: Source,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("visibility service unavailable: {0}")]
    Unavailable(String),
    #[error("unparseable visibility answer: {0:?}")]
    Unparseable(String),
}

/// Answers whether a concept can be seen in an image.
pub trait VisibilityOracle: Sync {
    fn query(&self, concept: &str) -> Result<bool, OracleError>;

    /// Provenance to record when caching an answer; `None` keeps answers out
    /// of the table.
    fn source(&self) -> Option<Source>;
}

/// Treats every concept missing from the table as not visible.
#[derive(Debug, Clone, Copy, Default)]
pub struct RejectUnknown;

impl VisibilityOracle for RejectUnknown {
    fn query(&self, _concept: &str) -> Result<bool, OracleError> {
        Ok(false)
    }

    fn source(&self) -> Option<Source> {
        None
    }
}

/// No visibility service: unknown concepts stay unresolved, so the abstract
/// filter keeps them and flags the build as incomplete.
#[derive(Debug, Clone, Copy, Default)]
pub struct Offline;

impl VisibilityOracle for Offline {
    fn query(&self, _concept: &str) -> Result<bool, OracleError> {
        Err(OracleError::Unavailable("no visibility service configured".into()))
    }

    fn source(&self) -> Option<Source> {
        None
    }
}

/// Concept visibility answers shared by concurrent filter pipelines.
#[derive(Debug, Default)]
pub struct VisibilityTable {
    entries: Mutex<BTreeMap<String, (bool, Source)>>,
}

impl Clone for VisibilityTable {
    fn clone(&self) -> Self {
        Self {
            entries: Mutex::new(self.entries.lock().unwrap().clone()),
        }
    }
}

impl VisibilityTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<I: IntoIterator<Item = VisibilityEntry>>(entries: I) -> Self {
        let table = Self::new();
        for e in entries {
            table.insert(&e.concept, e.visible, e.source);
        }
        table
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, concept: &str) -> Option<bool> {
        self.entries.lock().unwrap().get(concept).map(|e| e.0)
    }

    pub fn insert(&self, concept: &str, visible: bool, source: Source) {
        self.entries
            .lock()
            .unwrap()
            .insert(normalize_concept(concept), (visible, source));
    }

    /// Returns the stored answer, or asks `oracle` and stores its answer.
    ///
    /// The oracle runs outside the lock; if two callers race on the same
    /// concept the first insert wins and both observe it.
    pub fn resolve(&self, concept: &str, oracle: &dyn VisibilityOracle) -> Result<bool, OracleError> {
        if let Some(v) = self.get(concept) {
            return Ok(v);
        }
        let answer = oracle.query(concept)?;
        match oracle.source() {
            Some(source) => {
                let mut entries = self.entries.lock().unwrap();
                Ok(entries.entry(concept.to_string()).or_insert((answer, source)).0)
            }
            None => Ok(answer),
        }
    }

    pub fn entries(&self) -> Vec<VisibilityEntry> {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .map(|(c, &(visible, source))| VisibilityEntry {
                concept: c.clone(),
                visible,
                source,
            })
            .collect()
    }

    /// Line-delimited JSON sorted by concept.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in self.entries() {
            out.push_str(&serde_json::to_string(&e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, FilterError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: VisibilityEntry = serde_json::from_str(line).map_err(|e| FilterError::TableFormat {
                line: n + 1,
                message: e.to_string(),
            })?;
            entries.push(e);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn load(path: &Path) -> Result<Self, FilterError> {
        let text = fs::read_to_string(path).map_err(|source| FilterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_jsonl(&text)
    }
}

/// Concepts kept despite an oracle failure. A non-empty report marks the run
/// incomplete.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub failed_open: Vec<String>,
}

impl FilterReport {
    pub fn incomplete(&self) -> bool {
        !self.failed_open.is_empty()
    }

    pub fn merge(&mut self, other: FilterReport) {
        self.failed_open.extend(other.failed_open);
    }
}

fn name(lexicon: &Lexicon, id: ConceptId) -> Result<&str, FilterError> {
    lexicon.concept(id).ok_or(FilterError::UnknownConcept(id))
}

pub fn remove_stopwords(candidates: &CandidateSet, lexicon: &Lexicon, config: &FilterConfig) -> CandidateSet {
    CandidateSet {
        target: candidates.target,
        members: candidates
            .members
            .iter()
            .copied()
            .filter(|&j| lexicon.concept(j).is_none_or(|c| !config.stopwords.contains(c)))
            .collect(),
    }
}

/// Keeps visible members. Unknown concepts go to `oracle`; if it fails the
/// member is kept and recorded in `report`.
pub fn filter_abstract(
    candidates: &CandidateSet,
    lexicon: &Lexicon,
    table: &VisibilityTable,
    oracle: &dyn VisibilityOracle,
    report: &mut FilterReport,
) -> Result<CandidateSet, FilterError> {
    let mut members = Vec::with_capacity(candidates.members.len());
    for &j in &candidates.members {
        let concept = name(lexicon, j)?;
        match table.resolve(concept, oracle) {
            Ok(true) => members.push(j),
            Ok(false) => {}
            Err(e) => {
                log::warn!("visibility of {concept:?} unresolved, keeping it: {e}");
                report.failed_open.push(concept.to_string());
                members.push(j);
            }
        }
    }
    Ok(CandidateSet {
        target: candidates.target,
        members,
    })
}

/// Drops members whose cosine with the target exceeds `delta`.
pub fn filter_semantic(
    candidates: &CandidateSet,
    lexicon: &Lexicon,
    embeddings: &EmbeddingTable,
    delta: f64,
) -> Result<CandidateSet, FilterError> {
    if !(-1.0..=1.0).contains(&delta) {
        return Err(FilterError::InvalidDelta(delta));
    }
    let lookup = |id| -> Result<&[f32], FilterError> {
        let concept = name(lexicon, id)?;
        embeddings
            .get(concept)
            .ok_or_else(|| FilterError::MissingEmbedding(concept.to_string()))
    };
    let target = lookup(candidates.target)?;
    let mut members = Vec::with_capacity(candidates.members.len());
    for &j in &candidates.members {
        if cosine(lookup(j)?, target)? <= delta {
            members.push(j);
        }
    }
    Ok(CandidateSet {
        target: candidates.target,
        members,
    })
}

/// Stop-words, then visibility, then semantic similarity.
pub fn run_pipeline(
    candidates: &CandidateSet,
    lexicon: &Lexicon,
    config: &FilterConfig,
    table: &VisibilityTable,
    oracle: &dyn VisibilityOracle,
    embeddings: &EmbeddingTable,
) -> Result<(CandidateSet, FilterReport), FilterError> {
    config.validate()?;
    let mut report = FilterReport::default();
    let kept = remove_stopwords(candidates, lexicon, config);
    let kept = filter_abstract(&kept, lexicon, table, oracle, &mut report)?;
    let kept = filter_semantic(&kept, lexicon, embeddings, config.delta)?;
    Ok((kept, report))
}
