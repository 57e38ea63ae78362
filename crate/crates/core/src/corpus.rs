//! Caption ingestion and lexicon matching.
//!
//! A caption "contains" a concept when the concept's tokens appear as a
//! contiguous run of caption tokens. Tokens are produced by splitting the
//! lowercased caption on Unicode whitespace and trimming ASCII punctuation
//! from both ends of every piece. Each concept is reported at most once per
//! caption.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Index of a concept in its [`Lexicon`].
pub type ConceptId = u32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("lexicon entry {line} is empty after normalization")]
    EmptyConcept { line: usize },
    #[error("duplicate lexicon concept {concept:?} (line {line})")]
    DuplicateConcept { concept: String, line: usize },
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error("count vector has {got} entries, lexicon has {expected}")]
    CountLength { expected: usize, got: usize },
    #[error("malformed caption record: {0}")]
    MalformedRecord(String),
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Lowercases, trims and collapses internal whitespace runs to one space.
pub fn normalize_concept(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for word in raw.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Splits already-lowercased text into matching tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|t| !t.is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub text: String,
}

impl CaptionRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }

    /// Parses one line of a JSON-lines corpus.
    pub fn parse_line(line: &[u8]) -> Result<Self, CorpusError> {
        let record: CaptionRecord = serde_json::from_slice(line)
            .map_err(|e| CorpusError::MalformedRecord(e.to_string()))?;
        if record.id.is_empty() {
            return Err(CorpusError::MalformedRecord("empty id".into()));
        }
        Ok(record)
    }
}

/// Ordered concept vocabulary with per-concept occurrence counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    concepts: Vec<String>,
    index: HashMap<String, ConceptId>,
    counts: Vec<u64>,
}

impl Lexicon {
    /// Builds a lexicon from raw entries, normalizing each one. Empty and
    /// duplicate entries are rejected.
    pub fn new<I, S>(raw: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut concepts = Vec::new();
        let mut index = HashMap::new();
        for (line, entry) in raw.into_iter().enumerate() {
            let concept = normalize_concept(entry.as_ref());
            if concept.is_empty() {
                return Err(CorpusError::EmptyConcept { line: line + 1 });
            }
            if index.contains_key(&concept) {
                return Err(CorpusError::DuplicateConcept {
                    concept,
                    line: line + 1,
                });
            }
            index.insert(concept.clone(), concepts.len() as ConceptId);
            concepts.push(concept);
        }
        let counts = vec![0; concepts.len()];
        Ok(Self {
            concepts,
            index,
            counts,
        })
    }

    /// Parses the lexicon text format: one concept per line, `#` comments and
    /// blank lines skipped.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            entries.push((n + 1, trimmed));
        }
        // report file line numbers rather than entry positions
        Self::new(entries.iter().map(|(_, e)| *e)).map_err(|e| match e {
            CorpusError::DuplicateConcept { concept, line } => CorpusError::DuplicateConcept {
                concept,
                line: entries[line - 1].0,
            },
            CorpusError::EmptyConcept { line } => CorpusError::EmptyConcept {
                line: entries[line - 1].0,
            },
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concept(&self, id: ConceptId) -> Option<&str> {
        self.concepts.get(id as usize).map(String::as_str)
    }

    /// Looks up a concept; the argument is normalized first.
    pub fn id(&self, concept: &str) -> Option<ConceptId> {
        self.index
            .get(concept)
            .or_else(|| self.index.get(&normalize_concept(concept)))
            .copied()
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, id: ConceptId) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn set_counts(&mut self, counts: Vec<u64>) -> Result<(), CorpusError> {
        if counts.len() != self.concepts.len() {
            return Err(CorpusError::CountLength {
                expected: self.concepts.len(),
                got: counts.len(),
            });
        }
        self.counts = counts;
        Ok(())
    }

    /// SHA-256 over the normalized concepts, one per line.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for concept in &self.concepts {
            hasher.update(concept.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    pub fn matcher(&self) -> ConceptMatcher {
        ConceptMatcher::new(self, MatchOptions::default())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchOptions {
    /// Let a caption token ending in `s` match the concept token without it
    /// when the token itself is not a concept token.
    pub fold_plurals: bool,
}

/// Token trie over all lexicon concepts.
#[derive(Debug, Clone)]
pub struct ConceptMatcher {
    vocab: HashMap<String, u32>,
    // (node, token) -> child node; node 0 is the root
    edges: HashMap<(u32, u32), u32>,
    terminal: Vec<Option<ConceptId>>,
    options: MatchOptions,
}

impl ConceptMatcher {
    pub fn new(lexicon: &Lexicon, options: MatchOptions) -> Self {
        let mut vocab: HashMap<String, u32> = HashMap::new();
        let mut edges = HashMap::new();
        let mut terminal = vec![None];
        for (id, concept) in lexicon.concepts().iter().enumerate() {
            let mut node = 0u32;
            let mut any = false;
            for token in tokenize(concept) {
                any = true;
                let next_tok = vocab.len() as u32;
                let tok = *vocab.entry(token.to_string()).or_insert(next_tok);
                node = *edges.entry((node, tok)).or_insert_with(|| {
                    terminal.push(None);
                    (terminal.len() - 1) as u32
                });
            }
            if any {
                terminal[node as usize] = Some(id as ConceptId);
            }
        }
        Self {
            vocab,
            edges,
            terminal,
            options,
        }
    }

    fn token_id(&self, token: &str) -> Option<u32> {
        if let Some(&id) = self.vocab.get(token) {
            return Some(id);
        }
        if self.options.fold_plurals && token.len() > 1 {
            if let Some(stem) = token.strip_suffix('s') {
                return self.vocab.get(stem).copied();
            }
        }
        None
    }

    /// Writes the sorted, deduplicated concept ids found in `text` into `out`.
    pub fn match_into(&self, text: &str, scratch: &mut Vec<Option<u32>>, out: &mut Vec<ConceptId>) {
        out.clear();
        scratch.clear();
        let lowered;
        let text = if text.bytes().any(|b| b.is_ascii_uppercase() || b >= 0x80) {
            lowered = text.to_lowercase();
            lowered.as_str()
        } else {
            text
        };
        scratch.extend(tokenize(text).map(|t| self.token_id(t)));
        for start in 0..scratch.len() {
            let mut node = 0u32;
            for tok in &scratch[start..] {
                let Some(tok) = tok else { break };
                match self.edges.get(&(node, *tok)) {
                    Some(&child) => {
                        node = child;
                        if let Some(id) = self.terminal[node as usize] {
                            out.push(id);
                        }
                    }
                    None => break,
                }
            }
        }
        out.sort_unstable();
        out.dedup();
    }

    pub fn match_text(&self, text: &str) -> Vec<ConceptId> {
        let mut out = Vec::new();
        self.match_into(text, &mut Vec::new(), &mut out);
        out
    }
}

/// Concepts of `lexicon` appearing in the caption, as sorted ids.
///
/// Builds a fresh matcher; use [`Lexicon::matcher`] when matching many captions.
pub fn match_concepts(caption: &CaptionRecord, lexicon: &Lexicon) -> Vec<ConceptId> {
    lexicon.matcher().match_text(&caption.text)
}

/// Tallies from one scan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub captions: u64,
    pub malformed: u64,
    pub blank_lines: u64,
}

impl ScanStats {
    pub fn merge(&mut self, other: &ScanStats) {
        self.captions += other.captions;
        self.malformed += other.malformed;
        self.blank_lines += other.blank_lines;
    }
}

/// Scans JSON-lines records, adding one to `counts[i]` for every caption whose
/// match set contains `i` and handing each match set to `sink` in input order.
///
/// Malformed lines are skipped and tallied.
pub fn scan_corpus<'a, I, F>(
    lines: I,
    matcher: &ConceptMatcher,
    counts: &mut [u64],
    mut sink: F,
) -> ScanStats
where
    I: IntoIterator<Item = &'a [u8]>,
    F: FnMut(&[ConceptId]),
{
    let mut stats = ScanStats::default();
    let mut scratch = Vec::new();
    let mut found = Vec::new();
    for line in lines {
        if line.iter().all(u8::is_ascii_whitespace) {
            stats.blank_lines += 1;
            continue;
        }
        let record = match CaptionRecord::parse_line(line) {
            Ok(r) => r,
            Err(e) => {
                log::debug!("skipping record: {e}");
                stats.malformed += 1;
                continue;
            }
        };
        stats.captions += 1;
        matcher.match_into(&record.text, &mut scratch, &mut found);
        for &id in &found {
            counts[id as usize] += 1;
        }
        sink(&found);
    }
    stats
}
