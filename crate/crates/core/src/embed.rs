//! Named unit-vector tables, cosine similarity and exact nearest-neighbor
//! lookup.
//!
//! Vectors are stored as `f32` and dot products accumulate in `f64`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::normalize_concept;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding table is empty")]
    EmptyTable,
    #[error("embedding dimension must be at least {min}, got {got}")]
    BadDim { min: usize, got: usize },
    #[error("duplicate embedding name {0:?}")]
    DuplicateName(String),
    #[error("vector {name:?} has norm {norm}, expected 1 within 1e-4")]
    NotUnit { name: String, norm: f64 },
    #[error("vector {0:?} has zero norm")]
    ZeroVector(String),
    #[error("no embedding for {0:?}")]
    Missing(String),
    #[error("embedding file: {0}")]
    Format(String),
    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const EMBED_MAGIC: &[u8; 6] = b"CCEMB1";
pub const LOAD_NORM_TOLERANCE: f64 = 1e-4;

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Scales `v` to unit L2 norm and returns the norm it had.
///
/// Vectors already within `f32` resolution of unit norm are left untouched so
/// that normalizing twice is a no-op.
pub fn renormalize(v: &mut [f32]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 && (norm - 1.0).abs() > 4.0 * f32::EPSILON as f64 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
    norm
}

/// Cosine of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot(a, b).clamp(-1.0, 1.0))
}

/// Immutable table of named unit vectors, sorted by name.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    names: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    /// Builds a table from vectors that must already be unit norm within
    /// [`LOAD_NORM_TOLERANCE`]; they are renormalized afterwards.
    pub fn new(dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self, EmbedError> {
        Self::build(dim, entries, true)
    }

    /// Builds a table from arbitrary non-zero vectors, normalizing each.
    pub fn normalizing(dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self, EmbedError> {
        Self::build(dim, entries, false)
    }

    fn build(dim: usize, mut entries: Vec<(String, Vec<f32>)>, strict: bool) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::BadDim { min: 1, got: 0 });
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut names = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        let mut index = HashMap::with_capacity(entries.len());
        for (name, mut v) in entries {
            if v.len() != dim {
                return Err(EmbedError::DimMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            let norm = renormalize(&mut v);
            if norm == 0.0 || !norm.is_finite() {
                return Err(EmbedError::ZeroVector(name));
            }
            if strict && (norm - 1.0).abs() > LOAD_NORM_TOLERANCE {
                return Err(EmbedError::NotUnit { name, norm });
            }
            if index.insert(name.clone(), names.len()).is_some() {
                return Err(EmbedError::DuplicateName(name));
            }
            names.push(name);
            data.extend_from_slice(&v);
        }
        Ok(Self {
            dim,
            names,
            data,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vector(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.index.get(name).map(|&i| self.vector(i))
    }

    pub fn require(&self, name: &str) -> Result<&[f32], EmbedError> {
        self.get(name).ok_or_else(|| EmbedError::Missing(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.names.iter().map(String::as_str).zip(self.data.chunks_exact(self.dim))
    }

    /// Restricts the table to `names`; every name must be present.
    pub fn subset<'a, I>(&self, names: I) -> Result<Self, EmbedError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut entries = Vec::new();
        for name in names {
            entries.push((name.to_string(), self.require(name)?.to_vec()));
        }
        Self::build(self.dim, entries, true)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, EmbedError> {
        let mut out = Vec::with_capacity(14 + self.data.len() * 4 + self.names.len() * 16);
        out.extend_from_slice(EMBED_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.names.len() as u32).to_le_bytes());
        for (name, v) in self.iter() {
            let len = u16::try_from(name.len())
                .map_err(|_| EmbedError::Format(format!("name too long: {name:?}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        let mut r = ByteReader::new(bytes);
        if r.take(6)? != EMBED_MAGIC {
            return Err(EmbedError::Format("bad magic".into()));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| EmbedError::Format("name is not UTF-8".into()))?
                .to_string();
            if entries.last().is_some_and(|(prev, _): &(String, Vec<f32>)| *prev >= name) {
                return Err(EmbedError::Format(format!("names not sorted ascending at {name:?}")));
            }
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(r.f32()?);
            }
            entries.push((name, v));
        }
        if !r.is_done() {
            return Err(EmbedError::Format("trailing bytes".into()));
        }
        Self::new(dim, entries)
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let bytes = fs::read(path).map_err(|source| EmbedError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Debug export: `name<TAB>v0,v1,...` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, v) in self.iter() {
            out.push_str(name);
            out.push('\t');
            for (k, x) in v.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write!(out, "{x}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], EmbedError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| EmbedError::Format("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16, EmbedError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, EmbedError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, EmbedError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Exhaustive argmax of cosine over the table. The query is normalized
/// first; ties go to the smallest name.
pub fn nearest_neighbor<'t>(query: &[f32], table: &'t EmbeddingTable) -> Result<(&'t str, f64), EmbedError> {
    if table.is_empty() {
        return Err(EmbedError::EmptyTable);
    }
    if query.len() != table.dim() {
        return Err(EmbedError::DimMismatch {
            expected: table.dim(),
            got: query.len(),
        });
    }
    let norm = dot(query, query).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbedError::ZeroVector("<query>".into()));
    }
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (k, (_, v)) in table.iter().enumerate() {
        let sim = dot(query, v);
        // names are sorted, so strict > keeps the smallest name on ties
        if sim > best_sim {
            best = k;
            best_sim = sim;
        }
    }
    Ok((&table.names()[best], (best_sim / norm).clamp(-1.0, 1.0)))
}

/// Source of text embeddings for concept strings.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;

    /// Unit vector for a normalized concept, or `None` when it cannot be embedded.
    fn embed(&self, concept: &str) -> Option<Vec<f32>>;
}

impl EmbeddingProvider for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, concept: &str) -> Option<Vec<f32>> {
        self.get(concept)
            .or_else(|| self.get(&normalize_concept(concept)))
            .map(<[f32]>::to_vec)
    }
}

/// Deterministic hash-based embeddings for tests and demos.
///
/// Components come from SHA-256 in counter mode over `(seed, block, text)`,
/// so the output is identical on every platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyProvider {
    seed: u64,
    dim: usize,
}

pub fn toy_provider(seed: u64, dim: usize) -> Result<ToyProvider, EmbedError> {
    if dim < 2 {
        return Err(EmbedError::BadDim { min: 2, got: dim });
    }
    Ok(ToyProvider { seed, dim })
}

impl ToyProvider {
    pub fn vector(&self, text: &str) -> Vec<f32> {
        let mut raw = Vec::with_capacity(self.dim);
        let mut block = 0u32;
        while raw.len() < self.dim {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(block.to_le_bytes());
            h.update(text.as_bytes());
            for chunk in h.finalize().chunks_exact(4) {
                let u = u32::from_le_bytes(chunk.try_into().unwrap());
                raw.push(u as f64 / 2f64.powi(31) - 1.0);
            }
            block += 1;
        }
        raw.truncate(self.dim);
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut v: Vec<f32> = if norm > 0.0 {
            raw.iter().map(|x| (x / norm) as f32).collect()
        } else {
            let mut e = vec![0.0; self.dim];
            e[0] = 1.0;
            e
        };
        renormalize(&mut v);
        v
    }
}

impl EmbeddingProvider for ToyProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, concept: &str) -> Option<Vec<f32>> {
        Some(self.vector(concept))
    }
}
