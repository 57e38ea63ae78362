//! Co-occurrence counts, row-normalized frequencies and candidate selection.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::{ConceptId, Lexicon};
use crate::digest::sha256_hex;

#[derive(Debug, Error)]
pub enum CoocError {
    #[error("concept id {id} out of range for dimension {dim}")]
    OutOfRange { id: ConceptId, dim: u32 },
    #[error("co-occurrence count overflow at ({i}, {j})")]
    Overflow { i: ConceptId, j: ConceptId },
    #[error("dimension mismatch: matrix {matrix}, other {other}")]
    DimMismatch { matrix: u32, other: u32 },
    #[error("concept {id} has zero occurrences but a stored pair with {other}")]
    ZeroOccurrence { id: ConceptId, other: ConceptId },
    #[error("pair ({i}, {j}) count {count} exceeds occurrences {occurrences} of {i}")]
    Inconsistent {
        i: ConceptId,
        j: ConceptId,
        count: u32,
        occurrences: u64,
    },
    #[error("gamma must satisfy 0 <= gamma < 1, got {0}")]
    InvalidGamma(f64),
    #[error("unknown concept id {0}")]
    UnknownConcept(ConceptId),
    #[error("cooc file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("cooc file digest mismatch: stored {stored}, computed {computed}")]
    Digest { stored: String, computed: String },
}

pub const COOC_MAGIC: &str = "ccmine-cooc v1";

fn pack(i: ConceptId, j: ConceptId) -> u64 {
    let (lo, hi) = if i < j { (i, j) } else { (j, i) };
    ((lo as u64) << 32) | hi as u64
}

fn unpack(key: u64) -> (ConceptId, ConceptId) {
    ((key >> 32) as ConceptId, key as ConceptId)
}

/// Sparse symmetric co-occurrence counts. Only pairs with `i < j` are stored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoocMatrix {
    dim: u32,
    entries: HashMap<u64, u32>,
}

impl CoocMatrix {
    pub fn new(dim: u32) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    /// Number of stored unordered pairs.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Symmetric lookup; the diagonal and absent pairs read as 0.
    pub fn get(&self, i: ConceptId, j: ConceptId) -> u32 {
        if i == j {
            return 0;
        }
        self.entries.get(&pack(i, j)).copied().unwrap_or(0)
    }

    fn bump(&mut self, key: u64, by: u32) -> Result<(), CoocError> {
        let slot = self.entries.entry(key).or_insert(0);
        *slot = slot.checked_add(by).ok_or_else(|| {
            let (i, j) = unpack(key);
            CoocError::Overflow { i, j }
        })?;
        Ok(())
    }

    /// Counts every unordered pair of one caption's concept set.
    ///
    /// `set` must be strictly increasing (as produced by the matcher).
    pub fn add_set(&mut self, set: &[ConceptId]) -> Result<(), CoocError> {
        if let Some(&bad) = set.iter().find(|&&id| id >= self.dim) {
            return Err(CoocError::OutOfRange {
                id: bad,
                dim: self.dim,
            });
        }
        debug_assert!(set.windows(2).all(|w| w[0] < w[1]));
        for (k, &i) in set.iter().enumerate() {
            for &j in &set[k + 1..] {
                self.bump(pack(i, j), 1)?;
            }
        }
        Ok(())
    }

    /// Adds another partial matrix into this one.
    pub fn merge(&mut self, other: &CoocMatrix) -> Result<(), CoocError> {
        if other.dim != self.dim {
            return Err(CoocError::DimMismatch {
                matrix: self.dim,
                other: other.dim,
            });
        }
        self.entries.reserve(other.entries.len());
        for (&key, &count) in &other.entries {
            self.bump(key, count)?;
        }
        Ok(())
    }

    pub fn from_triplets<I>(dim: u32, triplets: I) -> Result<Self, CoocError>
    where
        I: IntoIterator<Item = (ConceptId, ConceptId, u32)>,
    {
        let mut m = Self::new(dim);
        for (i, j, count) in triplets {
            for id in [i, j] {
                if id >= dim {
                    return Err(CoocError::OutOfRange { id, dim });
                }
            }
            if i == j || count == 0 {
                continue;
            }
            m.bump(pack(i, j), count)?;
        }
        Ok(m)
    }

    /// Stored pairs as `(i, j, count)` with `i < j`, sorted.
    pub fn triplets(&self) -> Vec<(ConceptId, ConceptId, u32)> {
        let mut out: Vec<_> = self
            .entries
            .iter()
            .map(|(&k, &c)| {
                let (i, j) = unpack(k);
                (i, j, c)
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// Serializes to the `ccmine-cooc v1` text format.
    pub fn to_file_string(&self) -> String {
        let mut body = format!("{COOC_MAGIC} {}\n", self.dim);
        for (i, j, c) in self.triplets() {
            writeln!(body, "{i}\t{j}\t{c}").unwrap();
        }
        let digest = sha256_hex(body.as_bytes());
        body.push_str("#sha256:");
        body.push_str(&digest);
        body.push('\n');
        body
    }

    pub fn parse(text: &str) -> Result<Self, CoocError> {
        let fmt = |line: usize, message: &str| CoocError::Format {
            line,
            message: message.to_string(),
        };
        let trailer = text
            .trim_end_matches('\n')
            .rfind("\n#sha256:")
            .ok_or_else(|| fmt(0, "missing #sha256 trailer"))?;
        let body = &text[..trailer + 1];
        let stored = text[trailer + 1..].trim_end().trim_start_matches("#sha256:");
        let computed = sha256_hex(body.as_bytes());
        if stored != computed {
            return Err(CoocError::Digest {
                stored: stored.to_string(),
                computed,
            });
        }

        let mut lines = body.lines();
        let header = lines.next().ok_or_else(|| fmt(1, "missing header"))?;
        let dim = header
            .strip_prefix(COOC_MAGIC)
            .and_then(|rest| rest.trim().parse::<u32>().ok())
            .ok_or_else(|| fmt(1, "bad header"))?;
        let mut m = Self::new(dim);
        let mut prev: Option<(u32, u32)> = None;
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let mut parts = line.split('\t');
            let mut field = || -> Result<u32, CoocError> {
                parts
                    .next()
                    .and_then(|p| p.parse().ok())
                    .ok_or_else(|| fmt(lineno, "expected i<TAB>j<TAB>count"))
            };
            let (i, j, count) = (field()?, field()?, field()?);
            if i >= j || j >= dim || count == 0 {
                return Err(fmt(lineno, "invalid triplet"));
            }
            if prev.is_some_and(|p| p >= (i, j)) {
                return Err(fmt(lineno, "triplets not strictly sorted"));
            }
            prev = Some((i, j));
            m.entries.insert(pack(i, j), count);
        }
        Ok(m)
    }
}

/// Builds the co-occurrence matrix from per-caption concept sets.
pub fn build_cooc<I, S>(sets: I, dim: u32) -> Result<CoocMatrix, CoocError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[ConceptId]>,
{
    let mut m = CoocMatrix::new(dim);
    for set in sets {
        m.add_set(set.as_ref())?;
    }
    Ok(m)
}

/// Row-normalized frequencies `X[i][j] / n_i`, stored per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqMatrix {
    rows: Vec<Vec<(ConceptId, f64)>>,
}

impl FreqMatrix {
    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    /// Row entries sorted by column.
    pub fn row(&self, i: ConceptId) -> Option<&[(ConceptId, f64)]> {
        self.rows.get(i as usize).map(Vec::as_slice)
    }

    pub fn get(&self, i: ConceptId, j: ConceptId) -> Option<f64> {
        let row = self.row(i)?;
        row.binary_search_by_key(&j, |&(c, _)| c).ok().map(|k| row[k].1)
    }
}

pub fn normalize(x: &CoocMatrix, lexicon: &Lexicon) -> Result<FreqMatrix, CoocError> {
    if x.dim() as usize != lexicon.len() {
        return Err(CoocError::DimMismatch {
            matrix: x.dim(),
            other: lexicon.len() as u32,
        });
    }
    let mut rows: Vec<Vec<(ConceptId, f64)>> = vec![Vec::new(); lexicon.len()];
    for (i, j, count) in x.triplets() {
        for (a, b) in [(i, j), (j, i)] {
            let n = lexicon.count(a);
            if n == 0 {
                return Err(CoocError::ZeroOccurrence { id: a, other: b });
            }
            if count as u64 > n {
                return Err(CoocError::Inconsistent {
                    i: a,
                    j: b,
                    count,
                    occurrences: n,
                });
            }
            rows[a as usize].push((b, count as f64 / n as f64));
        }
    }
    for row in &mut rows {
        row.sort_unstable_by_key(|&(c, _)| c);
    }
    Ok(FreqMatrix { rows })
}

/// Concepts co-occurring with `target` above the frequency threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub target: ConceptId,
    pub members: Vec<ConceptId>,
}

/// Members are `{j : freq[i][j] > gamma}`, by descending frequency then
/// ascending concept string, truncated to `cap` when given.
pub fn select_candidates(
    freq: &FreqMatrix,
    lexicon: &Lexicon,
    target: ConceptId,
    gamma: f64,
    cap: Option<usize>,
) -> Result<CandidateSet, CoocError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CoocError::InvalidGamma(gamma));
    }
    let row = freq.row(target).ok_or(CoocError::UnknownConcept(target))?;
    let name = |id: ConceptId| lexicon.concept(id).unwrap_or("");
    let mut picked: Vec<(ConceptId, f64)> = row
        .iter()
        .copied()
        .filter(|&(j, f)| j != target && f > gamma)
        .collect();
    picked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| name(a.0).cmp(name(b.0)))
    });
    if let Some(cap) = cap {
        picked.truncate(cap);
    }
    Ok(CandidateSet {
        target,
        members: picked.into_iter().map(|(j, _)| j).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::scan_corpus;
    use proptest::prelude::*;

    const TOY: &str = r#"{"id":"c1","text":"a boat on the water"}
{"id":"c2","text":"a boat near the dock at sunset"}
{"id":"c3","text":"a photo of a cat"}
{"id":"c4","text":"boat and boat trailer"}
"#;

    fn toy() -> (Lexicon, CoocMatrix) {
        let mut lex =
            Lexicon::new(["boat", "water", "dock", "cat", "photo", "sunset", "trailer"]).unwrap();
        let mut counts = vec![0; lex.len()];
        let mut sets = Vec::new();
        scan_corpus(TOY.lines().map(str::as_bytes), &lex.matcher(), &mut counts, |s| {
            sets.push(s.to_vec())
        });
        lex.set_counts(counts).unwrap();
        let m = build_cooc(&sets, lex.len() as u32).unwrap();
        (lex, m)
    }

    #[test]
    fn toy_counts() {
        let (lex, m) = toy();
        let x = |a: &str, b: &str| m.get(lex.id(a).unwrap(), lex.id(b).unwrap());
        assert_eq!(x("boat", "water"), 1);
        assert_eq!(x("boat", "dock"), 1);
        assert_eq!(x("boat", "sunset"), 1);
        assert_eq!(x("dock", "sunset"), 1);
        assert_eq!(x("cat", "photo"), 1);
        assert_eq!(x("boat", "trailer"), 1);
        assert_eq!(x("boat", "cat"), 0);
        assert_eq!(x("water", "boat"), 1);
        assert_eq!(m.nnz(), 6);
    }

    #[test]
    fn single_concept_caption_gives_empty_matrix() {
        let m = build_cooc([vec![3u32]], 5).unwrap();
        assert_eq!(m.nnz(), 0);
    }

    #[test]
    fn out_of_range_is_an_error() {
        assert!(matches!(
            build_cooc([vec![1u32, 9]], 5),
            Err(CoocError::OutOfRange { id: 9, dim: 5 })
        ));
    }

    #[test]
    fn overflow_is_reported() {
        let mut a = CoocMatrix::from_triplets(3, [(0, 1, u32::MAX)]).unwrap();
        let b = CoocMatrix::from_triplets(3, [(0, 1, 1)]).unwrap();
        assert!(matches!(a.merge(&b), Err(CoocError::Overflow { i: 0, j: 1 })));
        assert!(matches!(a.add_set(&[0, 1]), Err(CoocError::Overflow { .. })));
    }

    #[test]
    fn normalized_frequencies() {
        let (lex, m) = toy();
        let f = normalize(&m, &lex).unwrap();
        let id = |c: &str| lex.id(c).unwrap();
        assert_eq!(f.get(id("boat"), id("water")), Some(1.0 / 3.0));
        assert_eq!(f.get(id("water"), id("boat")), Some(1.0));
        assert_ne!(f.get(id("boat"), id("water")), f.get(id("water"), id("boat")));
        assert_eq!(f.get(id("boat"), id("cat")), None);
    }

    #[test]
    fn saturated_row_is_all_ones() {
        let mut lex = Lexicon::new(["a", "b", "c"]).unwrap();
        lex.set_counts(vec![2, 2, 2]).unwrap();
        let m = CoocMatrix::from_triplets(3, [(0, 1, 2), (0, 2, 2)]).unwrap();
        let f = normalize(&m, &lex).unwrap();
        assert_eq!(f.row(0).unwrap(), &[(1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn normalize_rejects_inconsistent_inputs() {
        let mut lex = Lexicon::new(["a", "b"]).unwrap();
        lex.set_counts(vec![0, 1]).unwrap();
        let m = CoocMatrix::from_triplets(2, [(0, 1, 1)]).unwrap();
        assert!(matches!(normalize(&m, &lex), Err(CoocError::ZeroOccurrence { id: 0, .. })));
        lex.set_counts(vec![1, 1]).unwrap();
        let m = CoocMatrix::from_triplets(2, [(0, 1, 2)]).unwrap();
        assert!(matches!(normalize(&m, &lex), Err(CoocError::Inconsistent { .. })));
    }

    #[test]
    fn candidate_selection() {
        let (lex, m) = toy();
        let f = normalize(&m, &lex).unwrap();
        let boat = lex.id("boat").unwrap();
        let got = select_candidates(&f, &lex, boat, 0.3, None).unwrap();
        let names: Vec<_> = got.members.iter().map(|&j| lex.concept(j).unwrap()).collect();
        assert_eq!(names, ["dock", "sunset", "trailer", "water"]);
        assert!(select_candidates(&f, &lex, boat, 0.5, None).unwrap().members.is_empty());
        // 1/3 is excluded at gamma = 1/3
        assert!(select_candidates(&f, &lex, boat, 1.0 / 3.0, None).unwrap().members.is_empty());
        let capped = select_candidates(&f, &lex, boat, 0.0, Some(2)).unwrap();
        assert_eq!(capped.members.len(), 2);

        let empty = CoocMatrix::new(lex.len() as u32);
        let f0 = normalize(&empty, &lex).unwrap();
        assert!(select_candidates(&f0, &lex, boat, 0.0, None).unwrap().members.is_empty());

        assert!(matches!(
            select_candidates(&f, &lex, 99, 0.1, None),
            Err(CoocError::UnknownConcept(99))
        ));
        assert!(matches!(
            select_candidates(&f, &lex, boat, 1.0, None),
            Err(CoocError::InvalidGamma(_))
        ));
    }

    #[test]
    fn descending_frequency_order() {
        let mut lex = Lexicon::new(["a", "b", "c", "d"]).unwrap();
        lex.set_counts(vec![4, 4, 4, 4]).unwrap();
        let m = CoocMatrix::from_triplets(4, [(0, 1, 1), (0, 2, 3), (0, 3, 2)]).unwrap();
        let f = normalize(&m, &lex).unwrap();
        let got = select_candidates(&f, &lex, 0, 0.0, None).unwrap();
        assert_eq!(got.members, vec![2, 3, 1]);
    }

    #[test]
    fn file_round_trip_and_integrity() {
        let (_, m) = toy();
        let text = m.to_file_string();
        assert!(text.starts_with("ccmine-cooc v1 7\n0\t1\t1\n"));
        assert_eq!(CoocMatrix::parse(&text).unwrap(), m);

        let tampered = text.replacen("0\t1\t1", "0\t1\t2", 1);
        assert!(matches!(CoocMatrix::parse(&tampered), Err(CoocError::Digest { .. })));

        let empty = CoocMatrix::new(0).to_file_string();
        assert_eq!(CoocMatrix::parse(&empty).unwrap().nnz(), 0);
    }

    proptest! {
        #[test]
        fn gamma_monotonicity(
            counts in proptest::collection::vec(1u32..20, 6),
            pairs in proptest::collection::vec((0u32..6, 0u32..6, 1u32..20), 0..20),
            g1 in 0.0f64..0.99,
            g2 in 0.0f64..0.99,
        ) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let mut lex = Lexicon::new(["a", "b", "c", "d", "e", "f"]).unwrap();
            let mut m = CoocMatrix::new(6);
            for (i, j, c) in pairs {
                if i != j {
                    let bound = counts[i as usize].min(counts[j as usize]);
                    let cur = m.get(i, j);
                    let add = c.min(bound.saturating_sub(cur));
                    if add > 0 {
                        m.merge(&CoocMatrix::from_triplets(6, [(i, j, add)]).unwrap()).unwrap();
                    }
                }
            }
            lex.set_counts(counts.iter().map(|&c| c as u64).collect()).unwrap();
            let f = normalize(&m, &lex).unwrap();
            for t in 0..6 {
                let wide = select_candidates(&f, &lex, t, lo, None).unwrap();
                let narrow = select_candidates(&f, &lex, t, hi, None).unwrap();
                prop_assert!(narrow.members.iter().all(|j| wide.members.contains(j)));
                prop_assert!(!wide.members.contains(&t));
            }
            for (i, j, _) in m.triplets() {
                prop_assert_eq!(m.get(i, j), m.get(j, i));
            }
        }

        #[test]
        fn file_format_round_trips(triplets in proptest::collection::vec((0u32..30, 0u32..30, 1u32..1000), 0..60)) {
            let m = CoocMatrix::from_triplets(30, triplets).unwrap();
            prop_assert_eq!(CoocMatrix::parse(&m.to_file_string()).unwrap(), m);
        }
    }
}
