//! Sharded corpus mining: occurrence counts and co-occurrence partials per
//! shard, merged by integer addition.
//!
//! Shards are fixed runs of `shard_lines` input lines, so the partition does
//! not depend on the worker count, and merging is commutative, so outputs are
//! identical for any number of workers.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cooc::{CoocError, CoocMatrix};
use crate::corpus::{ConceptMatcher, Lexicon, MatchOptions, ScanStats, scan_corpus};
use crate::digest::sha256_hex;

#[derive(Debug, Error)]
pub enum MineError {
    #[error("corpus i/o")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Cooc(#[from] CoocError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("counts file line {line}: {message}")]
    Format { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MineOptions {
    pub workers: usize,
    pub shard_lines: usize,
    pub matching: MatchOptions,
}

impl Default for MineOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            shard_lines: 65_536,
            matching: MatchOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MineOutput {
    pub counts: Vec<u64>,
    pub cooc: CoocMatrix,
    pub stats: ScanStats,
    /// SHA-256 of the decompressed corpus bytes.
    pub corpus_digest: String,
    pub shards: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ShardReport {
    pub index: usize,
    pub stats: ScanStats,
}

/// Opens a corpus file, transparently decompressing gzip (detected by magic
/// bytes, not extension).
pub fn open_corpus(path: &Path) -> io::Result<Box<dyn BufRead + Send>> {
    let mut file = BufReader::new(File::open(path)?);
    let head = file.fill_buf()?;
    if head.len() >= 2 && head[0] == 0x1f && head[1] == 0x8b {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(file))
    }
}

struct Shard {
    buf: Vec<u8>,
    ends: Vec<usize>,
}

impl Shard {
    fn lines(&self) -> impl Iterator<Item = &[u8]> {
        let mut start = 0;
        self.ends.iter().map(move |&end| {
            let mut line = &self.buf[start..end];
            start = end;
            while let [rest @ .., b'\n' | b'\r'] = line {
                line = rest;
            }
            line
        })
    }
}

fn read_shard<R: BufRead>(reader: &mut R, max_lines: usize, hasher: &mut Sha256) -> io::Result<Option<Shard>> {
    let mut shard = Shard {
        buf: Vec::new(),
        ends: Vec::new(),
    };
    while shard.ends.len() < max_lines {
        let before = shard.buf.len();
        if reader.read_until(b'\n', &mut shard.buf)? == 0 {
            break;
        }
        hasher.update(&shard.buf[before..]);
        shard.ends.push(shard.buf.len());
    }
    Ok((!shard.ends.is_empty()).then_some(shard))
}

struct Partial {
    counts: Vec<u64>,
    cooc: CoocMatrix,
    stats: ScanStats,
}

fn process_shard(shard: &Shard, matcher: &ConceptMatcher, dim: usize) -> Result<Partial, CoocError> {
    let mut counts = vec![0u64; dim];
    let mut cooc = CoocMatrix::new(dim as u32);
    let mut err = None;
    let stats = scan_corpus(shard.lines(), matcher, &mut counts, |set| {
        if err.is_none() {
            if let Err(e) = cooc.add_set(set) {
                err = Some(e);
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(Partial { counts, cooc, stats }),
    }
}

/// Mines occurrence counts and co-occurrences from a JSON-lines corpus.
pub fn mine<R, P>(mut reader: R, lexicon: &Lexicon, options: MineOptions, mut progress: P) -> Result<MineOutput, MineError>
where
    R: Read + BufRead,
    P: FnMut(&ShardReport),
{
    let workers = options.workers.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| MineError::Pool(e.to_string()))?;
    let matcher = ConceptMatcher::new(lexicon, options.matching);
    let dim = lexicon.len();
    let mut hasher = Sha256::new();
    let mut out = MineOutput {
        counts: vec![0; dim],
        cooc: CoocMatrix::new(dim as u32),
        stats: ScanStats::default(),
        corpus_digest: String::new(),
        shards: 0,
    };
    let batch_size = workers * 2;
    loop {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            match read_shard(&mut reader, options.shard_lines.max(1), &mut hasher)? {
                Some(shard) => batch.push(shard),
                None => break,
            }
        }
        if batch.is_empty() {
            break;
        }
        let partials: Vec<Result<Partial, CoocError>> =
            pool.install(|| batch.par_iter().map(|s| process_shard(s, &matcher, dim)).collect());
        for partial in partials {
            let partial = partial?;
            for (total, c) in out.counts.iter_mut().zip(&partial.counts) {
                *total += c;
            }
            out.cooc.merge(&partial.cooc)?;
            out.stats.merge(&partial.stats);
            progress(&ShardReport {
                index: out.shards,
                stats: partial.stats,
            });
            out.shards += 1;
        }
    }
    out.corpus_digest = hex::encode(hasher.finalize());
    Ok(out)
}

pub const COUNTS_MAGIC: &str = "ccmine-counts v1";

/// Occurrence counts aligned with a lexicon, plus provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountsFile {
    pub concepts: Vec<String>,
    pub counts: Vec<u64>,
    pub captions: u64,
    pub malformed: u64,
    pub corpus_digest: String,
    pub lexicon_digest: String,
}

impl CountsFile {
    pub fn new(lexicon: &Lexicon, output: &MineOutput) -> Self {
        Self {
            concepts: lexicon.concepts().to_vec(),
            counts: output.counts.clone(),
            captions: output.stats.captions,
            malformed: output.stats.malformed,
            corpus_digest: output.corpus_digest.clone(),
            lexicon_digest: lexicon.digest(),
        }
    }

    pub fn to_file_string(&self) -> String {
        let mut body = format!("{COUNTS_MAGIC} {}\n", self.concepts.len());
        writeln!(body, "#captions {}", self.captions).unwrap();
        writeln!(body, "#malformed {}", self.malformed).unwrap();
        writeln!(body, "#corpus_sha256 {}", self.corpus_digest).unwrap();
        writeln!(body, "#lexicon_sha256 {}", self.lexicon_digest).unwrap();
        for (c, n) in self.concepts.iter().zip(&self.counts) {
            writeln!(body, "{c}\t{n}").unwrap();
        }
        let digest = sha256_hex(body.as_bytes());
        writeln!(body, "#sha256:{digest}").unwrap();
        body
    }

    pub fn parse(text: &str) -> Result<Self, MineError> {
        let fmt = |line: usize, message: &str| MineError::Format {
            line,
            message: message.to_string(),
        };
        let trailer = text
            .trim_end_matches('\n')
            .rfind("\n#sha256:")
            .ok_or_else(|| fmt(0, "missing #sha256 trailer"))?;
        let body = &text[..trailer + 1];
        let stored = text[trailer + 1..].trim_end().trim_start_matches("#sha256:");
        if stored != sha256_hex(body.as_bytes()) {
            return Err(fmt(0, "digest mismatch"));
        }
        let mut lines = body.lines().enumerate();
        let dim: usize = lines
            .next()
            .and_then(|(_, h)| h.strip_prefix(COUNTS_MAGIC))
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| fmt(1, "bad header"))?;
        let mut file = CountsFile {
            concepts: Vec::with_capacity(dim),
            counts: Vec::with_capacity(dim),
            captions: 0,
            malformed: 0,
            corpus_digest: String::new(),
            lexicon_digest: String::new(),
        };
        for (n, line) in lines {
            if let Some(meta) = line.strip_prefix('#') {
                let (key, value) = meta.split_once(' ').ok_or_else(|| fmt(n + 1, "bad metadata"))?;
                let num = || value.parse::<u64>().map_err(|_| fmt(n + 1, "bad number"));
                match key {
                    "captions" => file.captions = num()?,
                    "malformed" => file.malformed = num()?,
                    "corpus_sha256" => file.corpus_digest = value.to_string(),
                    "lexicon_sha256" => file.lexicon_digest = value.to_string(),
                    _ => {}
                }
                continue;
            }
            let (concept, count) = line.rsplit_once('\t').ok_or_else(|| fmt(n + 1, "expected concept<TAB>count"))?;
            file.concepts.push(concept.to_string());
            file.counts.push(count.parse().map_err(|_| fmt(n + 1, "bad count"))?);
        }
        if file.concepts.len() != dim {
            return Err(fmt(0, "row count does not match header"));
        }
        Ok(file)
    }
}
