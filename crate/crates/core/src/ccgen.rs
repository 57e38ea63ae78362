//! Per-query contrastive-concept sets.
//!
//! Four generators share one output type: the fixed `{"background"}` set, the
//! co-occurrence dictionary (with nearest-neighbor fallback for queries outside
//! the lexicon), completion-service lists and the dataset's own class list.
//! [`cc_multi`] merges per-query sets when several queries are segmented at
//! once, dropping contrastive concepts too close to any query.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cooc::{CoocError, FreqMatrix, select_candidates};
use crate::corpus::{Lexicon, normalize_concept};
use crate::embed::{EmbedError, EmbeddingProvider, EmbeddingTable, cosine, nearest_neighbor};
use crate::filters::{FilterConfig, FilterError, FilterReport, PIPELINE_ORDER, VisibilityOracle, VisibilityTable, run_pipeline};
use crate::llm::{LlmClient, LlmError, PromptTemplate, parse_cc_list};

pub const BACKGROUND: &str = "background";
pub const DEFAULT_GAMMA: f64 = 0.01;
pub const DEFAULT_BETA: f64 = 0.9;

#[derive(Debug, Error)]
pub enum CcError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("query {0:?} would be its own contrastive concept")]
    QueryIsOwnContrast(String),
    #[error("no embedding for concept {0:?}")]
    MissingEmbedding(String),
    #[error("contrastive-concept dictionary is empty")]
    EmptyDictionary,
    #[error("at least one query is required")]
    NoQueries,
    #[error("beta must lie in [-1, 1], got {0}")]
    InvalidBeta(f64),
    #[error("dictionary file: {0}")]
    Format(String),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Cooc(#[from] CoocError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

impl CcError {
    /// True when the completion service, not the input, failed.
    pub fn is_remote(&self) -> bool {
        matches!(self, CcError::Llm(e) if e.is_remote())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CcKind {
    Bg,
    Dictionary,
    Llm,
    Privileged,
}

/// Contrastive concepts for one query. Never contains the query itself and
/// never repeats a concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcSet {
    pub query: String,
    pub kind: CcKind,
    pub concepts: Vec<String>,
    /// Lexicon concept whose entry was used (dictionary kind only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl CcSet {
    fn build<I, S>(query: &str, kind: CcKind, concepts: I, source: Option<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let concepts = concepts
            .into_iter()
            .map(Into::into)
            .filter(|c: &String| c != query && seen.insert(c.clone()))
            .collect();
        Self {
            query: query.to_string(),
            kind,
            concepts,
            source,
        }
    }
}

fn check_query(q: &str) -> Result<(), CcError> {
    if q.trim().is_empty() {
        return Err(CcError::EmptyQuery);
    }
    Ok(())
}

pub fn cc_bg(q: &str) -> Result<CcSet, CcError> {
    check_query(q)?;
    if q == BACKGROUND {
        return Err(CcError::QueryIsOwnContrast(q.to_string()));
    }
    Ok(CcSet::build(q, CcKind::Bg, [BACKGROUND], None))
}

/// All dataset classes except `q`.
pub fn cc_privileged(q: &str, classes: &[String]) -> Result<CcSet, CcError> {
    check_query(q)?;
    Ok(CcSet::build(q, CcKind::Privileged, classes.iter().cloned(), None))
}

/// `{"background"}` plus the parsed completion for the generation prompt.
pub fn cc_llm(q: &str, client: &LlmClient, template: &PromptTemplate) -> Result<CcSet, CcError> {
    check_query(q)?;
    let response = client.ask(template, q)?;
    let parsed = parse_cc_list(&response.text);
    if parsed.no_items {
        log::warn!("completion for {q:?} yielded no concepts");
    }
    Ok(CcSet::build(
        q,
        CcKind::Llm,
        std::iter::once(BACKGROUND.to_string()).chain(parsed.items),
        None,
    ))
}

/// Provenance and parameters of a dictionary build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictMeta {
    pub gamma: f64,
    pub delta: f64,
    pub lexicon_digest: String,
    pub corpus_digest: String,
    pub built_at: Option<String>,
    pub filters: Vec<String>,
    pub stopwords: Vec<String>,
    pub max_candidates: Option<usize>,
    /// True when some visibility answers were unavailable and the concepts
    /// were kept anyway.
    pub incomplete: bool,
    pub unresolved_visibility: Vec<String>,
    /// SHA-256 of further build inputs, keyed by role.
    #[serde(default)]
    pub input_digests: BTreeMap<String, String>,
}

/// Offline concept -> contrastive concepts map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcDictionary {
    pub meta: DictMeta,
    pub cc: BTreeMap<String, Vec<String>>,
}

impl CcDictionary {
    /// Pretty JSON with every object's keys sorted, newline-terminated.
    pub fn to_json_string(&self) -> String {
        // serde_json's Value map is ordered, which sorts struct fields too
        let value = serde_json::to_value(self).expect("dictionary serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CcError> {
        serde_json::from_str(text).map_err(|e| CcError::Format(e.to_string()))
    }

    pub fn get(&self, concept: &str) -> Option<&[String]> {
        self.cc.get(concept).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.cc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cc.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryConfig {
    pub gamma: f64,
    pub filter: FilterConfig,
    pub max_candidates: Option<usize>,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            filter: FilterConfig::default(),
            max_candidates: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub corpus_digest: String,
    pub built_at: Option<String>,
    pub input_digests: BTreeMap<String, String>,
}

/// Selects and filters candidates for every lexicon concept.
///
/// Every lexicon concept needs an embedding. Targets are processed in
/// parallel; the result does not depend on `workers`.
#[allow(clippy::too_many_arguments)]
pub fn build_dictionary(
    lexicon: &Lexicon,
    freq: &FreqMatrix,
    embeddings: &EmbeddingTable,
    table: &VisibilityTable,
    oracle: &dyn VisibilityOracle,
    config: &DictionaryConfig,
    provenance: &Provenance,
    workers: usize,
) -> Result<CcDictionary, CcError> {
    config.filter.validate()?;
    if let Some(missing) = lexicon.concepts().iter().find(|c| !embeddings.contains(c)) {
        return Err(CcError::MissingEmbedding(missing.clone()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CcError::Pool(e.to_string()))?;
    type Row = (String, Vec<String>, FilterReport);
    let rows: Vec<Result<Row, CcError>> = pool.install(|| {
        (0..lexicon.len() as u32)
            .into_par_iter()
            .map(|target| {
                let candidates = select_candidates(freq, lexicon, target, config.gamma, config.max_candidates)?;
                let (kept, report) = run_pipeline(&candidates, lexicon, &config.filter, table, oracle, embeddings)?;
                let names = kept
                    .members
                    .iter()
                    .map(|&j| lexicon.concept(j).unwrap_or_default().to_string())
                    .collect();
                Ok((lexicon.concept(target).unwrap_or_default().to_string(), names, report))
            })
            .collect()
    });
    let mut cc = BTreeMap::new();
    let mut unresolved = Vec::new();
    for row in rows {
        let (concept, list, report) = row?;
        unresolved.extend(report.failed_open);
        cc.insert(concept, list);
    }
    unresolved.sort();
    unresolved.dedup();
    Ok(CcDictionary {
        meta: DictMeta {
            gamma: config.gamma,
            delta: config.filter.delta,
            lexicon_digest: lexicon.digest(),
            corpus_digest: provenance.corpus_digest.clone(),
            built_at: provenance.built_at.clone(),
            filters: PIPELINE_ORDER.iter().map(|s| s.to_string()).collect(),
            stopwords: config.filter.stopwords.iter().cloned().collect(),
            max_candidates: config.max_candidates,
            incomplete: !unresolved.is_empty(),
            unresolved_visibility: unresolved,
            input_digests: provenance.input_digests.clone(),
        },
        cc,
    })
}

/// A dictionary plus the embeddings of its concepts, for mapping arbitrary
/// queries onto dictionary entries.
#[derive(Debug, Clone)]
pub struct DictionaryIndex<'a> {
    dict: &'a CcDictionary,
    table: EmbeddingTable,
}

impl<'a> DictionaryIndex<'a> {
    pub fn new(dict: &'a CcDictionary, embeddings: &EmbeddingTable) -> Result<Self, CcError> {
        if dict.is_empty() {
            return Err(CcError::EmptyDictionary);
        }
        let table = embeddings.subset(dict.cc.keys().map(String::as_str)).map_err(|e| match e {
            EmbedError::Missing(c) => CcError::MissingEmbedding(c),
            other => other.into(),
        })?;
        Ok(Self { dict, table })
    }

    pub fn dictionary(&self) -> &CcDictionary {
        self.dict
    }

    /// The dictionary concept standing in for `q`: `q` itself when present,
    /// otherwise its nearest neighbor in embedding space.
    pub fn map_query(&self, q: &str, provider: &dyn EmbeddingProvider) -> Result<(String, f64), CcError> {
        let q = normalize_concept(q);
        if self.dict.cc.contains_key(&q) {
            return Ok((q, 1.0));
        }
        let v = provider.embed(&q).ok_or_else(|| CcError::MissingEmbedding(q.clone()))?;
        let (name, sim) = nearest_neighbor(&v, &self.table)?;
        Ok((name.to_string(), sim))
    }
}

/// `{"background"}` plus the dictionary entry of the concept `q` maps to.
pub fn cc_d(q: &str, index: &DictionaryIndex<'_>, provider: &dyn EmbeddingProvider) -> Result<CcSet, CcError> {
    check_query(q)?;
    let (source, _) = index.map_query(q, provider)?;
    let entry = index.dict.get(&source).unwrap_or_default();
    Ok(CcSet::build(
        q,
        CcKind::Dictionary,
        std::iter::once(BACKGROUND.to_string()).chain(entry.iter().cloned()),
        Some(source),
    ))
}

/// Which queries a contrastive concept is compared against in [`cc_multi`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaScope {
    /// Maximum similarity over every query.
    #[default]
    AllQueries,
    /// Only the query whose set proposed the concept.
    SourceQuery,
}

/// Union of the per-query sets in query order, keeping a concept only when
/// its similarity to the queries (per `scope`) is at most `beta`. Concepts
/// that are themselves queries are always dropped.
pub fn cc_multi(
    queries: &[String],
    per_query: &[CcSet],
    beta: f64,
    provider: &dyn EmbeddingProvider,
    scope: BetaScope,
) -> Result<Vec<String>, CcError> {
    if queries.is_empty() {
        return Err(CcError::NoQueries);
    }
    if !(-1.0..=1.0).contains(&beta) {
        return Err(CcError::InvalidBeta(beta));
    }
    let mut vectors: HashMap<String, Vec<f32>> = HashMap::new();
    let mut embed = |name: &str| -> Result<Vec<f32>, CcError> {
        if let Some(v) = vectors.get(name) {
            return Ok(v.clone());
        }
        let v = provider
            .embed(name)
            .ok_or_else(|| CcError::MissingEmbedding(name.to_string()))?;
        vectors.insert(name.to_string(), v.clone());
        Ok(v)
    };
    let query_vecs: Vec<Vec<f32>> = queries.iter().map(|q| embed(q)).collect::<Result<_, _>>()?;
    let query_set: HashSet<&str> = queries.iter().map(String::as_str).collect();

    let mut kept = Vec::new();
    let mut seen = HashSet::new();
    for (qi, q) in queries.iter().enumerate() {
        let Some(set) = per_query.iter().find(|s| &s.query == q) else {
            continue;
        };
        for concept in &set.concepts {
            if query_set.contains(concept.as_str()) || seen.contains(concept) {
                continue;
            }
            let v = embed(concept)?;
            let sim = match scope {
                BetaScope::AllQueries => query_vecs
                    .iter()
                    .map(|p| cosine(&v, p))
                    .try_fold(f64::NEG_INFINITY, |m, s| s.map(|s| m.max(s)))?,
                BetaScope::SourceQuery => cosine(&v, &query_vecs[qi])?,
            };
            if sim <= beta {
                seen.insert(concept.clone());
                kept.push(concept.clone());
            }
        }
    }
    Ok(kept)
}

/// Supplies contrastive concepts for a query during evaluation.
pub trait CcSource: Sync {
    fn contrast_for(&self, q: &str) -> Result<Vec<String>, CcError>;
}

/// No contrastive concepts: the query alone is prompted.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoContrast;

impl CcSource for NoContrast {
    fn contrast_for(&self, _q: &str) -> Result<Vec<String>, CcError> {
        Ok(Vec::new())
    }
}

/// One of the four generators, memoized per query.
pub enum CcGenerator<'a> {
    Bg,
    Dictionary {
        index: DictionaryIndex<'a>,
        provider: &'a dyn EmbeddingProvider,
    },
    Llm {
        client: &'a LlmClient,
        template: PromptTemplate,
    },
    Privileged {
        classes: Vec<String>,
    },
}

impl CcGenerator<'_> {
    pub fn generate(&self, q: &str) -> Result<CcSet, CcError> {
        match self {
            CcGenerator::Bg => cc_bg(q),
            CcGenerator::Dictionary { index, provider } => cc_d(q, index, *provider),
            CcGenerator::Llm { client, template } => cc_llm(q, client, template),
            CcGenerator::Privileged { classes } => cc_privileged(q, classes),
        }
    }
}

pub struct Memoized<'a> {
    generator: CcGenerator<'a>,
    memo: Mutex<HashMap<String, Vec<String>>>,
}

impl<'a> Memoized<'a> {
    pub fn new(generator: CcGenerator<'a>) -> Self {
        Self {
            generator,
            memo: Mutex::new(HashMap::new()),
        }
    }
}

impl CcSource for Memoized<'_> {
    fn contrast_for(&self, q: &str) -> Result<Vec<String>, CcError> {
        if let Some(hit) = self.memo.lock().unwrap().get(q) {
            return Ok(hit.clone());
        }
        let concepts = self.generator.generate(q)?.concepts;
        self.memo.lock().unwrap().insert(q.to_string(), concepts.clone());
        Ok(concepts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cooc::{CoocMatrix, normalize};
    use crate::filters::{RejectUnknown, Source};
    use crate::llm::{ClientConfig, HttpReply, PromptKind, Transport};
    use std::time::Duration;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn dict(entries: &[(&str, &[&str])]) -> CcDictionary {
        CcDictionary {
            meta: DictMeta {
                gamma: 0.01,
                delta: 0.8,
                lexicon_digest: String::new(),
                corpus_digest: String::new(),
                built_at: None,
                filters: vec![],
                stopwords: vec![],
                max_candidates: None,
                incomplete: false,
                unresolved_visibility: vec![],
                input_digests: BTreeMap::new(),
            },
            cc: entries.iter().map(|(k, v)| (k.to_string(), s(v))).collect(),
        }
    }

    fn table(entries: &[(&str, &[f32])]) -> EmbeddingTable {
        EmbeddingTable::normalizing(
            entries[0].1.len(),
            entries.iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect(),
        )
        .unwrap()
    }

    struct Canned(&'static str);

    impl Transport for Canned {
        fn post_json(&self, _: &str, _: &str, _: Duration) -> Result<HttpReply, String> {
            Ok(HttpReply {
                status: 200,
                body: serde_json::json!({ "text": self.0 }).to_string(),
            })
        }
    }

    fn canned(text: &'static str) -> LlmClient {
        let cfg = ClientConfig {
            endpoint: "http://stub.invalid".into(),
            ..Default::default()
        };
        LlmClient::with_transport(cfg, Box::new(Canned(text)), None)
    }

    #[test]
    fn background_set() {
        assert_eq!(cc_bg("boat").unwrap().concepts, ["background"]);
        assert_eq!(cc_bg("corgi").unwrap().concepts, ["background"]);
        assert!(matches!(cc_bg("background"), Err(CcError::QueryIsOwnContrast(_))));
        assert!(matches!(cc_bg(""), Err(CcError::EmptyQuery)));
    }

    #[test]
    fn privileged_set() {
        let got = cc_privileged("car", &s(&["car", "road", "sky"])).unwrap();
        assert_eq!(got.concepts, ["road", "sky"]);
        assert!(cc_privileged("car", &s(&["car"])).unwrap().concepts.is_empty());
        assert_eq!(cc_privileged("boat", &s(&["boat", "water", "sand"])).unwrap().concepts, ["water", "sand"]);
        assert_eq!(cc_privileged("x", &s(&["a", "b"])).unwrap().concepts, ["a", "b"]);
    }

    #[test]
    fn dictionary_lookup_and_mapping() {
        let d = dict(&[("boat", &["water", "dock"]), ("dog", &["leash", "grass", "cavalier"]), ("cat", &["sofa"])]);
        let e = table(&[
            ("boat", &[1.0, 0.0, 0.0]),
            ("dog", &[0.0, 1.0, 0.0]),
            ("cat", &[0.0, 0.6, 0.8]),
            ("cavalier", &[0.1, 0.95, 0.1]),
        ]);
        let index = DictionaryIndex::new(&d, &e).unwrap();

        let got = cc_d("boat", &index, &e).unwrap();
        assert_eq!(got.concepts, ["background", "water", "dock"]);
        assert_eq!(got.source.as_deref(), Some("boat"));

        let got = cc_d("cavalier", &index, &e).unwrap();
        assert_eq!(got.source.as_deref(), Some("dog"));
        // the query is removed from the borrowed entry
        assert_eq!(got.concepts, ["background", "leash", "grass"]);

        assert!(matches!(cc_d("unicorn", &index, &e), Err(CcError::MissingEmbedding(c)) if c == "unicorn"));
    }

    #[test]
    fn every_lexicon_concept_maps_to_itself() {
        let d = dict(&[("a", &[]), ("b", &[]), ("c", &[])]);
        // "b" and "c" share a vector; self-mapping must not depend on it
        let e = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0]), ("c", &[0.0, 1.0])]);
        let index = DictionaryIndex::new(&d, &e).unwrap();
        for c in ["a", "b", "c"] {
            assert_eq!(index.map_query(c, &e).unwrap().0, c);
        }
    }

    #[test]
    fn llm_sets() {
        let client = canned("building, tree, car, pedestrian, sky, streetlight, sidewalk, bicycle, parked car, traffic sign");
        let t = PromptTemplate::builtin(PromptKind::CcGeneration, true);
        let got = cc_llm("road", &client, &t).unwrap();
        assert_eq!(
            got.concepts,
            [
                "background", "building", "tree", "car", "pedestrian", "sky", "streetlight", "sidewalk", "bicycle",
                "parked car", "traffic sign"
            ]
        );
        let got = cc_llm("rider", &canned("bicycle, road, nature, park"), &t).unwrap();
        assert_eq!(got.concepts, ["background", "bicycle", "road", "nature", "park"]);
        let got = cc_llm("dog", &canned("[\"dog\", \"leash\"]"), &t).unwrap();
        assert_eq!(got.concepts, ["background", "leash"]);
    }

    #[test]
    fn multi_query_beta_exclusion() {
        let puppy = [0.95f32, 0.0, (1.0f32 - 0.95 * 0.95).sqrt()];
        let e = table(&[
            ("dog", &[1.0, 0.0, 0.0]),
            ("cat", &[0.0, 1.0, 0.0]),
            ("puppy", &puppy),
            ("sofa", &[0.0, 0.0, 1.0]),
            ("background", &[0.0, -0.5, 0.866]),
        ]);
        assert!((cosine(e.get("puppy").unwrap(), e.get("dog").unwrap()).unwrap() - 0.95).abs() < 1e-6);
        let q = s(&["cat", "dog"]);
        let sets = vec![
            CcSet::build("cat", CcKind::Dictionary, ["background", "puppy", "sofa", "dog"], None),
            CcSet::build("dog", CcKind::Dictionary, ["background", "sofa"], None),
        ];
        assert_eq!(cc_multi(&q, &sets, 0.9, &e, BetaScope::AllQueries).unwrap(), ["background", "sofa"]);
        // judged only against "cat", puppy survives
        assert_eq!(
            cc_multi(&q, &sets, 0.9, &e, BetaScope::SourceQuery).unwrap(),
            ["background", "puppy", "sofa"]
        );
        assert_eq!(
            cc_multi(&q, &sets, 1.0, &e, BetaScope::AllQueries).unwrap(),
            ["background", "puppy", "sofa"]
        );

        let single = s(&["dog"]);
        let one = vec![CcSet::build("dog", CcKind::Bg, ["sofa", "background"], None)];
        assert_eq!(cc_multi(&single, &one, 0.9, &e, BetaScope::AllQueries).unwrap(), one[0].concepts);

        assert!(matches!(cc_multi(&[], &sets, 0.9, &e, BetaScope::AllQueries), Err(CcError::NoQueries)));
        let bad = vec![CcSet::build("dog", CcKind::Bg, ["ghost"], None)];
        assert!(matches!(
            cc_multi(&single, &bad, 0.9, &e, BetaScope::AllQueries),
            Err(CcError::MissingEmbedding(c)) if c == "ghost"
        ));
    }

    fn toy_inputs() -> (Lexicon, FreqMatrix, EmbeddingTable, VisibilityTable) {
        let mut lex = Lexicon::new(["boat", "water", "dock", "photo", "liberty"]).unwrap();
        lex.set_counts(vec![4, 2, 2, 2, 1]).unwrap();
        let m = CoocMatrix::from_triplets(5, [(0, 1, 2), (0, 2, 1), (0, 3, 2), (0, 4, 1), (1, 2, 1)]).unwrap();
        let f = normalize(&m, &lex).unwrap();
        let e = table(&[
            ("boat", &[1.0, 0.0, 0.0]),
            ("water", &[0.0, 1.0, 0.0]),
            ("dock", &[0.9, 0.1, 0.0]),
            ("photo", &[0.0, 0.0, 1.0]),
            ("liberty", &[0.0, 0.5, 0.5]),
        ]);
        let vis = VisibilityTable::new();
        for (c, v) in [("boat", true), ("water", true), ("dock", true), ("photo", true), ("liberty", false)] {
            vis.insert(c, v, Source::Manual);
        }
        (lex, f, e, vis)
    }

    #[test]
    fn dictionary_build_is_deterministic() {
        let (lex, f, e, vis) = toy_inputs();
        let cfg = DictionaryConfig::default();
        let prov = Provenance {
            corpus_digest: "abc".into(),
            ..Default::default()
        };
        let d1 = build_dictionary(&lex, &f, &e, &vis, &RejectUnknown, &cfg, &prov, 1).unwrap();
        // dock is too similar to boat; photo is a stop-word; liberty is not visible
        assert_eq!(d1.cc["boat"], ["water"]);
        assert_eq!(d1.cc["water"], ["boat", "dock"]);
        assert!(d1.cc["liberty"].contains(&"boat".to_string()));
        assert!(!d1.meta.incomplete);
        for workers in [2, 4, 16] {
            let d = build_dictionary(&lex, &f, &e, &vis, &RejectUnknown, &cfg, &prov, workers).unwrap();
            assert_eq!(d.to_json_string(), d1.to_json_string());
        }
        let text = d1.to_json_string();
        assert_eq!(CcDictionary::from_json(&text).unwrap(), d1);
        let meta_at = text.find("\"meta\"").unwrap();
        assert!(text.find("\"cc\"").unwrap() < meta_at);
    }

    #[test]
    fn dictionary_build_requires_embeddings() {
        let (lex, f, _, vis) = toy_inputs();
        let partial = table(&[("boat", &[1.0, 0.0])]);
        let err = build_dictionary(
            &lex,
            &f,
            &partial,
            &vis,
            &RejectUnknown,
            &DictionaryConfig::default(),
            &Provenance::default(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, CcError::MissingEmbedding(c) if c == "water"));
    }

    #[test]
    fn no_set_contains_its_query() {
        let e = table(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        let d = dict(&[("a", &["a", "b"]), ("b", &["a"])]);
        let index = DictionaryIndex::new(&d, &e).unwrap();
        let t = PromptTemplate::builtin(PromptKind::CcGeneration, true);
        let client = canned("a, b, background");
        for q in ["a", "b"] {
            for set in [
                cc_bg(q).unwrap(),
                cc_d(q, &index, &e).unwrap(),
                cc_llm(q, &client, &t).unwrap(),
                cc_privileged(q, &s(&["a", "b"])).unwrap(),
            ] {
                assert!(!set.concepts.iter().any(|c| c == q), "{set:?}");
                let unique: HashSet<_> = set.concepts.iter().collect();
                assert_eq!(unique.len(), set.concepts.len());
            }
        }
    }

    #[test]
    fn memoized_source_calls_generator_once() {
        let src = Memoized::new(CcGenerator::Privileged { classes: s(&["a", "b"]) });
        assert_eq!(src.contrast_for("a").unwrap(), ["b"]);
        assert_eq!(src.contrast_for("a").unwrap(), ["b"]);
        assert_eq!(NoContrast.contrast_for("a").unwrap(), Vec::<String>::new());
    }
}
