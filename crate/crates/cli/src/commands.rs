use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result, bail};
use ccmine::ccgen::{
    CcDictionary, CcGenerator, CcSet, CcSource, DictionaryConfig, DictionaryIndex, Memoized, NoContrast,
    Provenance, build_dictionary, cc_multi,
};
use ccmine::cooc::{CoocMatrix, FreqMatrix, normalize};
use ccmine::corpus::{Lexicon, MatchOptions};
use ccmine::digest::{atomic_write, sha256_hex};
use ccmine::embed::EmbeddingTable;
use ccmine::filters::{FilterConfig, Offline, VisibilityOracle, VisibilityTable};
use ccmine::llm::{LlmClient, LlmVisibility, PromptKind, PromptTemplate};
use ccmine::metrics::{
    EvalImage, GroundTruth, ImageFailure, MetricsReport, iou_single_dataset, miou, run_classic, run_iou_single,
    sigmoid_score_range, sigmoid_sweep, sweep_thresholds,
};
use ccmine::mining::{CountsFile, MineOptions, mine, open_corpus};
use ccmine::segment::{ArgmaxSegmenter, FeatureMap, PromptSet, Segmenter, SigmoidSegmenter, sidecar_path};
use serde_json::{Value, json};

use crate::config::{CcMode, Metric, RunConfig, need};

fn write_artifact(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    atomic_write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}

fn output_path(flag: &Option<PathBuf>, cfg: &RunConfig, default_name: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    match &cfg.paths.output_dir {
        Some(dir) => Ok(dir.join(default_name)),
        None => bail!("no output location: pass --out or set paths.output_dir"),
    }
}

pub struct MineRequest {
    pub corpus: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub cooc_out: Option<PathBuf>,
    pub counts_out: Option<PathBuf>,
}

pub fn run_mine(req: MineRequest, cfg: &RunConfig) -> Result<u8> {
    let corpus = need(&req.corpus, &cfg.paths.corpus, "corpus")?;
    let lexicon_path = need(&req.lexicon, &cfg.paths.lexicon, "lexicon")?;
    let lexicon = Lexicon::load(&lexicon_path)?;
    let reader = open_corpus(&corpus).with_context(|| format!("opening corpus {}", corpus.display()))?;
    let options = MineOptions {
        workers: cfg.workers(),
        shard_lines: cfg.shard_lines,
        matching: MatchOptions {
            fold_plurals: cfg.fold_plurals,
        },
    };
    let out = mine(reader, &lexicon, options, |r| {
        log::info!(
            "shard {}: {} captions, {} malformed",
            r.index,
            r.stats.captions,
            r.stats.malformed
        );
    })?;
    let cooc_path = output_path(&req.cooc_out, cfg, "cooc.txt")?;
    let counts_path = output_path(&req.counts_out, cfg, "counts.txt")?;
    write_artifact(&cooc_path, out.cooc.to_file_string().as_bytes())?;
    write_artifact(&counts_path, CountsFile::new(&lexicon, &out).to_file_string().as_bytes())?;
    log::info!(
        "{} captions ({} malformed) in {} shards, {} co-occurring pairs",
        out.stats.captions,
        out.stats.malformed,
        out.shards,
        out.cooc.nnz()
    );
    Ok(0)
}

/// Everything `build_dictionary` reads from disk.
pub struct DictInputs {
    pub lexicon: Lexicon,
    pub freq: FreqMatrix,
    pub embeddings: EmbeddingTable,
    pub table: VisibilityTable,
    pub provenance: Provenance,
}

pub struct DictPaths {
    pub cooc: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub visibility: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
}

fn load_dict_inputs(paths: &DictPaths, cfg: &RunConfig) -> Result<DictInputs> {
    let cooc_path = need(&paths.cooc, &cfg.paths.cooc, "cooc")?;
    let counts_path = need(&paths.counts, &cfg.paths.counts, "counts")?;
    let emb_path = need(&paths.embeddings, &cfg.paths.embeddings, "embeddings")?;
    let counts_text = String::from_utf8(read_bytes(&counts_path)?).context("counts file is not UTF-8")?;
    let counts = CountsFile::parse(&counts_text)?;
    let mut lexicon = Lexicon::new(counts.concepts.iter().map(String::as_str))?;
    lexicon.set_counts(counts.counts.clone())?;
    if lexicon.digest() != counts.lexicon_digest {
        bail!("counts file lexicon digest does not match its concepts");
    }
    let cooc_text = String::from_utf8(read_bytes(&cooc_path)?).context("cooc file is not UTF-8")?;
    let cooc = CoocMatrix::parse(&cooc_text)?;
    let freq = normalize(&cooc, &lexicon)?;
    let embeddings = EmbeddingTable::load(&emb_path)?;

    let mut input_digests = BTreeMap::new();
    input_digests.insert("cooc".to_string(), sha256_hex(cooc_text.as_bytes()));
    input_digests.insert("counts".to_string(), sha256_hex(counts_text.as_bytes()));
    input_digests.insert("embeddings".to_string(), file_digest(&emb_path)?);
    let table = match paths.visibility.as_ref().or(cfg.paths.visibility.as_ref()) {
        Some(p) => {
            input_digests.insert("visibility".to_string(), file_digest(p)?);
            VisibilityTable::load(p)?
        }
        None => VisibilityTable::new(),
    };
    if let Some(p) = paths.stopwords.as_ref().or(cfg.paths.stopwords.as_ref()) {
        input_digests.insert("stopwords".to_string(), file_digest(p)?);
    }
    let built_at = cfg.built_at.clone().or_else(|| std::env::var("SOURCE_DATE_EPOCH").ok());
    Ok(DictInputs {
        lexicon,
        freq,
        embeddings,
        table,
        provenance: Provenance {
            corpus_digest: counts.corpus_digest,
            built_at,
            input_digests,
        },
    })
}

fn filter_config(stopwords: &Option<PathBuf>, cfg: &RunConfig, delta: f64) -> Result<FilterConfig> {
    let mut fc = FilterConfig {
        delta,
        ..FilterConfig::default()
    };
    if let Some(words) = &cfg.stopwords {
        fc.stopwords = words.iter().map(|w| ccmine::corpus::normalize_concept(w)).collect();
    }
    if let Some(p) = stopwords.as_ref().or(cfg.paths.stopwords.as_ref()) {
        let text = String::from_utf8(read_bytes(p)?).context("stop-word file is not UTF-8")?;
        fc.stopwords = text
            .lines()
            .map(ccmine::corpus::normalize_concept)
            .filter(|w| !w.is_empty() && !w.starts_with('#'))
            .collect();
    }
    Ok(fc)
}

fn llm_client(cfg: &RunConfig) -> Option<LlmClient> {
    let cached = std::env::var_os(ccmine::llm::CACHE_ENV).is_some() || cfg.llm.cache_dir.is_some();
    (!cfg.llm.endpoint.is_empty() || cached).then(|| LlmClient::new(cfg.llm.clone()))
}

pub struct BuildCcRequest {
    pub paths: DictPaths,
    pub out: Option<PathBuf>,
    pub visibility_out: Option<PathBuf>,
}

pub fn run_build_cc(req: BuildCcRequest, cfg: &RunConfig) -> Result<u8> {
    let inputs = load_dict_inputs(&req.paths, cfg)?;
    let config = DictionaryConfig {
        gamma: cfg.gamma,
        filter: filter_config(&req.paths.stopwords, cfg, cfg.delta)?,
        max_candidates: cfg.max_candidates,
    };
    let client = llm_client(cfg);
    let llm_oracle;
    let oracle: &dyn VisibilityOracle = match &client {
        Some(c) => {
            llm_oracle = LlmVisibility::new(c, PromptTemplate::builtin(PromptKind::Visibility, cfg.prompt_markers));
            &llm_oracle
        }
        None => &Offline,
    };
    let dict = build_dictionary(
        &inputs.lexicon,
        &inputs.freq,
        &inputs.embeddings,
        &inputs.table,
        oracle,
        &config,
        &inputs.provenance,
        cfg.workers(),
    )?;
    if dict.meta.incomplete {
        log::warn!(
            "{} concepts kept without a visibility answer",
            dict.meta.unresolved_visibility.len()
        );
    }
    let out = output_path(&req.out, cfg, "cc_dictionary.json")?;
    write_artifact(&out, dict.to_json_string().as_bytes())?;
    if let Some(p) = &req.visibility_out {
        write_artifact(p, inputs.table.to_jsonl().as_bytes())?;
    }
    log::info!("wrote {} entries to {}", dict.len(), out.display());
    Ok(0)
}

/// Inputs for producing contrastive concepts in any mode.
pub struct CcPaths {
    pub cc_dictionary: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub classes: Vec<String>,
}

pub struct CcContext {
    pub mode: CcMode,
    pub embeddings: EmbeddingTable,
    pub embeddings_digest: String,
    pub dictionary: Option<(CcDictionary, String)>,
    pub client: Option<LlmClient>,
    pub classes: Vec<String>,
    pub markers: bool,
}

impl CcContext {
    pub fn load(paths: &CcPaths, cfg: &RunConfig) -> Result<Self> {
        let emb_path = need(&paths.embeddings, &cfg.paths.embeddings, "embeddings")?;
        let embeddings = EmbeddingTable::load(&emb_path)?;
        let embeddings_digest = file_digest(&emb_path)?;
        let dictionary = if cfg.cc_mode == CcMode::Dict {
            let p = need(&paths.cc_dictionary, &cfg.paths.cc_dictionary, "cc-dictionary")?;
            let bytes = read_bytes(&p)?;
            let text = String::from_utf8(bytes).context("dictionary is not UTF-8")?;
            Some((CcDictionary::from_json(&text)?, sha256_hex(text.as_bytes())))
        } else {
            None
        };
        let client = if cfg.cc_mode == CcMode::Llm {
            match llm_client(cfg) {
                Some(c) => Some(c),
                None => bail!("cc mode llm needs llm.endpoint or a response cache"),
            }
        } else {
            None
        };
        Ok(Self {
            mode: cfg.cc_mode,
            embeddings,
            embeddings_digest,
            dictionary,
            client,
            classes: paths.classes.clone(),
            markers: cfg.prompt_markers,
        })
    }

    /// The generator for this mode; `None` means no contrastive concepts.
    /// `classes` feeds the privileged mode when no explicit list was given.
    pub fn generator(&self, classes: &[String]) -> Result<Option<CcGenerator<'_>>> {
        Ok(match self.mode {
            CcMode::None => None,
            CcMode::Bg => Some(CcGenerator::Bg),
            CcMode::Dict => {
                let (dict, _) = self.dictionary.as_ref().expect("dictionary loaded for dict mode");
                Some(CcGenerator::Dictionary {
                    index: DictionaryIndex::new(dict, &self.embeddings)?,
                    provider: &self.embeddings,
                })
            }
            CcMode::Llm => Some(CcGenerator::Llm {
                client: self.client.as_ref().expect("client built for llm mode"),
                template: PromptTemplate::builtin(PromptKind::CcGeneration, self.markers),
            }),
            CcMode::Privileged => Some(CcGenerator::Privileged {
                classes: if self.classes.is_empty() {
                    classes.to_vec()
                } else {
                    self.classes.clone()
                },
            }),
        })
    }

    pub fn source<'a>(&'a self, classes: &[String]) -> Result<Box<dyn CcSource + 'a>> {
        Ok(match self.generator(classes)? {
            Some(g) => Box::new(Memoized::new(g)),
            None => Box::new(NoContrast),
        })
    }

    pub fn meta(&self, meta: &mut BTreeMap<String, Value>) {
        meta.insert("cc_mode".into(), json!(self.mode.name()));
        meta.insert("embeddings_sha256".into(), json!(self.embeddings_digest));
        if let Some((dict, digest)) = &self.dictionary {
            meta.insert("dictionary_sha256".into(), json!(digest));
            meta.insert("gamma".into(), json!(dict.meta.gamma));
            meta.insert("delta".into(), json!(dict.meta.delta));
            meta.insert("dictionary_incomplete".into(), json!(dict.meta.incomplete));
        }
    }
}

/// Per-query sets for every query except the background label.
fn per_query_sets(gen: Option<&CcGenerator<'_>>, queries: &[String], background: &str) -> Result<Vec<CcSet>> {
    let Some(gen) = gen else {
        return Ok(Vec::new());
    };
    queries
        .iter()
        .filter(|q| q.as_str() != background)
        .map(|q| gen.generate(q).with_context(|| format!("contrastive concepts for {q:?}")))
        .collect()
}

fn merged_ccs(ctx: &CcContext, queries: &[String], sets: &[CcSet], beta: f64, cfg: &RunConfig) -> Result<Vec<String>> {
    if sets.is_empty() {
        return Ok(Vec::new());
    }
    Ok(cc_multi(queries, sets, beta, &ctx.embeddings, cfg.beta_scope)?)
}

pub struct GenCcRequest {
    pub queries: Vec<String>,
    pub cc: CcPaths,
    pub out: Option<PathBuf>,
}

pub fn run_gen_cc(req: GenCcRequest, cfg: &RunConfig) -> Result<u8> {
    if req.queries.is_empty() {
        bail!("at least one --query is required");
    }
    let queries: Vec<String> = req.queries.iter().map(|q| ccmine::corpus::normalize_concept(q)).collect();
    let ctx = CcContext::load(&req.cc, cfg)?;
    let gen = ctx.generator(&queries)?;
    let sets: Vec<CcSet> = match &gen {
        Some(g) => queries
            .iter()
            .map(|q| g.generate(q).with_context(|| format!("contrastive concepts for {q:?}")))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let mut meta = BTreeMap::new();
    ctx.meta(&mut meta);
    let mut doc = json!({ "queries": queries, "per_query": sets, "meta": meta });
    if queries.len() > 1 {
        doc["merged"] = json!(merged_ccs(&ctx, &queries, &sets, cfg.beta, cfg)?);
        doc["beta"] = json!(cfg.beta);
    }
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    match &req.out {
        Some(p) => write_artifact(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn segmenter(cfg: &RunConfig) -> Box<dyn Segmenter> {
    match cfg.sigmoid_threshold {
        Some(threshold) => Box::new(SigmoidSegmenter { threshold }),
        None => Box::new(ArgmaxSegmenter { upsample: cfg.upsample }),
    }
}

pub struct SegmentRequest {
    pub features: PathBuf,
    pub queries: Vec<String>,
    pub cc: CcPaths,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub out: PathBuf,
}

pub fn run_segment(req: SegmentRequest, cfg: &RunConfig) -> Result<u8> {
    if req.queries.is_empty() {
        bail!("at least one --query is required");
    }
    let queries: Vec<String> = req.queries.iter().map(|q| ccmine::corpus::normalize_concept(q)).collect();
    let features = FeatureMap::load(&req.features)?;
    let ctx = CcContext::load(&req.cc, cfg)?;
    let gen = ctx.generator(&queries)?;
    let ccs = if queries.len() == 1 {
        match &gen {
            Some(g) => g.generate(&queries[0])?.concepts,
            None => Vec::new(),
        }
    } else {
        let sets = per_query_sets(gen.as_ref(), &queries, &cfg.background_label)?;
        merged_ccs(&ctx, &queries, &sets, cfg.beta, cfg)?
    };
    let prompts = PromptSet::build(&queries, &ccs, &ctx.embeddings)?;
    let (h, w) = (req.height.unwrap_or(features.h()), req.width.unwrap_or(features.w()));
    let map = segmenter(cfg).segment(&features, &prompts, h, w)?;
    write_artifact(&req.out, &map.to_bytes())?;
    write_artifact(&sidecar_path(&req.out), map.sidecar_json().as_bytes())?;
    Ok(0)
}

pub struct DataPaths {
    pub features_dir: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
}

/// Images are the `*.feat` files of the feature directory, paired by stem
/// with `<stem>.seg` (and its `.json` sidecar) in the annotation directory.
fn load_dataset(paths: &DataPaths, cfg: &RunConfig) -> Result<(Vec<EvalImage>, Vec<ImageFailure>)> {
    let features_dir = need(&paths.features_dir, &cfg.paths.features_dir, "features-dir")?;
    let gt_dir = need(&paths.gt_dir, &cfg.paths.gt_dir, "gt-dir")?;
    let mut stems = BTreeSet::new();
    for entry in fs::read_dir(&features_dir).with_context(|| format!("listing {}", features_dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "feat") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_string());
            }
        }
    }
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for id in stems {
        let loaded = FeatureMap::load(&features_dir.join(format!("{id}.feat")))
            .map_err(anyhow::Error::from)
            .and_then(|features| {
                let gt = GroundTruth::load(&gt_dir.join(format!("{id}.seg")))?;
                Ok(EvalImage {
                    id: id.clone(),
                    features,
                    gt,
                })
            });
        match loaded {
            Ok(img) => images.push(img),
            Err(e) => {
                log::warn!("image {id}: {e:#}");
                failures.push(ImageFailure {
                    image: id,
                    error: format!("{e:#}"),
                    remote: false,
                });
            }
        }
    }
    if images.is_empty() {
        bail!("no loadable images in {}", features_dir.display());
    }
    Ok((images, failures))
}

/// Every annotated label string in the dataset, sorted.
fn dataset_classes(images: &[EvalImage]) -> Vec<String> {
    let set: BTreeSet<String> = images
        .iter()
        .flat_map(|img| img.gt.present().into_iter().map(|c| img.gt.labels[&c].clone()))
        .collect();
    set.into_iter().collect()
}

fn failure_code(failures: &[ImageFailure]) -> u8 {
    if failures.is_empty() {
        0
    } else if failures.iter().any(|f| f.remote) {
        4
    } else {
        3
    }
}

pub struct EvalRequest {
    pub data: DataPaths,
    pub cc: CcPaths,
    pub out_dir: Option<PathBuf>,
}

pub fn run_eval(req: EvalRequest, cfg: &RunConfig) -> Result<u8> {
    let (images, mut failures) = load_dataset(&req.data, cfg)?;
    let ctx = CcContext::load(&req.cc, cfg)?;
    let classes = dataset_classes(&images);
    let seg = segmenter(cfg);
    let mut report = match cfg.metric {
        Metric::IouSingle => {
            let source = ctx.source(&classes)?;
            let (results, more) = run_iou_single(&images, source.as_ref(), &ctx.embeddings, seg.as_ref());
            failures.extend(more);
            MetricsReport::iou_single(results, failures, cfg.aggregation)?
        }
        Metric::Miou => {
            let gen = ctx.generator(&classes)?;
            let sets = per_query_sets(gen.as_ref(), &classes, &cfg.background_label)?;
            let ccs = merged_ccs(&ctx, &classes, &sets, cfg.beta, cfg)?;
            let (totals, more) = run_classic(&images, &classes, &ccs, &cfg.background_label, &ctx.embeddings, seg.as_ref());
            failures.extend(more);
            let mut r = MetricsReport::classic(totals, failures)?;
            r.meta.insert("beta".into(), json!(cfg.beta));
            r.meta.insert("contrastive_concepts".into(), json!(ccs));
            r
        }
    };
    ctx.meta(&mut report.meta);
    report.meta.insert("images".into(), json!(images.len()));
    report.meta.insert("upsample".into(), json!(cfg.upsample));
    report.meta.insert("sigmoid_threshold".into(), json!(cfg.sigmoid_threshold));
    report.meta.insert(
        "aggregation_note".into(),
        json!("image-mean averages per-image means; class-accumulate sums intersections and unions per class first"),
    );
    let dir = output_path(&req.out_dir, cfg, "")?;
    write_artifact(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_artifact(&dir.join("report.tsv"), report.to_tsv().as_bytes())?;
    println!("{} {:.6}", report.metric, report.value);
    let code = failure_code(&report.failures);
    if code != 0 {
        log::error!("{} images failed", report.failures.len());
    }
    Ok(code)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepMode {
    /// IoU-single of the sigmoid baseline over thresholds.
    Sigmoid,
    /// IoU-single with dictionary concepts over a gamma x delta grid.
    GammaDelta,
    /// Classic mIoU over beta values.
    Beta,
}

pub struct SweepRequest {
    pub mode: SweepMode,
    pub data: DataPaths,
    pub cc: CcPaths,
    pub dict: DictPaths,
    pub steps: usize,
    pub gammas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub betas: Vec<f64>,
    pub out_dir: Option<PathBuf>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

pub fn run_sweep(req: SweepRequest, cfg: &RunConfig) -> Result<u8> {
    let (images, failures) = load_dataset(&req.data, cfg)?;
    let mut tsv = String::new();
    let mut rows = Vec::new();
    match req.mode {
        SweepMode::Sigmoid => {
            let emb_path = need(&req.cc.embeddings, &cfg.paths.embeddings, "embeddings")?;
            let embeddings = EmbeddingTable::load(&emb_path)?;
            let (lo, hi) = sigmoid_score_range(&images, &embeddings)?;
            tsv.push_str("threshold\timage_mean\tclass_accumulate\n");
            for p in sigmoid_sweep(&images, &embeddings, &sweep_thresholds(lo, hi, req.steps)) {
                tsv.push_str(&format!(
                    "{:.6}\t{}\t{}\n",
                    p.threshold,
                    fmt_opt(p.image_mean),
                    fmt_opt(p.class_accumulate)
                ));
                rows.push(serde_json::to_value(&p)?);
            }
        }
        SweepMode::GammaDelta => {
            let inputs = load_dict_inputs(&req.dict, cfg)?;
            let client = llm_client(cfg);
            let llm_oracle;
            let oracle: &dyn VisibilityOracle = match &client {
                Some(c) => {
                    llm_oracle =
                        LlmVisibility::new(c, PromptTemplate::builtin(PromptKind::Visibility, cfg.prompt_markers));
                    &llm_oracle
                }
                None => &Offline,
            };
            tsv.push_str("gamma\tdelta\timage_mean\tclass_accumulate\n");
            for &gamma in &req.gammas {
                for &delta in &req.deltas {
                    let config = DictionaryConfig {
                        gamma,
                        filter: filter_config(&req.dict.stopwords, cfg, delta)?,
                        max_candidates: cfg.max_candidates,
                    };
                    let dict = build_dictionary(
                        &inputs.lexicon,
                        &inputs.freq,
                        &inputs.embeddings,
                        &inputs.table,
                        oracle,
                        &config,
                        &inputs.provenance,
                        cfg.workers(),
                    )?;
                    let index = DictionaryIndex::new(&dict, &inputs.embeddings)?;
                    let source = Memoized::new(CcGenerator::Dictionary {
                        index,
                        provider: &inputs.embeddings,
                    });
                    let seg = segmenter(cfg);
                    let (results, _) = run_iou_single(&images, &source, &inputs.embeddings, seg.as_ref());
                    let agg = iou_single_dataset(&results).ok();
                    let (im, ca) = (agg.as_ref().map(|a| a.image_mean), agg.as_ref().map(|a| a.class_accumulate));
                    tsv.push_str(&format!("{gamma}\t{delta}\t{}\t{}\n", fmt_opt(im), fmt_opt(ca)));
                    rows.push(json!({ "gamma": gamma, "delta": delta, "image_mean": im, "class_accumulate": ca }));
                }
            }
        }
        SweepMode::Beta => {
            let ctx = CcContext::load(&req.cc, cfg)?;
            let classes = dataset_classes(&images);
            let gen = ctx.generator(&classes)?;
            let sets = per_query_sets(gen.as_ref(), &classes, &cfg.background_label)?;
            let seg = segmenter(cfg);
            tsv.push_str("beta\tmiou\n");
            for &beta in &req.betas {
                let ccs = merged_ccs(&ctx, &classes, &sets, beta, cfg)?;
                let (totals, _) = run_classic(&images, &classes, &ccs, &cfg.background_label, &ctx.embeddings, seg.as_ref());
                let value = miou(&totals).ok();
                tsv.push_str(&format!("{beta}\t{}\n", fmt_opt(value)));
                rows.push(json!({ "beta": beta, "miou": value, "contrastive_concepts": ccs.len() }));
            }
        }
    }
    let dir = output_path(&req.out_dir, cfg, "")?;
    let doc = json!({ "mode": clap::ValueEnum::to_possible_value(&req.mode).map(|v| v.get_name().to_string()), "points": rows, "load_failures": failures });
    let mut json_text = serde_json::to_string_pretty(&doc)?;
    json_text.push('\n');
    write_artifact(&dir.join("sweep.json"), json_text.as_bytes())?;
    write_artifact(&dir.join("sweep.tsv"), tsv.as_bytes())?;
    print!("{tsv}");
    Ok(failure_code(&failures))
}
