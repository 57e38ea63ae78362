//! `ccmine`: mine co-occurrences, build contrastive-concept dictionaries,
//! segment precomputed features and score them.
//!
//! Exit codes: 0 success, 2 I/O failure, 3 invalid input or configuration,
//! 4 completion-service failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use ccmine::ccgen::{BetaScope, CcError};
use ccmine::llm::LlmError;
use ccmine::metrics::{Aggregation, MetricsError};
use ccmine::segment::Upsample;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use commands::{
    BuildCcRequest, CcPaths, DataPaths, DictPaths, EvalRequest, GenCcRequest, MineRequest, SegmentRequest, SweepMode,
    SweepRequest,
};
use config::{CcMode, Metric, RunConfig};

const EXIT_IO: u8 = 2;
const EXIT_INVALID: u8 = 3;
const EXIT_REMOTE: u8 = 4;

#[derive(Parser)]
#[command(name = "ccmine", version, about = "Test-time contrastive concepts for open-world segmentation")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "CCMINE_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Count concept occurrences and co-occurrences in a caption corpus.
    Mine(MineArgs),
    /// Build the contrastive-concept dictionary from mined counts.
    BuildCc(BuildCcArgs),
    /// Print contrastive concepts for queries.
    GenCc(GenCcArgs),
    /// Segment one feature map.
    Segment(SegmentArgs),
    /// Score a dataset with IoU-single or classic mIoU.
    Eval(EvalArgs),
    /// Evaluate over a grid of thresholds.
    Sweep(SweepArgs),
}

/// Parses a value through its serde name, e.g. `class-accumulate`.
fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    cooc_out: Option<PathBuf>,
    #[arg(long)]
    counts_out: Option<PathBuf>,
    #[arg(long)]
    shard_lines: Option<usize>,
    /// Match plural caption tokens against singular concepts.
    #[arg(long)]
    fold_plurals: bool,
}

#[derive(Args)]
struct DictArgs {
    #[arg(long)]
    cooc: Option<PathBuf>,
    #[arg(long)]
    counts: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Cached visibility answers (JSON lines).
    #[arg(long)]
    visibility: Option<PathBuf>,
    /// One stop-word per line, replacing the defaults.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_candidates: Option<usize>,
}

impl DictArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if self.max_candidates.is_some() {
            cfg.max_candidates = self.max_candidates;
        }
    }

    fn paths(&self) -> DictPaths {
        DictPaths {
            cooc: self.cooc.clone(),
            counts: self.counts.clone(),
            embeddings: self.embeddings.clone(),
            visibility: self.visibility.clone(),
            stopwords: self.stopwords.clone(),
        }
    }
}

#[derive(Args)]
struct LlmArgs {
    #[arg(long)]
    llm_endpoint: Option<String>,
    #[arg(long)]
    llm_model: Option<String>,
    /// Send prompts without instruction markers.
    #[arg(long)]
    plain_prompts: bool,
}

impl LlmArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(e) = &self.llm_endpoint {
            cfg.llm.endpoint = e.clone();
        }
        if let Some(m) = &self.llm_model {
            cfg.llm.model = m.clone();
        }
        if self.plain_prompts {
            cfg.prompt_markers = false;
        }
    }
}

#[derive(Args)]
struct BuildCcArgs {
    #[command(flatten)]
    dict: DictArgs,
    #[command(flatten)]
    llm: LlmArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the visibility table, including new answers, here.
    #[arg(long)]
    visibility_out: Option<PathBuf>,
    /// Build timestamp recorded in the dictionary; also read from
    /// SOURCE_DATE_EPOCH. Omitted by default so rebuilds are byte-identical.
    #[arg(long)]
    built_at: Option<String>,
}

#[derive(Args)]
struct CcArgs {
    #[arg(long, value_enum)]
    cc_mode: Option<CcMode>,
    #[arg(long)]
    cc_dictionary: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Class list for the privileged mode (comma separated).
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_parser = kebab::<BetaScope>)]
    beta_scope: Option<BetaScope>,
    #[arg(long)]
    background_label: Option<String>,
    #[command(flatten)]
    llm: LlmArgs,
}

impl CcArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.cc_mode {
            cfg.cc_mode = m;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.beta_scope {
            cfg.beta_scope = v;
        }
        if let Some(b) = &self.background_label {
            cfg.background_label = b.clone();
        }
        self.llm.apply(cfg);
    }

    fn paths(&self) -> CcPaths {
        CcPaths {
            cc_dictionary: self.cc_dictionary.clone(),
            embeddings: self.embeddings.clone(),
            classes: self.classes.clone(),
        }
    }
}

#[derive(Args)]
struct SegmenterArgs {
    /// Use the sigmoid-threshold baseline instead of argmax.
    #[arg(long)]
    sigmoid_threshold: Option<f64>,
    #[arg(long, value_parser = kebab::<Upsample>)]
    upsample: Option<Upsample>,
}

impl SegmenterArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if self.sigmoid_threshold.is_some() {
            cfg.sigmoid_threshold = self.sigmoid_threshold;
        }
        if let Some(u) = self.upsample {
            cfg.upsample = u;
        }
    }
}

#[derive(Args)]
struct GenCcArgs {
    #[arg(long = "query", required = true)]
    queries: Vec<String>,
    #[command(flatten)]
    cc: CcArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long = "query", required = true)]
    queries: Vec<String>,
    #[command(flatten)]
    cc: CcArgs,
    #[command(flatten)]
    seg: SegmenterArgs,
    /// Output height in pixels; defaults to the patch grid.
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    features_dir: Option<PathBuf>,
    #[arg(long)]
    gt_dir: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> DataPaths {
        DataPaths {
            features_dir: self.features_dir.clone(),
            gt_dir: self.gt_dir.clone(),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cc: CcArgs,
    #[command(flatten)]
    seg: SegmenterArgs,
    #[arg(long, value_enum)]
    metric: Option<Metric>,
    #[arg(long, value_parser = kebab::<Aggregation>)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    mode: SweepMode,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cc: CcArgs,
    #[arg(long)]
    cooc: Option<PathBuf>,
    #[arg(long)]
    counts: Option<PathBuf>,
    #[arg(long)]
    visibility: Option<PathBuf>,
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Number of sigmoid thresholds.
    #[arg(long, default_value_t = 30)]
    steps: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.001, 0.005, 0.01, 0.015, 0.02])]
    gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.95, 0.9, 0.85, 0.8, 0.75])]
    deltas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.95, 0.9, 0.85, 0.8])]
    betas: Vec<f64>,
    #[arg(long, value_parser = kebab::<Upsample>)]
    upsample: Option<Upsample>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    let set_out = |cfg: &mut RunConfig, dir: &Option<PathBuf>| {
        if dir.is_some() {
            cfg.paths.output_dir = dir.clone();
        }
    };
    let code = match cli.command {
        Command::Mine(a) => {
            if let Some(n) = a.shard_lines {
                cfg.shard_lines = n;
            }
            cfg.fold_plurals |= a.fold_plurals;
            set_out(&mut cfg, &a.out_dir);
            cfg.validate()?;
            commands::run_mine(
                MineRequest {
                    corpus: a.corpus,
                    lexicon: a.lexicon,
                    cooc_out: a.cooc_out,
                    counts_out: a.counts_out,
                },
                &cfg,
            )?
        }
        Command::BuildCc(a) => {
            a.dict.apply(&mut cfg);
            a.llm.apply(&mut cfg);
            if a.built_at.is_some() {
                cfg.built_at = a.built_at.clone();
            }
            cfg.validate()?;
            commands::run_build_cc(
                BuildCcRequest {
                    paths: a.dict.paths(),
                    out: a.out,
                    visibility_out: a.visibility_out,
                },
                &cfg,
            )?
        }
        Command::GenCc(a) => {
            a.cc.apply(&mut cfg);
            cfg.validate()?;
            commands::run_gen_cc(
                GenCcRequest {
                    queries: a.queries,
                    cc: a.cc.paths(),
                    out: a.out,
                },
                &cfg,
            )?
        }
        Command::Segment(a) => {
            a.cc.apply(&mut cfg);
            a.seg.apply(&mut cfg);
            cfg.validate()?;
            commands::run_segment(
                SegmentRequest {
                    features: a.features,
                    queries: a.queries,
                    cc: a.cc.paths(),
                    height: a.height,
                    width: a.width,
                    out: a.out,
                },
                &cfg,
            )?
        }
        Command::Eval(a) => {
            a.cc.apply(&mut cfg);
            a.seg.apply(&mut cfg);
            if let Some(m) = a.metric {
                cfg.metric = m;
            }
            if let Some(agg) = a.aggregation {
                cfg.aggregation = agg;
            }
            set_out(&mut cfg, &a.out_dir);
            cfg.validate()?;
            commands::run_eval(
                EvalRequest {
                    data: a.data.paths(),
                    cc: a.cc.paths(),
                    out_dir: None,
                },
                &cfg,
            )?
        }
        Command::Sweep(a) => {
            a.cc.apply(&mut cfg);
            if let Some(u) = a.upsample {
                cfg.upsample = u;
            }
            set_out(&mut cfg, &a.out_dir);
            cfg.validate()?;
            if a.steps == 0 {
                anyhow::bail!("--steps must be positive");
            }
            commands::run_sweep(
                SweepRequest {
                    mode: a.mode,
                    data: a.data.paths(),
                    dict: DictPaths {
                        cooc: a.cooc,
                        counts: a.counts,
                        embeddings: a.cc.embeddings.clone(),
                        visibility: a.visibility,
                        stopwords: a.stopwords,
                    },
                    cc: a.cc.paths(),
                    steps: a.steps,
                    gammas: a.gammas,
                    deltas: a.deltas,
                    betas: a.betas,
                    out_dir: None,
                },
                &cfg,
            )?
        }
    };
    Ok(code)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
        let remote = cause.downcast_ref::<LlmError>().is_some_and(LlmError::is_remote)
            || cause.downcast_ref::<CcError>().is_some_and(CcError::is_remote)
            || cause.downcast_ref::<MetricsError>().is_some_and(MetricsError::is_remote);
        if remote {
            return EXIT_REMOTE;
        }
    }
    EXIT_INVALID
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID } else { 0 });
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(EXIT_INVALID);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
