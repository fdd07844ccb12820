//! Command-line entry point.
//!
//! A `--config FILE` of `key=value` lines supplies defaults for long flags of
//! the chosen subcommand; flags on the command line win. Exit codes: 0 on
//! success, 1 on pipeline errors, 2 on usage errors (bad flags, missing
//! inputs).

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::curate::{curate, CurateOptions, LabelMap, DEFAULT_MAX_NON_ASCII_RATIO};
use crate::eval::{
    guide_self_prediction, read_jsonl, score_advanced_batch, score_elementary, score_guide, self_prediction,
    ExactMatch, GuideSample, PredictionLine, PredictionSet, ScoreSheet, TextSimilarity, TokenF1,
};
use crate::fixtures::gen_fixture;
use crate::gridding::{optimal_grid, GridConfig, TieBreak, DEFAULT_GRID_SIDE, DEFAULT_SIZE_LIMIT};
use crate::ingest::{ingest_source, IngestOptions, IngestReport, RawSourceKind, DEFAULT_OCR_THRESHOLD};
use crate::llm::{ClientBackend, HttpConfig, LlmClient, MockTable};
use crate::schema::{
    read_manifest, read_manifest_lenient, write_manifest, DatasetManifest, Platform, ScreenRecord, Stage,
    TaskSample, UnifiedLabel,
};
use crate::som::{encode_png, load_rgb, render_som, write_som, SomSidecar, SomStyle};
use crate::taskgen::{
    assign_advanced, gen_advanced_batch, gen_elementary, AdvancedJob, BalancePolicy, ElementaryOptions, PromptSet,
    TappabilityTable, DEFAULT_LISTING_CAP, DEFAULT_PER_TASK_CAP,
};

#[derive(Parser, Debug)]
#[command(name = "uiforge", version, about = "Multi-platform UI screenshot dataset and evaluation toolkit")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// File of `key=value` defaults for long flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic raw screens for one or more platforms.
    Fixtures(FixturesArgs),
    /// Convert raw annotation directories into a raw manifest.
    Ingest(IngestArgs),
    /// Clip, relabel and filter a raw manifest.
    Curate(CurateArgs),
    /// Print the tile grid chosen for an image size.
    Grid(GridArgs),
    /// Render set-of-mark images for the records of a manifest.
    RenderSom(RenderSomArgs),
    /// Generate the six elementary tasks from a curated manifest.
    GenElementary(GenElementaryArgs),
    /// Generate advanced tasks through a chat model.
    GenAdvanced(GenAdvancedArgs),
    /// Score predictions against gold samples.
    Evaluate(EvaluateArgs),
    /// Per-platform counts and resolution histograms.
    Stats(StatsArgs),
    /// Check manifests and list every issue.
    Validate(ValidateArgs),
    /// Write the reference answers of gold samples as predictions.
    SelfPredict(SelfPredictArgs),
}

#[derive(Args, Debug)]
pub struct FixturesArgs {
    /// Output root; one subdirectory per platform.
    #[arg(long)]
    pub out: PathBuf,
    /// Platforms to generate (default: all five).
    #[arg(long = "platform", value_parser = parse_platform)]
    pub platforms: Vec<Platform>,
    #[arg(long, default_value_t = 3)]
    pub count: usize,
    /// Inject out-of-bound boxes and non-ASCII screens.
    #[arg(long)]
    pub adversarial: bool,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Source directories. Without --kind, each directory must be named
    /// after its platform.
    #[arg(required = true)]
    pub roots: Vec<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<RawSourceKind>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_OCR_THRESHOLD)]
    pub ocr_threshold: f64,
}

#[derive(Args, Debug)]
pub struct CurateArgs {
    pub input: PathBuf,
    /// Label map file or directory of `.tsv` maps (default: built-in maps).
    #[arg(long)]
    pub labelmap: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_NON_ASCII_RATIO)]
    pub max_non_ascii: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TieBreakArg {
    Aspect,
    Scan,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    #[arg(long, default_value_t = DEFAULT_SIZE_LIMIT)]
    pub limit: u32,
    #[arg(long, default_value_t = DEFAULT_GRID_SIDE)]
    pub side: u32,
    #[arg(long, value_enum, default_value_t = TieBreakArg::Aspect)]
    pub tie_break: TieBreakArg,
}

#[derive(Args, Debug)]
pub struct RenderSomArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Only these record ids.
    #[arg(long = "id")]
    pub ids: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GenElementaryArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per referring/grounding task per screen.
    #[arg(long, default_value_t = DEFAULT_PER_TASK_CAP)]
    pub cap: usize,
    #[arg(long, default_value_t = DEFAULT_LISTING_CAP)]
    pub listing_cap: usize,
    /// Comma-separated labels answered "not tappable" (replaces the default set).
    #[arg(long)]
    pub not_tappable: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Mock,
    Replay,
    Http,
}

#[derive(Args, Debug)]
pub struct ClientArgs {
    #[arg(long, value_enum, default_value_t = BackendArg::Mock)]
    pub backend: BackendArg,
    /// JSON file `{"responses": {hash: text}, "fallback": text?}`.
    #[arg(long)]
    pub mock_table: Option<PathBuf>,
    /// Answer for any request missing from the mock table.
    #[arg(long)]
    pub mock_fallback: Option<String>,
    /// Replay directory; for http, responses are recorded here.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, default_value = "https://api.openai.com/v1/chat/completions")]
    pub endpoint: String,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
}

#[derive(Args, Debug)]
pub struct GenAdvancedArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Overrides of advanced tasks per record, e.g. `Web=2,iPhone=3`.
    #[arg(long)]
    pub balance: Option<String>,
    #[command(flatten)]
    pub client: ClientArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Elementary,
    Advanced,
    All,
    Guide,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SimilarityArg {
    Exact,
    TokenF1,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub task: EvalTask,
    /// Gold manifests (or a GUIDE JSONL file for --task guide).
    #[arg(long, required = true)]
    pub gold: Vec<PathBuf>,
    /// Predictions JSONL, `{"id": .., "answer": ..}` per line.
    #[arg(long)]
    pub pred: PathBuf,
    /// Curated manifest with the screens, for advanced scoring.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SimilarityArg::TokenF1)]
    pub similarity: SimilarityArg,
    #[command(flatten)]
    pub client: ClientArgs,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelfPredictArgs {
    #[arg(required = true)]
    pub gold: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Gold files are GUIDE JSONL instead of manifests.
    #[arg(long)]
    pub guide: bool,
}

fn parse_platform(s: &str) -> Result<Platform, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_kind(s: &str) -> Result<RawSourceKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

/// Error that maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(usage(format!("input {} does not exist", p.display())))
    }
}

/// Reads `key=value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        let k = k.trim();
        if k.is_empty() || k.starts_with('-') {
            return Err(format!("config line {}: bad key {k:?}", i + 1));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Inserts config-derived flags right after the subcommand token so that
/// later command-line occurrences override them.
fn merge_config(args: Vec<OsString>, pairs: &[(String, String)]) -> Vec<OsString> {
    let names: Vec<String> = Cli::command_names();
    let Some(pos) = args.iter().skip(1).position(|a| names.iter().any(|n| a == n.as_str())) else {
        return args;
    };
    let at = pos + 2;
    let mut injected = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => injected.push(OsString::from(format!("--{k}"))),
            "false" => {}
            _ => injected.push(OsString::from(format!("--{k}={v}"))),
        }
    }
    let mut out = args[..at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[at..]);
    out
}

impl Cli {
    fn command_names() -> Vec<String> {
        use clap::CommandFactory;
        Cli::command().get_subcommands().map(|c| c.get_name().to_string()).collect()
    }
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("UIFORGE_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let mut args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    if let Some(path) = config_path(&args) {
        let pairs = match fs::read_to_string(&path).map_err(|e| e.to_string()).and_then(|t| parse_config(&t)) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("error: config {}: {e}", path.display());
                return 2;
            }
        };
        args = merge_config(args, &pairs);
    }
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fixtures(a) => cmd_fixtures(a, cli.seed),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Curate(a) => cmd_curate(a),
        Command::Grid(a) => cmd_grid(a),
        Command::RenderSom(a) => cmd_render_som(a),
        Command::GenElementary(a) => cmd_gen_elementary(a, cli.seed),
        Command::GenAdvanced(a) => cmd_gen_advanced(a, cli.seed),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Validate(a) => cmd_validate(a),
        Command::SelfPredict(a) => cmd_self_predict(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_records(path: &Path) -> Result<(Stage, Vec<ScreenRecord>)> {
    require_exists(path)?;
    let m = read_manifest(path)?;
    Ok((m.header.stage, m.into_records()))
}

fn read_samples(paths: &[PathBuf]) -> Result<Vec<TaskSample>> {
    let mut out = Vec::new();
    for p in paths {
        require_exists(p)?;
        out.extend(read_manifest(p)?.into_samples());
    }
    Ok(out)
}

fn cmd_fixtures(a: &FixturesArgs, seed: u64) -> Result<()> {
    let platforms = if a.platforms.is_empty() { Platform::ALL.to_vec() } else { a.platforms.clone() };
    for p in platforms {
        let dir = a.out.join(p.as_str());
        let s = gen_fixture(p, a.count, seed, a.adversarial, &dir).with_context(|| format!("writing {}", dir.display()))?;
        tracing::info!(platform = %p, screens = s.screens.len(), dir = %dir.display(), "fixtures written");
    }
    Ok(())
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let opts = IngestOptions { ocr_threshold: a.ocr_threshold, ..IngestOptions::default() };
    let mut records = Vec::new();
    let mut reports: Vec<IngestReport> = Vec::new();
    for root in &a.roots {
        require_exists(root)?;
        let kind = match a.kind {
            Some(k) => k,
            None => {
                let name = root.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                let p: Platform = name.parse().map_err(|_| {
                    usage(format!("cannot infer the source kind of {}; pass --kind", root.display()))
                })?;
                RawSourceKind::for_platform(p)
            }
        };
        let out = ingest_source(kind, root, &opts)?;
        tracing::info!(root = %root.display(), records = out.records.len(), "ingested");
        records.extend(out.records);
        reports.push(out.report);
    }
    let ids: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    if ids.len() != records.len() {
        bail!("duplicate screen ids across sources; file stems must be unique");
    }
    write_manifest(&DatasetManifest::from_records(Stage::Raw, records), &a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &reports)?;
    }
    Ok(())
}

fn cmd_curate(a: &CurateArgs) -> Result<()> {
    let (_, records) = read_records(&a.input)?;
    let map = match &a.labelmap {
        Some(p) => {
            require_exists(p)?;
            LabelMap::load(p)?
        }
        None => LabelMap::defaults(),
    };
    let (out, report) = curate(records, &map, &CurateOptions { max_non_ascii_ratio: a.max_non_ascii })?;
    tracing::info!(screens_in = report.screens_in, screens_out = report.screens_out, "curated");
    write_manifest(&DatasetManifest::from_records(Stage::Curated, out), &a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_grid(a: &GridArgs) -> Result<()> {
    let tie_break = match a.tie_break {
        TieBreakArg::Aspect => TieBreak::AspectThenScan,
        TieBreakArg::Scan => TieBreak::ScanOrder,
    };
    let cfg = GridConfig::new(a.side, a.limit).map_err(|e| usage(e.to_string()))?.with_tie_break(tie_break);
    let plan = optimal_grid(a.width, a.height, &cfg).map_err(|e| usage(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&plan)?);
    Ok(())
}

fn cmd_render_som(a: &RenderSomArgs) -> Result<()> {
    let (_, records) = read_records(&a.input)?;
    let wanted: HashSet<&str> = a.ids.iter().map(String::as_str).collect();
    let chosen: Vec<&ScreenRecord> =
        records.iter().filter(|r| wanted.is_empty() || wanted.contains(r.id.as_str())).collect();
    if !wanted.is_empty() && chosen.len() != wanted.len() {
        return Err(usage("some --id values are not in the manifest"));
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let style = SomStyle::default();
    chosen.par_iter().try_for_each(|r| -> Result<()> {
        let img = load_rgb(Path::new(&r.image_path))?;
        let (raster, index) = render_som(r, &img, &style)?;
        write_som(&a.out_dir.join(format!("{}.som.png", r.id)), &raster, &SomSidecar::new(r, &index))?;
        Ok(())
    })
}

fn cmd_gen_elementary(a: &GenElementaryArgs, seed: u64) -> Result<()> {
    let (stage, records) = read_records(&a.input)?;
    if stage != Stage::Curated {
        return Err(usage("task generation needs a curated manifest"));
    }
    let tappability = match &a.not_tappable {
        Some(list) => {
            let labels = list
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<UnifiedLabel>().map_err(|e| usage(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            TappabilityTable::with_not_tappable(&labels)
        }
        None => TappabilityTable::default(),
    };
    let opts = ElementaryOptions { seed, per_task_cap: a.cap, listing_cap: a.listing_cap, tappability };
    let samples = gen_elementary(&records, &opts);
    tracing::info!(samples = samples.len(), "elementary tasks generated");
    write_manifest(&DatasetManifest::from_samples(BalancePolicy::default().loss_weight, samples), &a.out)?;
    Ok(())
}

fn build_client(c: &ClientArgs) -> Result<LlmClient> {
    let backend = match c.backend {
        BackendArg::Mock => {
            let mut table = match &c.mock_table {
                Some(p) => {
                    require_exists(p)?;
                    MockTable::load(p)?
                }
                None => MockTable::default(),
            };
            if let Some(f) = &c.mock_fallback {
                table.fallback = Some(f.clone());
            }
            ClientBackend::Mock(table)
        }
        BackendArg::Replay => {
            let dir = c.cache_dir.clone().ok_or_else(|| usage("--backend replay needs --cache-dir"))?;
            require_exists(&dir)?;
            ClientBackend::ReplayCache(dir)
        }
        BackendArg::Http => {
            let mut cfg = HttpConfig::from_env(c.endpoint.clone());
            cfg.cache_dir = c.cache_dir.clone();
            ClientBackend::HttpApi(cfg)
        }
    };
    Ok(LlmClient::with_transport(backend, Box::new(crate::llm::UreqTransport), c.max_in_flight)?)
}

fn cmd_gen_advanced(a: &GenAdvancedArgs, seed: u64) -> Result<()> {
    let (stage, records) = read_records(&a.input)?;
    if stage != Stage::Curated {
        return Err(usage("task generation needs a curated manifest"));
    }
    let mut policy = BalancePolicy::default();
    if let Some(b) = &a.balance {
        policy.apply_overrides(b).map_err(usage)?;
    }
    let client = build_client(&a.client)?;
    let assignments = assign_advanced(&records, &policy, seed);
    let style = SomStyle::default();
    let needed: Vec<usize> = {
        let mut v: Vec<usize> = assignments.iter().map(|(i, _)| *i).collect();
        v.dedup();
        v
    };
    let rendered: BTreeMap<usize, (Vec<u8>, Vec<u8>, crate::som::SomIndex)> = needed
        .par_iter()
        .map(|&i| -> Result<_> {
            let r = &records[i];
            let img = load_rgb(Path::new(&r.image_path))?;
            let (som, index) = render_som(r, &img, &style)?;
            Ok((i, (encode_png(&img), encode_png(&som), index)))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<AdvancedJob<'_>> = assignments
        .iter()
        .map(|&(i, kind)| {
            let (shot, som, index) = &rendered[&i];
            AdvancedJob {
                record: &records[i],
                kind,
                screenshot_png: shot.clone(),
                som_png: som.clone(),
                index: index.clone(),
            }
        })
        .collect();
    let (samples, report) = gen_advanced_batch(&jobs, &client, &PromptSet::default())?;
    for r in &report.rejected {
        tracing::warn!(screen = %r.screen_id, task = %r.task.as_str(), reason = %r.reason, "advanced sample rejected");
    }
    tracing::info!(generated = report.generated, rejected = report.rejected.len(), "advanced tasks generated");
    write_manifest(&DatasetManifest::from_samples(policy.loss_weight.clone(), samples), &a.out)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<PredictionSet> {
    require_exists(path)?;
    Ok(PredictionSet::from_lines(read_jsonl::<PredictionLine>(path)?))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let preds = read_predictions(&a.pred)?;
    let mut sheet = ScoreSheet::default();
    let known: HashSet<String>;
    if a.task == EvalTask::Guide {
        let mut gold = Vec::new();
        for g in &a.gold {
            require_exists(g)?;
            gold.extend(read_jsonl::<GuideSample>(g)?);
        }
        let sim: &dyn TextSimilarity = match a.similarity {
            SimilarityArg::Exact => &ExactMatch,
            SimilarityArg::TokenF1 => &TokenF1,
        };
        sheet.merge(score_guide(&gold, &preds, sim));
        known = gold.into_iter().map(|g| g.id).collect();
    } else {
        let samples = read_samples(&a.gold)?;
        if matches!(a.task, EvalTask::Elementary | EvalTask::All) {
            sheet.merge(score_elementary(&samples, &preds));
        }
        if matches!(a.task, EvalTask::Advanced | EvalTask::All) && samples.iter().any(|s| s.task.is_advanced()) {
            let path = a.records.as_ref().ok_or_else(|| usage("advanced scoring needs --records"))?;
            let (_, records) = read_records(path)?;
            let screens: BTreeMap<String, ScreenRecord> = records.into_iter().map(|r| (r.id.clone(), r)).collect();
            let client = build_client(&a.client)?;
            sheet.merge(score_advanced_batch(&samples, &preds, &screens, &client)?);
        }
        known = samples
            .into_iter()
            .filter(|s| match a.task {
                EvalTask::Elementary => !s.task.is_advanced(),
                EvalTask::Advanced => s.task.is_advanced(),
                _ => true,
            })
            .map(|s| s.id)
            .collect();
    }
    let known_refs: HashSet<&str> = known.iter().map(String::as_str).collect();
    sheet.unmatched_predictions = preds.unmatched(&known_refs);
    sheet.duplicate_predictions = preds.duplicates;
    let report = sheet.report();
    if let Some(p) = &a.out {
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
        fs::write(p.with_extension("txt"), &report.table)?;
    }
    print!("{}", report.table);
    Ok(())
}

#[derive(Default, Serialize)]
struct PlatformStats {
    records: u64,
    samples: u64,
    tasks: BTreeMap<String, u64>,
    resolutions: BTreeMap<String, u64>,
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let mut stats: BTreeMap<Platform, PlatformStats> = BTreeMap::new();
    for p in &a.inputs {
        require_exists(p)?;
        let m = read_manifest(p)?;
        for r in m.records() {
            let s = stats.entry(r.platform).or_default();
            s.records += 1;
            *s.resolutions.entry(format!("{}x{}", r.width, r.height)).or_default() += 1;
        }
        for x in m.samples() {
            let s = stats.entry(x.platform).or_default();
            s.samples += 1;
            *s.tasks.entry(x.task.as_str().to_string()).or_default() += 1;
        }
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
        return Ok(());
    }
    let mut out = String::new();
    let _ = writeln!(out, "{:<10}{:>10}{:>10}", "Platform", "Records", "Samples");
    for (p, s) in &stats {
        let _ = writeln!(out, "{:<10}{:>10}{:>10}", p.as_str(), s.records, s.samples);
    }
    for (p, s) in &stats {
        if !s.resolutions.is_empty() {
            let _ = writeln!(out, "\n{} resolutions", p.as_str());
            let mut rows: Vec<_> = s.resolutions.iter().collect();
            rows.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
            for (res, n) in rows {
                let _ = writeln!(out, "  {res:<12}{n:>8}");
            }
        }
        if !s.tasks.is_empty() {
            let _ = writeln!(out, "\n{} tasks", p.as_str());
            for (t, n) in &s.tasks {
                let _ = writeln!(out, "  {t:<26}{n:>8}");
            }
        }
    }
    print!("{out}");
    Ok(())
}

fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let mut bad = 0;
    for p in &a.inputs {
        require_exists(p)?;
        let parsed = read_manifest_lenient(p)?;
        for issue in &parsed.issues {
            println!("{}:{issue}", p.display());
        }
        bad += parsed.issues.len();
    }
    if bad > 0 {
        bail!("{bad} issue(s) found");
    }
    Ok(())
}

fn cmd_self_predict(a: &SelfPredictArgs) -> Result<()> {
    let lines: Vec<PredictionLine> = if a.guide {
        let mut v = Vec::new();
        for g in &a.gold {
            require_exists(g)?;
            v.extend(read_jsonl::<GuideSample>(g)?.iter().map(guide_self_prediction));
        }
        v
    } else {
        read_samples(&a.gold)?.iter().map(self_prediction).collect()
    };
    let mut text = String::new();
    for l in &lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn config_goes_under_flags() {
        let pairs = parse_config("# defaults\nlimit=4\nwidth = 100\n").unwrap();
        let args = merge_config(os(&["uiforge", "grid", "--width", "336", "--height", "336"]), &pairs);
        let cli = Cli::try_parse_from(&args).unwrap();
        let Command::Grid(g) = cli.command else { panic!() };
        assert_eq!((g.width, g.height, g.limit), (336, 336, 4));
    }

    #[test]
    fn config_errors() {
        assert!(parse_config("novalue").is_err());
        assert!(parse_config("--x=1").is_err());
        assert_eq!(config_path(&os(&["u", "grid", "--config=c.txt"])), Some(PathBuf::from("c.txt")));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["uiforge", "grid", "--bogus"]), 2);
        assert_eq!(run(["uiforge", "curate", "/nonexistent/in.jsonl", "--out", "/tmp/x.jsonl"]), 2);
        assert_eq!(run(["uiforge", "grid", "--width", "336", "--height", "336"]), 0);
    }
}
