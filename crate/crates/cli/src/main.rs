//! `gcgkit`: grounded-caption evaluation, annotation pipeline runs,
//! dataset conversion, fixture generation, and overlay rendering.
//!
//! Every command is a thin shell over a library call and prints a plain
//! summary (or JSON with `--json`); `--out PREFIX` additionally writes
//! `PREFIX.json` and `PREFIX.txt`. Exit codes are stable for scripting:
//! 0 success, 1 I/O or service failure, 2 schema or usage error,
//! 3 conversion gave up on at least one item.

mod render;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gcgkit_core::cider::{cider, IdfTable};
use gcgkit_core::meteor::meteor;
use gcgkit_core::metrics::{refseg_eval, DEFAULT_IOU_THRESH, DEFAULT_SIM_THRESH};
use gcgkit_core::{
    evaluate_gcg, parse_grounded, read_gcg_jsonl, write_gcg_jsonl, BinaryMask, EvalConfig,
    GcgRecord, LexicalSim, MetricSelection, ParseMode, RecordError, TextSimProvider,
};
use gcgkit_pipeline::{
    assemble_corpus, convert_flickr, convert_psg, convert_refcocog, read_manifest, run_all,
    ClientConfig, ClientTransport, Clients, ConversionOutcome, EmbeddingSim, FlickrItem,
    HttpTransport, ImageMeta, LevelConfig, MockTransport, PipelineError, PsgItem, RecordingTransport,
    RefCocogItem, Role, RunConfig, RunReport, SyntheticTransport,
};
use serde::de::DeserializeOwned;
use serde_json::json;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

const EXIT_IO: u8 = 1;
const EXIT_SCHEMA: u8 = 2;
const EXIT_EXHAUSTED: u8 = 3;

struct CliError {
    code: u8,
    message: String,
}

type CliResult<T> = Result<T, CliError>;

fn fail(code: u8, message: impl Into<String>) -> CliError {
    CliError { code, message: message.into() }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        fail(EXIT_IO, e.to_string())
    }
}

impl From<RecordError> for CliError {
    fn from(e: RecordError) -> Self {
        match e {
            RecordError::Io(io) => fail(EXIT_IO, io.to_string()),
            other => fail(EXIT_SCHEMA, other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Client(_) | PipelineError::Store(_) => fail(EXIT_IO, e.to_string()),
            _ => fail(EXIT_SCHEMA, e.to_string()),
        }
    }
}

fn parse_unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

#[derive(Parser)]
#[command(name = "gcgkit", version, about = "Grounded conversation generation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score grounded-caption predictions against ground truth.
    EvalGcg(EvalGcgArgs),
    /// Referring-segmentation cIoU/gIoU over (pred, gt) mask pairs.
    EvalRefseg(EvalRefsegArgs),
    /// Region captioning: METEOR and CIDEr over per-region captions.
    EvalRegioncap(EvalRegioncapArgs),
    /// Run or resume the annotation pipeline over an image manifest.
    Pipeline {
        #[command(subcommand)]
        action: PipelineAction,
    },
    /// Convert grounded datasets into evaluation-ready records.
    Convert {
        #[command(subcommand)]
        dataset: ConvertDataset,
    },
    /// Render mask overlays (PPM) with per-phrase legends.
    Render(RenderArgs),
    /// Generate a synthetic manifest, recorded fixtures, and corpora.
    Fixtures(FixturesArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TextSimKind {
    Lexical,
    Embedding,
}

#[derive(Args)]
struct EvalGcgArgs {
    /// Ground-truth records (JSONL).
    #[arg(long)]
    gt: PathBuf,
    /// Prediction records (JSONL).
    #[arg(long)]
    pred: PathBuf,
    /// Comma list: meteor,cider,ap50,miou,recall or "all".
    #[arg(long, default_value = "all")]
    metrics: String,
    /// Phrase similarity backend for recall matching.
    #[arg(long, value_enum, default_value_t = TextSimKind::Lexical)]
    text_sim: TextSimKind,
    /// Embedder endpoint for --text-sim embedding.
    #[arg(long)]
    embed_endpoint: Option<String>,
    #[arg(long, value_parser = parse_unit_interval, default_value_t = DEFAULT_IOU_THRESH)]
    iou_thresh: f64,
    #[arg(long, value_parser = parse_unit_interval, default_value_t = DEFAULT_SIM_THRESH)]
    sim_thresh: f64,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    /// Write PREFIX.json and PREFIX.txt reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print JSON instead of the text table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalRefsegArgs {
    /// JSONL of {"pred": mask, "gt": mask} pairs.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalRegioncapArgs {
    /// Ground truth JSONL {"id", "caption"}; repeat ids for multiple references.
    #[arg(long)]
    gt: PathBuf,
    /// Predictions JSONL {"id", "caption"}, one line per region.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClientKind {
    /// Deterministic in-process world keyed by --seed.
    Synthetic,
    /// Replay recorded fixtures from --fixtures.
    Mock,
    /// Live services from GCGKIT_{ROLE}_ENDPOINT variables.
    Http,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long, value_enum, default_value_t = ClientKind::Synthetic)]
    clients: ClientKind,
    /// Fixture directory (required for --clients mock).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// World seed for --clients synthetic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record every service response into this directory.
    #[arg(long)]
    record_fixtures: Option<PathBuf>,
}

impl ClientArgs {
    fn build(&self) -> CliResult<Clients> {
        let base: Arc<dyn ClientTransport> = match self.clients {
            ClientKind::Synthetic => Arc::new(SyntheticTransport::new(self.seed)),
            ClientKind::Mock => {
                let root = self.fixtures.as_ref().ok_or_else(|| {
                    fail(EXIT_SCHEMA, "--clients mock requires --fixtures DIR")
                })?;
                if !root.is_dir() {
                    return Err(fail(
                        EXIT_IO,
                        format!("fixture directory {} does not exist", root.display()),
                    ));
                }
                Arc::new(MockTransport::new(root))
            }
            ClientKind::Http => Arc::new(HttpTransport::from_env()),
        };
        let transport: Arc<dyn ClientTransport> = match &self.record_fixtures {
            Some(dir) => Arc::new(RecordingTransport::new(base, dir)),
            None => base,
        };
        Ok(Clients::with_default_models(transport))
    }
}

#[derive(Subcommand)]
enum PipelineAction {
    /// Run levels 1..=max-level; completed work in the store is reused.
    Run(PipelineArgs),
    /// Alias of run that insists the checkpoint store already exists.
    Resume(PipelineArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Image manifest (JSONL of image_id/path/width/height).
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint store directory.
    #[arg(long)]
    store: PathBuf,
    #[command(flatten)]
    clients: ClientArgs,
    #[arg(long, default_value_t = 4)]
    max_level: u8,
    /// Worker threads; the corpus is byte-identical for any value.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = parse_unit_interval, default_value_t = 0.5)]
    tau_nms: f64,
    #[arg(long, value_parser = parse_unit_interval, default_value_t = 0.5)]
    tau_match: f64,
    #[arg(long, value_parser = parse_unit_interval, default_value_t = 0.5)]
    tau_ground: f64,
    #[arg(long, default_value_t = 2)]
    max_caption_retries: u32,
    /// Assemble the finished records into this JSONL file.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum ConvertDataset {
    /// Referring expressions with masks; captions come from the text model.
    Refcocog(ConvertLlmArgs),
    /// Scene-graph triplets with masks; captions come from the text model.
    Psg(ConvertLlmArgs),
    /// Captions with phrase offsets and boxes; no text model involved.
    Flickr(ConvertFlickrArgs),
}

#[derive(Args)]
struct ConvertLlmArgs {
    /// Input items (JSONL).
    #[arg(long)]
    input: PathBuf,
    /// Output records (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Write rejected items here (JSONL of image_id/reason).
    #[arg(long)]
    rejects: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    max_retries: u32,
    #[command(flatten)]
    clients: ClientArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ConvertFlickrArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    rejects: Option<PathBuf>,
    /// Use a segmentation service for box→mask (omit for none).
    #[arg(long, value_enum)]
    segmenter: Option<ClientKind>,
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rasterize boxes directly when no segmenter is configured.
    #[arg(long)]
    box_fallback: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Records to render (JSONL).
    #[arg(long)]
    records: PathBuf,
    /// Output directory for PPM overlays and legend files.
    #[arg(long)]
    out: PathBuf,
    /// Directory of source images named {image_id}.ppm; a flat canvas is
    /// used for records without one.
    #[arg(long)]
    image_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FixturesArgs {
    /// Output directory (manifest, fixtures/, store/, corpora).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    images: usize,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::EvalGcg(args) => cmd_eval_gcg(&args),
        Command::EvalRefseg(args) => cmd_eval_refseg(&args),
        Command::EvalRegioncap(args) => cmd_eval_regioncap(&args),
        Command::Pipeline { action } => cmd_pipeline(&action),
        Command::Convert { dataset } => cmd_convert(&dataset),
        Command::Render(args) => cmd_render(&args),
        Command::Fixtures(args) => cmd_fixtures(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn open_reader(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))
}

/// Prints the plain or JSON form and, with a prefix, writes both files.
fn emit(
    out: Option<&PathBuf>,
    report_json: &serde_json::Value,
    report_text: &str,
    print_json: bool,
) -> CliResult<()> {
    let pretty = serde_json::to_string_pretty(report_json)
        .map_err(|e| fail(EXIT_IO, e.to_string()))?;
    if print_json {
        println!("{pretty}");
    } else {
        print!("{report_text}");
    }
    if let Some(prefix) = out {
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut json_path = prefix.as_os_str().to_owned();
        json_path.push(".json");
        let mut text_path = prefix.as_os_str().to_owned();
        text_path.push(".txt");
        fs::write(PathBuf::from(json_path), format!("{pretty}\n"))?;
        fs::write(PathBuf::from(text_path), report_text)?;
    }
    Ok(())
}

fn cmd_eval_gcg(args: &EvalGcgArgs) -> CliResult<()> {
    let gt = read_gcg_jsonl(open_reader(&args.gt)?)?;
    let pred = read_gcg_jsonl(open_reader(&args.pred)?)?;
    let metrics = MetricSelection::from_list(&args.metrics).map_err(|e| fail(EXIT_SCHEMA, e))?;
    let cfg = EvalConfig {
        iou_thresh: args.iou_thresh,
        sim_thresh: args.sim_thresh,
        workers: args.workers,
        metrics,
    };
    let provider: Box<dyn TextSimProvider> = match args.text_sim {
        TextSimKind::Lexical => Box::new(LexicalSim),
        TextSimKind::Embedding => {
            let endpoint = args.embed_endpoint.as_ref().ok_or_else(|| {
                fail(EXIT_SCHEMA, "--text-sim embedding requires --embed-endpoint URL")
            })?;
            let mut configs = BTreeMap::new();
            configs.insert(Role::Embedder, ClientConfig::new(endpoint.clone()));
            let transport: Arc<dyn ClientTransport> = Arc::new(HttpTransport::new(configs));
            Box::new(EmbeddingSim::new(Clients::with_default_models(transport)))
        }
    };
    let report = evaluate_gcg(&gt, &pred, provider.as_ref(), &cfg)
        .map_err(|e| fail(EXIT_SCHEMA, e.to_string()))?;
    let report_json = serde_json::to_value(&report).map_err(|e| fail(EXIT_IO, e.to_string()))?;
    emit(args.out.as_ref(), &report_json, &report.to_text_table(), args.json)
}

#[derive(serde::Deserialize)]
struct MaskPairLine {
    pred: BinaryMask,
    gt: BinaryMask,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let reader = open_reader(path)?;
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| {
            fail(EXIT_SCHEMA, format!("{}: line {}: {e}", path.display(), idx + 1))
        })?;
        items.push(item);
    }
    Ok(items)
}

fn cmd_eval_refseg(args: &EvalRefsegArgs) -> CliResult<()> {
    let pairs: Vec<MaskPairLine> = read_jsonl(&args.pairs)?;
    let pairs: Vec<(BinaryMask, BinaryMask)> =
        pairs.into_iter().map(|p| (p.pred, p.gt)).collect();
    let report = refseg_eval(&pairs).map_err(|e| fail(EXIT_SCHEMA, e.to_string()))?;
    let report_json = json!({
        "n_pairs": report.n_pairs,
        "ciou": report.ciou,
        "giou": report.giou,
    });
    let text = format!(
        "{:<10} {}\n{:<10} {:.4}\n{:<10} {:.4}\n",
        "pairs", report.n_pairs, "cIoU", report.ciou, "gIoU", report.giou
    );
    emit(args.out.as_ref(), &report_json, &text, args.json)
}

#[derive(serde::Deserialize)]
struct CaptionLine {
    id: String,
    caption: String,
}

fn cmd_eval_regioncap(args: &EvalRegioncapArgs) -> CliResult<()> {
    let gt: Vec<CaptionLine> = read_jsonl(&args.gt)?;
    let pred: Vec<CaptionLine> = read_jsonl(&args.pred)?;
    let mut references: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for line in gt {
        references.entry(line.id).or_default().push(line.caption);
    }
    let mut candidates: BTreeMap<String, String> = BTreeMap::new();
    for line in pred {
        if !references.contains_key(&line.id) {
            return Err(fail(EXIT_SCHEMA, format!("prediction for unknown region {:?}", line.id)));
        }
        if candidates.insert(line.id.clone(), line.caption).is_some() {
            return Err(fail(EXIT_SCHEMA, format!("duplicate prediction for region {:?}", line.id)));
        }
    }
    // Region order is fixed by the sorted map, so scores are stable.
    let mut cands = Vec::with_capacity(references.len());
    let mut refs = Vec::with_capacity(references.len());
    let mut meteor_sum = 0.0;
    let mut missing = 0usize;
    for (id, rs) in &references {
        let cand = candidates.get(id).cloned().unwrap_or_else(|| {
            missing += 1;
            String::new()
        });
        meteor_sum += meteor(&cand, rs);
        cands.push(cand);
        refs.push(rs.clone());
    }
    let idf = IdfTable::build(&refs);
    let cider_scores = cider(&cands, &refs, &idf);
    let n = references.len();
    let meteor_mean = if n == 0 { 0.0 } else { meteor_sum / n as f64 };
    let report_json = json!({
        "n_regions": n,
        "missing_predictions": missing,
        "meteor": meteor_mean,
        "cider": cider_scores.mean,
    });
    let text = format!(
        "{:<10} {n}\n{:<10} {missing}\n{:<10} {meteor_mean:.4}\n{:<10} {:.4}\n",
        "regions", "missing", "METEOR", "CIDEr", cider_scores.mean
    );
    emit(args.out.as_ref(), &report_json, &text, args.json)
}

fn run_report_text(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {}", "images", report.images);
    for level in &report.per_level {
        let _ = writeln!(
            out,
            "level {}    completed {:<4} skipped {:<4} failed {}",
            level.level, level.completed, level.skipped, level.failed
        );
    }
    for f in &report.failures {
        let _ = writeln!(out, "failed     {} (level {}): {}", f.image_id, f.level, f.error);
    }
    let _ = writeln!(out, "{:<10} {}", "finished", report.completed_images.len());
    out
}

fn cmd_pipeline(action: &PipelineAction) -> CliResult<()> {
    let (args, resume) = match action {
        PipelineAction::Run(args) => (args, false),
        PipelineAction::Resume(args) => (args, true),
    };
    if resume && !args.store.is_dir() {
        return Err(fail(
            EXIT_IO,
            format!("nothing to resume: {} is not a directory", args.store.display()),
        ));
    }
    if !(1..=4).contains(&args.max_level) {
        return Err(fail(EXIT_SCHEMA, "--max-level must be 1..=4"));
    }
    let manifest = read_manifest(open_reader(&args.manifest)?).map_err(|e| match e {
        gcgkit_pipeline::ManifestError::Io(io) => fail(EXIT_IO, io.to_string()),
        other => fail(EXIT_SCHEMA, other.to_string()),
    })?;
    let clients = args.clients.build()?;
    let store = gcgkit_pipeline::CheckpointStore::open(&args.store)
        .map_err(|e| fail(EXIT_IO, e.to_string()))?;
    let cfg = RunConfig {
        max_level: args.max_level,
        workers: args.workers,
        level: LevelConfig {
            tau_nms: args.tau_nms,
            tau_match: args.tau_match,
            tau_ground: args.tau_ground,
            max_caption_retries: args.max_caption_retries,
            prompt_examples: Vec::new(),
        },
    };
    let report = run_all(&manifest, &clients, &store, &cfg)?;
    let mut corpus_lines = None;
    if let Some(path) = &args.corpus {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut writer = BufWriter::new(File::create(path)?);
        let n = assemble_corpus(&store, &manifest, args.max_level, &mut writer)
            .map_err(|e| fail(EXIT_IO, e.to_string()))?;
        writer.flush()?;
        corpus_lines = Some(n);
    }
    let mut report_json =
        serde_json::to_value(&report).map_err(|e| fail(EXIT_IO, e.to_string()))?;
    let mut text = run_report_text(&report);
    if let Some(n) = corpus_lines {
        report_json["corpus_records"] = json!(n);
        let _ = writeln!(text, "{:<10} {}", "corpus", n);
    }
    emit(args.out.as_ref(), &report_json, &text, args.json)
}

fn conversion_outcome_to_outputs(
    outcome: &ConversionOutcome,
    out: &Path,
    rejects: Option<&PathBuf>,
    json: bool,
) -> CliResult<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut writer = BufWriter::new(File::create(out)?);
    write_gcg_jsonl(&mut writer, &outcome.records)?;
    writer.flush()?;
    if let Some(path) = rejects {
        let mut writer = BufWriter::new(File::create(path)?);
        for r in &outcome.rejected {
            serde_json::to_writer(&mut writer, r).map_err(|e| fail(EXIT_IO, e.to_string()))?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
    }
    for d in &outcome.diagnostics {
        eprintln!("note: {d}");
    }
    let report_json = json!({
        "records": outcome.records.len(),
        "rejected": outcome.rejected.iter().map(|r| json!({
            "image_id": r.image_id,
            "reason": r.reason,
        })).collect::<Vec<_>>(),
        "diagnostics": outcome.diagnostics.len(),
    });
    let text = format!(
        "{:<10} {}\n{:<10} {}\n",
        "records",
        outcome.records.len(),
        "rejected",
        outcome.rejected.len()
    );
    emit(None, &report_json, &text, json)?;
    if outcome.rejected.is_empty() {
        Ok(())
    } else {
        Err(fail(
            EXIT_EXHAUSTED,
            format!("{} item(s) rejected; records for the rest were written", outcome.rejected.len()),
        ))
    }
}

fn cmd_convert(dataset: &ConvertDataset) -> CliResult<()> {
    match dataset {
        ConvertDataset::Refcocog(args) => {
            let items: Vec<RefCocogItem> = read_jsonl(&args.input)?;
            let clients = args.clients.build()?;
            let outcome = convert_refcocog(&items, &clients, args.max_retries)?;
            conversion_outcome_to_outputs(&outcome, &args.out, args.rejects.as_ref(), args.json)
        }
        ConvertDataset::Psg(args) => {
            let items: Vec<PsgItem> = read_jsonl(&args.input)?;
            let clients = args.clients.build()?;
            let outcome = convert_psg(&items, &clients, args.max_retries)?;
            conversion_outcome_to_outputs(&outcome, &args.out, args.rejects.as_ref(), args.json)
        }
        ConvertDataset::Flickr(args) => {
            let items: Vec<FlickrItem> = read_jsonl(&args.input)?;
            let segmenter = match args.segmenter {
                None => None,
                Some(kind) => {
                    let client_args = ClientArgs {
                        clients: kind,
                        fixtures: args.fixtures.clone(),
                        seed: args.seed,
                        record_fixtures: None,
                    };
                    Some(client_args.build()?)
                }
            };
            let outcome = convert_flickr(&items, segmenter.as_ref(), args.box_fallback)?;
            conversion_outcome_to_outputs(&outcome, &args.out, args.rejects.as_ref(), args.json)
        }
    }
}

/// File-safe name for an image id: alphanumerics, dots and dashes survive.
fn safe_stem(image_id: &str) -> String {
    image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn cmd_render(args: &RenderArgs) -> CliResult<()> {
    let records = read_gcg_jsonl(open_reader(&args.records)?)?;
    fs::create_dir_all(&args.out)?;
    let mut rendered = Vec::new();
    for record in &records {
        let stem = safe_stem(&record.image_id);
        let source = args.image_dir.as_ref().map(|d| d.join(format!("{stem}.ppm")));
        let base = match &source {
            Some(path) if path.is_file() => {
                let raster = render::read_ppm(path).map_err(|e| fail(EXIT_IO, e))?;
                if raster.width != record.width || raster.height != record.height {
                    return Err(fail(
                        EXIT_SCHEMA,
                        format!(
                            "{}: image is {}x{} but the record says {}x{}",
                            path.display(),
                            raster.width,
                            raster.height,
                            record.width,
                            record.height
                        ),
                    ));
                }
                raster
            }
            _ => render::Raster::flat(record.width, record.height, [200, 200, 200]),
        };
        let out_path = args.out.join(format!("{stem}.ppm"));
        if record.masks.is_empty() {
            // Nothing to draw: the output is the source image unchanged.
            render::write_ppm(&out_path, &base)?;
            rendered.push(json!({"image_id": record.image_id, "masks": 0}));
            continue;
        }
        let overlay = render::overlay(&base, &record.masks);
        render::write_ppm(&out_path, &overlay)?;
        let phrases: Vec<String> = match parse_grounded(&record.caption_raw, ParseMode::Tolerant) {
            Ok(parsed) => {
                let mut by_seg = vec![String::new(); record.masks.len()];
                for span in parsed.spans {
                    if span.seg_index < by_seg.len() {
                        by_seg[span.seg_index] = span.phrase;
                    }
                }
                by_seg
                    .into_iter()
                    .enumerate()
                    .map(|(i, p)| if p.is_empty() { format!("mask {i}") } else { p })
                    .collect()
            }
            Err(_) => (0..record.masks.len()).map(|i| format!("mask {i}")).collect(),
        };
        fs::write(args.out.join(format!("{stem}.legend.txt")), render::legend_text(&phrases))?;
        rendered.push(json!({"image_id": record.image_id, "masks": record.masks.len()}));
    }
    let report_json = json!({"rendered": rendered});
    let text = format!("{:<10} {}\n", "rendered", records.len());
    emit(None, &report_json, &text, args.json)
}

/// Deterministic manifest for the synthetic world: small grids with
/// varying object counts (3..=5 by height).
fn synthetic_manifest(images: usize) -> Vec<ImageMeta> {
    (0..images)
        .map(|i| ImageMeta {
            image_id: format!("img-{i:03}"),
            path: None,
            width: 64 + 8 * (i as u32 % 4),
            height: 48 + (i as u32 % 3),
        })
        .collect()
}

fn cmd_fixtures(args: &FixturesArgs) -> CliResult<()> {
    if args.images == 0 {
        return Err(fail(EXIT_SCHEMA, "--images must be at least 1"));
    }
    fs::create_dir_all(&args.out)?;
    let manifest = synthetic_manifest(args.images);
    let manifest_path = args.out.join("manifest.jsonl");
    {
        let mut writer = BufWriter::new(File::create(&manifest_path)?);
        for img in &manifest {
            serde_json::to_writer(&mut writer, img).map_err(|e| fail(EXIT_IO, e.to_string()))?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
    }
    let fixtures_dir = args.out.join("fixtures");
    let transport: Arc<dyn ClientTransport> = Arc::new(RecordingTransport::new(
        Arc::new(SyntheticTransport::new(args.seed)),
        &fixtures_dir,
    ));
    let clients = Clients::with_default_models(transport);
    let store = gcgkit_pipeline::CheckpointStore::open(args.out.join("store"))
        .map_err(|e| fail(EXIT_IO, e.to_string()))?;
    let report = run_all(&manifest, &clients, &store, &RunConfig::default())?;
    if !report.failures.is_empty() {
        return Err(fail(
            EXIT_IO,
            format!("synthetic run failed on {} image(s)", report.failures.len()),
        ));
    }
    let corpus_path = args.out.join("corpus.jsonl");
    let mut writer = BufWriter::new(File::create(&corpus_path)?);
    let n = assemble_corpus(&store, &manifest, 4, &mut writer)
        .map_err(|e| fail(EXIT_IO, e.to_string()))?;
    writer.flush()?;
    // Evaluation fixture: each dense caption becomes a gcg record, so the
    // file scores recall 1.0 against itself.
    let mut gcg_records: Vec<GcgRecord> = Vec::new();
    for img in &manifest {
        let (_, record) = store
            .load_verified(&img.image_id)
            .map_err(|e| fail(EXIT_IO, e.to_string()))?
            .ok_or_else(|| fail(EXIT_IO, format!("missing record for {}", img.image_id)))?;
        let dense = record
            .dense_caption
            .ok_or_else(|| fail(EXIT_IO, format!("no dense caption for {}", img.image_id)))?;
        gcg_records.push(GcgRecord {
            image_id: record.image_id,
            width: record.width,
            height: record.height,
            caption_raw: dense.caption_raw,
            masks: dense.masks,
            scores: None,
            split: None,
            flags: Vec::new(),
        });
    }
    let gcg_path = args.out.join("gcg.jsonl");
    let mut writer = BufWriter::new(File::create(&gcg_path)?);
    write_gcg_jsonl(&mut writer, &gcg_records)?;
    writer.flush()?;
    let report_json = json!({
        "manifest": manifest_path.display().to_string(),
        "images": manifest.len(),
        "fixtures": fixtures_dir.display().to_string(),
        "corpus_records": n,
        "gcg_records": gcg_records.len(),
    });
    let text = format!(
        "{:<10} {}\n{:<10} {}\n{:<10} {}\n",
        "images",
        manifest.len(),
        "corpus",
        n,
        "gcg",
        gcg_records.len()
    );
    emit(None, &report_json, &text, args.json)
}
