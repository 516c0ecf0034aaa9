//! Pipeline stages behind the `segrename` command.
//!
//! Every stage reads and writes files under the dataset directory unless told
//! otherwise, so a full run is
//! `mine-context → gen-candidates → train → rename → serve-verify → export → evaluate`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use segrename::candidates::{
    build_prompt, generate_candidates, CandidateStore, FixtureClient, LanguageModelClient, LiveClient, PromptPair,
    Provenance, RecordingSet,
};
use segrename::context::{rank_context_names, CaptionCorpus, ContextNames, ExtractOptions, RuleTagger};
use segrename::metrics::{evaluate, labeled_images, per_name_report, EvalReport, MetricMode, NameGrouping, Protocol};
use segrename::model::train::TrainingSet;
use segrename::model::{train, EncoderManifest, ModelConfig, Renamer, TrainConfig, ENCODERS_FILE};
use segrename::names::{load_word_vectors, NameSimilarity};
use segrename::renovation::{
    build_upgraded_class_table, name_distribution, relabel_segments, rename_dataset, write_distribution_csv,
    RenameOptions, UpgradedClasses,
};
use segrename::store::{
    load_dataset, read_assignments, save_dataset, write_assignments, ClassTable, Dataset, DatasetKind, NameAssignment,
};
use segrename::synthetic::{self, measure_recovery, RecoveryReport, SyntheticConfig, CANDIDATES_FILE};
use segrename::verify::VerifyStore;
use segrename::{Error, ErrorKind, Result};

pub const CONTEXT_FILE: &str = "context.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ASSIGNMENTS_FILE: &str = "assignments.jsonl";
pub const DECISION_LOG_FILE: &str = "decisions.jsonl";
pub const UPGRADED_FILE: &str = "upgraded_classes.json";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Parser)]
#[command(name = "segrename", version, about = "Rename segments of a segmentation benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank the most frequent caption nouns per class.
    MineContext(MineContextArgs),
    /// Ask a language model for 5-10 candidate names per class.
    GenCandidates(GenCandidatesArgs),
    /// Train the renaming model on ground-truth segments.
    Train(TrainArgs),
    /// Rank each segment's candidates and pick the best name.
    Rename(RenameArgs),
    /// Score predictions with standard or open metrics.
    Evaluate(EvaluateArgs),
    /// Serve the verification backend.
    ServeVerify(VerifyArgs),
    /// Write verified assignments and the upgraded class table.
    Export(ExportArgs),
    /// Generate the planted-name dataset and run the pipeline on it.
    DemoSynthetic(DemoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Panoptic,
    Semantic,
}

impl From<Kind> for DatasetKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Panoptic => DatasetKind::Panoptic,
            Kind::Semantic => DatasetKind::Semantic,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    /// Dataset directory (index, class table, label maps).
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "panoptic")]
    pub kind: Kind,
}

impl DatasetArgs {
    fn load(&self) -> Result<Dataset> {
        load_dataset(&self.dataset, self.kind.into())
    }

    fn path(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.dataset.join(default))
    }
}

#[derive(Debug, Args)]
pub struct MineContextArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// Directory with one `<class_id>.txt` caption file per class.
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Keep adjectives as context names.
    #[arg(long)]
    pub adjectives: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LlmMode {
    Fixture,
    Live,
}

#[derive(Debug, Args)]
pub struct GenCandidatesArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long, value_enum, default_value = "fixture")]
    pub llm: LlmMode,
    /// Recorded responses for `--llm fixture`.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    /// Chat-completions endpoint for `--llm live`.
    #[arg(long, default_value = "https://api.openai.com/v1/chat/completions")]
    pub endpoint: String,
    #[arg(long, default_value = "gpt-4")]
    pub model: String,
    /// Save live responses as a fixture file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long)]
    pub context: Option<PathBuf>,
    /// Prompt without context names.
    #[arg(long)]
    pub no_context: bool,
    #[arg(long, default_value_t = 3)]
    pub attempts: usize,
    /// Output candidate store.
    #[arg(long)]
    pub names: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Encoder manifest; created with hashing text features when absent.
    #[arg(long)]
    pub encoders: Option<PathBuf>,
    /// Training configuration document.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
}

#[derive(Debug, Args)]
pub struct RenameArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    /// Also suggest names from the most confident other classes.
    #[arg(long)]
    pub cross_class: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Standard,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Plain,
    Merged,
    Grouped,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ground-truth dataset.
    #[command(flatten)]
    pub dataset: DatasetArgs,
    /// Prediction dataset in the same format, scores set for things.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, value_enum, default_value = "standard")]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value = "plain")]
    pub protocol: ProtocolArg,
    /// Word vectors for open metrics.
    #[arg(long)]
    pub similarity: Option<PathBuf>,
    /// Name sets (candidate stores or upgraded class tables) to group by.
    #[arg(long)]
    pub names: Vec<PathBuf>,
    /// Original class table when the ground truth already uses new names.
    #[arg(long)]
    pub original_classes: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Best and worst classes to list.
    #[arg(long, default_value_t = 5)]
    pub per_name: usize,
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long)]
    pub assignments: Option<PathBuf>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long)]
    pub export_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 400)]
    pub steps: usize,
    #[arg(long, default_value_t = 48)]
    pub images: usize,
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
}

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

fn require(path: &Path, what: &'static str, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            what,
            path: path.to_path_buf(),
            stage,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MineContext(a) => mine_context(&a),
        Command::GenCandidates(a) => gen_candidates(&a),
        Command::Train(a) => train_stage(&a).map(|_| ()),
        Command::Rename(a) => rename_stage(&a).map(|_| ()),
        Command::Evaluate(a) => evaluate_stage(&a).map(|_| ()),
        Command::ServeVerify(a) => serve_verify(&a),
        Command::Export(a) => export_stage(&a),
        Command::DemoSynthetic(a) => demo_synthetic(&a).map(|_| ()),
    }
}

pub fn mine_context(args: &MineContextArgs) -> Result<()> {
    let dataset = args.dataset.load()?;
    let options = ExtractOptions {
        adjective_pass_through: args.adjectives,
    };
    let mut out = Vec::new();
    for id in dataset.classes.ids() {
        let path = args.captions.join(format!("{id}.txt"));
        let corpus = if path.exists() {
            CaptionCorpus::read(&path, id)?
        } else {
            log::warn!("no captions for class {id} at {}", path.display());
            CaptionCorpus {
                class_id: id,
                captions: Vec::new(),
            }
        };
        out.push(rank_context_names(&corpus, args.k, &RuleTagger, &options)?);
    }
    let path = args.dataset.path(&args.out, CONTEXT_FILE);
    write_json(&path, &out)?;
    println!("context names for {} classes written to {}", out.len(), path.display());
    Ok(())
}

/// Wraps a client and records every response it returns.
struct Recorder<'a> {
    inner: &'a dyn LanguageModelClient,
    label: Mutex<String>,
    set: Mutex<RecordingSet>,
}

impl LanguageModelClient for Recorder<'_> {
    fn complete(&self, prompt: &PromptPair) -> Result<String> {
        let response = self.inner.complete(prompt)?;
        let label = self.label.lock().expect("recorder lock").clone();
        self.set.lock().expect("recorder lock").push(prompt, &label, &response);
        Ok(response)
    }
}

pub fn gen_candidates(args: &GenCandidatesArgs) -> Result<()> {
    let dataset = args.dataset.load()?;
    let contexts: BTreeMap<u32, ContextNames> = if args.no_context {
        BTreeMap::new()
    } else {
        let path = args.dataset.path(&args.context, CONTEXT_FILE);
        require(&path, "context names", "mine-context")?;
        read_json::<Vec<ContextNames>>(&path)?
            .into_iter()
            .map(|c| (c.class_id, c))
            .collect()
    };
    let (client, provenance): (Box<dyn LanguageModelClient>, Provenance) = match args.llm {
        LlmMode::Fixture => {
            let path = args
                .fixture
                .as_ref()
                .ok_or_else(|| Error::Config("--llm fixture needs --fixture <recordings>".into()))?;
            (Box::new(FixtureClient::open(path)?), Provenance::Fixture)
        }
        LlmMode::Live => (Box::new(LiveClient::from_env(&args.endpoint, &args.model)?), Provenance::Llm),
    };
    let recorder = Recorder {
        inner: client.as_ref(),
        label: Mutex::new(String::new()),
        set: Mutex::new(RecordingSet::default()),
    };
    let mut store = CandidateStore::default();
    for (id, class) in &dataset.classes.classes {
        let empty = ContextNames {
            class_id: *id,
            entries: Vec::new(),
        };
        let context = contexts.get(id);
        let prompt = build_prompt(class, context.unwrap_or(&empty), !args.no_context);
        *recorder.label.lock().expect("recorder lock") = class.original_names.join(", ");
        let pool = generate_candidates(*id, &prompt, &recorder, provenance, args.attempts)?;
        store.insert(class, context, pool);
    }
    store.validate()?;
    let path = args.dataset.path(&args.names, CANDIDATES_FILE);
    store.write(&path)?;
    if let Some(record) = &args.record {
        recorder.set.into_inner().expect("recorder lock").write(record)?;
    }
    println!("candidates for {} classes written to {}", store.classes.len(), path.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub first_loss: f64,
    pub last_loss: f64,
    pub parameter_digest: String,
    pub encoder_digests: (String, String),
}

pub fn train_stage(args: &TrainArgs) -> Result<TrainSummary> {
    let dataset = args.dataset.load()?;
    let names = args.dataset.path(&args.names, CANDIDATES_FILE);
    require(&names, "candidate store", "gen-candidates")?;
    let candidates = CandidateStore::read(&names)?;
    let mut config: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(steps) = args.steps {
        config.steps = steps;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }

    let encoders_path = args.dataset.path(&args.encoders, ENCODERS_FILE);
    let manifest = if encoders_path.exists() {
        EncoderManifest::read(&encoders_path)?
    } else {
        let m = EncoderManifest::hashing(args.dim, config.seed);
        m.write(&encoders_path)?;
        log::info!("wrote default encoder manifest to {}", encoders_path.display());
        m
    };
    let base = encoders_path.parent().unwrap_or(Path::new("."));
    let class_ids: Vec<u32> = dataset.classes.ids().collect();
    let model = ModelConfig {
        init_seed: config.seed,
        ..ModelConfig::desk(manifest.dim, class_ids.len())
    };
    let mut renamer = manifest.renamer(model, class_ids, base)?;
    let data = TrainingSet::from_dataset(&dataset, &candidates, &renamer)?;
    let checkpoint = args.dataset.path(&args.checkpoint, CHECKPOINT_FILE);
    let report = train(&mut renamer, &data, &config, &checkpoint)?;
    renamer.save(&checkpoint)?;
    let mut curve = checkpoint.clone().into_os_string();
    curve.push(".loss.csv");
    let curve = PathBuf::from(curve);
    report.write_loss_curve(&curve)?;
    let summary = TrainSummary {
        checkpoint,
        loss_curve: curve,
        first_loss: report.loss_curve[0],
        last_loss: *report.loss_curve.last().expect("steps > 0"),
        parameter_digest: report.parameter_digest,
        encoder_digests: report.encoder_digests_after,
    };
    println!(
        "trained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
        config.steps,
        summary.first_loss,
        summary.last_loss,
        summary.checkpoint.display()
    );
    Ok(summary)
}

pub fn rename_stage(args: &RenameArgs) -> Result<Vec<NameAssignment>> {
    let checkpoint = args.dataset.path(&args.checkpoint, CHECKPOINT_FILE);
    require(&checkpoint, "checkpoint", "train")?;
    let names = args.dataset.path(&args.names, CANDIDATES_FILE);
    require(&names, "candidate store", "gen-candidates")?;
    let dataset = args.dataset.load()?;
    let renamer = Renamer::load(&checkpoint)?;
    let pools = CandidateStore::read(&names)?.pools();
    let options = RenameOptions {
        top_k: args.top_k,
        cross_class: args.cross_class,
    };
    let outcome = rename_dataset(&dataset, &pools, &renamer, &options)?;
    let out = args.dataset.path(&args.out, ASSIGNMENTS_FILE);
    write_assignments(&outcome.assignments, &out)?;
    let dir = out.parent().unwrap_or(Path::new("."));
    for id in dataset.classes.ids() {
        let rows = name_distribution(&outcome.assignments, &dataset.classes, id)?;
        write_distribution_csv(&rows, &dir.join("distribution").join(format!("{id}.csv")))?;
    }
    if !outcome.failures.is_empty() {
        write_json(&dir.join("rename_failures.json"), &outcome.failures)?;
        eprintln!("{} segments could not be renamed; see rename_failures.json", outcome.failures.len());
    }
    println!("{} assignments written to {}", outcome.assignments.len(), out.display());
    Ok(outcome.assignments)
}

/// A name set file: either a candidate store or an upgraded class table.
fn read_name_set(path: &Path) -> Result<BTreeMap<u32, Vec<String>>> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("grouping").is_some() {
        let up: UpgradedClasses = serde_json::from_value(value).map_err(|e| Error::parse(path, e))?;
        return Ok(up
            .grouping
            .into_iter()
            .map(|(c, names)| (c, names.into_iter().collect()))
            .collect());
    }
    let store: CandidateStore = serde_json::from_value(value).map_err(|e| Error::parse(path, e))?;
    Ok(store.pools())
}

pub fn evaluate_stage(args: &EvaluateArgs) -> Result<EvalReport> {
    let gt = args.dataset.load()?;
    let pred = load_dataset(&args.predictions, args.dataset.kind.into())?;
    let mode = match args.metric {
        MetricArg::Standard => MetricMode::Standard,
        MetricArg::Open => MetricMode::Open,
    };
    let protocol = match args.protocol {
        ProtocolArg::Plain => Protocol::Plain,
        ProtocolArg::Merged => Protocol::MergedNames,
        ProtocolArg::Grouped => Protocol::GroupedToOriginal,
    };
    let vectors = match (&args.similarity, mode) {
        (Some(p), _) => Some(load_word_vectors(p)?),
        (None, MetricMode::Open) => {
            return Err(Error::Config("--metric open needs --similarity <vectors>".into()));
        }
        (None, MetricMode::Standard) => None,
    };
    let grouping = if protocol == Protocol::Plain {
        None
    } else {
        let original = match &args.original_classes {
            Some(p) => ClassTable::read(p)?,
            None => gt.classes.clone(),
        };
        let sets = args.names.iter().map(|p| read_name_set(p)).collect::<Result<Vec<_>>>()?;
        Some(NameGrouping::merge(&original, &sets)?)
    };
    let report = evaluate(
        &labeled_images(&gt)?,
        &labeled_images(&pred)?,
        mode,
        protocol,
        grouping.as_ref(),
        vectors.as_ref().map(|v| v as &dyn NameSimilarity),
    )?;
    let path = args.report.clone().unwrap_or_else(|| args.predictions.join(REPORT_FILE));
    report.write_json(&path)?;
    let mut table = report.to_table();
    let (top, bottom) = per_name_report(&report, args.per_name);
    if !top.is_empty() {
        let fmt = |rows: &[(String, f64)]| {
            rows.iter()
                .map(|(n, v)| format!("{n} {:.2}", 100.0 * v))
                .collect::<Vec<_>>()
                .join(", ")
        };
        table.push_str(&format!("\nbest IoU: {}\nworst IoU: {}\n", fmt(&top), fmt(&bottom)));
    }
    std::fs::write(path.with_extension("txt"), &table).map_err(|e| Error::io(path.with_extension("txt"), e))?;
    print!("{table}");
    Ok(report)
}

fn open_store(args: &StoreArgs) -> Result<VerifyStore> {
    let assignments = args.dataset.path(&args.assignments, ASSIGNMENTS_FILE);
    require(&assignments, "assignments", "rename")?;
    let names = args.dataset.path(&args.names, CANDIDATES_FILE);
    require(&names, "candidate store", "gen-candidates")?;
    let dataset = args.dataset.load()?;
    let pools = CandidateStore::read(&names)?.pools();
    let log = args.dataset.path(&args.log, DECISION_LOG_FILE);
    VerifyStore::open(&dataset, read_assignments(&assignments)?, pools, &log)
}

pub fn serve_verify(args: &VerifyArgs) -> Result<()> {
    let store = Arc::new(open_store(&args.store)?);
    let export_dir = args.export_dir.clone().unwrap_or_else(|| args.store.dataset.dataset.join("verified"));
    let state = segrename_verify::AppState { store, export_dir };
    let addr = SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    println!("serving verification tasks on http://{addr}");
    runtime
        .block_on(segrename_verify::serve(state, addr))
        .map_err(|e| Error::io(addr.to_string(), e))
}

pub fn export_stage(args: &ExportArgs) -> Result<()> {
    let store = open_store(&args.store)?;
    let out = args.out.clone().unwrap_or_else(|| args.store.dataset.dataset.join("verified"));
    let summary = store.export(&out)?;

    let dataset = args.store.dataset.load()?;
    let mut merged: BTreeMap<u64, NameAssignment> = read_assignments(
        &args.store.dataset.path(&args.store.assignments, ASSIGNMENTS_FILE),
    )?
    .into_iter()
    .map(|a| (a.segment_id, a))
    .collect();
    for a in store.verified().0 {
        merged.insert(a.segment_id, a);
    }
    let merged: Vec<NameAssignment> = merged.into_values().collect();
    let upgraded = build_upgraded_class_table(&merged, &dataset.classes);
    write_json(&out.join(UPGRADED_FILE), &upgraded)?;
    let s = &summary.stats;
    println!(
        "{} of {} segments verified (top1 {:.2}, top3 {:.2}, others {:.2}, cross-class {:.2}); {} upgraded classes",
        s.decided,
        s.total,
        s.top1,
        s.top3,
        s.others,
        s.cross_class,
        upgraded.table.len()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub seed: u64,
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub before: RecoveryReport,
    pub after: RecoveryReport,
    pub assignments: usize,
    pub upgraded_classes: usize,
}

/// Generate the synthetic dataset under `out/dataset`, train, rename, and write
/// the upgraded dataset under `out/upgraded`.
pub fn demo_synthetic(args: &DemoArgs) -> Result<DemoSummary> {
    let data_dir = args.out.join("dataset");
    let config = SyntheticConfig {
        images: args.images,
        seed: args.seed,
        ..SyntheticConfig::default()
    };
    let synth = synthetic::generate(&data_dir, &config)?;
    let dataset_args = DatasetArgs {
        dataset: data_dir.clone(),
        kind: Kind::Panoptic,
    };

    let checkpoint = args.out.join(CHECKPOINT_FILE);
    let baseline = {
        let dataset = dataset_args.load()?;
        let ids: Vec<u32> = dataset.classes.ids().collect();
        let model = ModelConfig {
            init_seed: args.seed,
            ..ModelConfig::desk(config.dim, ids.len())
        };
        let renamer = synth.encoders.renamer(model, ids, &data_dir)?;
        measure_recovery(&renamer, &dataset, &synth.planted, &synth.pools, |_| true, args.seed)?
    };
    let trained = train_stage(&TrainArgs {
        dataset: dataset_args.clone(),
        names: None,
        checkpoint: Some(checkpoint.clone()),
        encoders: None,
        config: None,
        steps: Some(args.steps),
        seed: Some(args.seed),
        dim: config.dim,
    })?;
    let assignments = rename_stage(&RenameArgs {
        dataset: dataset_args.clone(),
        names: None,
        checkpoint: Some(checkpoint.clone()),
        top_k: args.top_k,
        cross_class: false,
        out: Some(args.out.join(ASSIGNMENTS_FILE)),
    })?;

    let dataset = dataset_args.load()?;
    let renamer = Renamer::load(&checkpoint)?;
    let after = measure_recovery(&renamer, &dataset, &synth.planted, &synth.pools, |_| true, args.seed)?;
    let upgraded = build_upgraded_class_table(&assignments, &dataset.classes);
    let segments = relabel_segments(&dataset, &assignments, &upgraded)?;
    let upgraded_dir = args.out.join("upgraded");
    save_dataset(&upgraded_dir, &upgraded.table, &dataset.images, &segments)?;
    for img in &dataset.images {
        if let (Some(rel), Some(src)) = (&img.image, dataset.rgb_path(&img.image_id)) {
            let dst = upgraded_dir.join(rel);
            if let Some(parent) = dst.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
        }
    }
    write_json(&args.out.join(UPGRADED_FILE), &upgraded)?;

    let summary = DemoSummary {
        seed: args.seed,
        steps: args.steps,
        first_loss: trained.first_loss,
        last_loss: trained.last_loss,
        before: baseline,
        after,
        assignments: assignments.len(),
        upgraded_classes: upgraded.table.len(),
    };
    write_json(&args.out.join(SUMMARY_FILE), &summary)?;
    println!(
        "planted-name accuracy {:.3} -> {:.3}; negative below planted {:.3} -> {:.3}",
        baseline.top1_accuracy, after.top1_accuracy, baseline.negative_below_planted, after.negative_below_planted
    );
    Ok(summary)
}
