//! Command-line surface: pretraining, diffusion training, generation,
//! evaluation and schedule inspection as reproducible runs.
//!
//! Every run resolves a [`RunConfig`] (JSON file, then `NOISEFACTS_SEED`, then
//! flags) and stamps its SHA-256 into each artifact it writes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    ingest_kg, ingest_narratives, FactTriple, KnowledgeSet, KnowledgeUnit, NarrativeSample, RelationCatalog, Vocabulary,
};
use crate::diffuser::{fact_items, Diffuser, DiffuserConfig, GenerationConfig, LossPoint, TrainLog};
use crate::embedder::{entity_sequences, fact_sequences, pretrain_sequences, Embedder, PretrainConfig};
use crate::entitypipe::{entity_units, train_entity_models, ClassifierConfig, EntityPipeline, EntityTrainConfig, RelationClassifier};
use crate::error::{Error, Result};
use crate::evalmetrics::relevance::train_relevance_classifier;
use crate::evalmetrics::{
    auto_threshold_range, evaluate_suite, knowledge_type_proportions, nlg_scores, novelty, webnlg_scores, ClassifierScorer,
    EmbeddingProvider, Features, FileScorer, Geometry, InternalEmbedder, MetricReport, OverlapScorer, RelevanceScorer,
    SuiteConfig, ThresholdSpec, VectorFile,
};
use crate::rng::derive_seed;
use crate::schedule::NoiseSchedule;

/// `println!` that ignores a closed stdout (e.g. output piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub const SEED_ENV: &str = "NOISEFACTS_SEED";
pub const RUN_FILE: &str = "run.json";
pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

const VOCAB_FILE: &str = "vocab.json";
const CATALOG_FILE: &str = "catalog.json";
const OPEN_CATALOG: &str = "\"open\"";

/// Unit kind an embedder was pretrained on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    #[default]
    Facts,
    Entities,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Fact,
    Entity,
    Relevance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GeometryChoice {
    #[default]
    Edit,
    Embedding,
    Both,
}

impl GeometryChoice {
    fn geometries(self) -> Vec<Geometry> {
        match self {
            GeometryChoice::Edit => vec![Geometry::Edit],
            GeometryChoice::Embedding => vec![Geometry::Embedding],
            GeometryChoice::Both => vec![Geometry::Edit, Geometry::Embedding],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScorerChoice {
    #[default]
    Overlap,
    File,
    Classifier,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    /// `None` runs all `T` steps.
    pub inference_steps: Option<usize>,
    pub max_facts: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricSettings {
    pub geometry: GeometryChoice,
    pub thresholds: ThresholdSpec,
    pub scorer: ScorerChoice,
    pub novelty: bool,
    /// Clustering radius for novel facts; `None` takes the middle of the
    /// automatic embedding range.
    pub novelty_eps: Option<f64>,
    pub webnlg: bool,
    pub nlg: bool,
    pub types: bool,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            geometry: GeometryChoice::Edit,
            thresholds: ThresholdSpec::Auto,
            scorer: ScorerChoice::Overlap,
            novelty: false,
            novelty_eps: None,
            webnlg: false,
            nlg: false,
            types: false,
        }
    }
}

/// Everything that determines a run's outputs. The output location is kept
/// out of the hash so that relocating a run does not change its identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub inputs: BTreeMap<String, String>,
    /// Hashes of the upstream artifacts consumed by this run.
    pub upstream: BTreeMap<String, String>,
    #[serde(skip_serializing)]
    pub output: Option<PathBuf>,
    pub seed: u64,
    /// `atomic`, `open`, or a path to a relation catalog.
    pub catalog: String,
    pub min_count: usize,
    pub units: UnitKind,
    pub embedder: PretrainConfig,
    pub diffuser: DiffuserConfig,
    pub entity: EntityTrainConfig,
    pub relevance: ClassifierConfig,
    pub generation: GenerationSettings,
    pub metrics: MetricSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            inputs: BTreeMap::new(),
            upstream: BTreeMap::new(),
            output: None,
            seed: 0,
            catalog: "atomic".into(),
            min_count: 1,
            units: UnitKind::Facts,
            embedder: PretrainConfig::default(),
            diffuser: DiffuserConfig::toy(),
            entity: EntityTrainConfig::toy(),
            relevance: ClassifierConfig::default(),
            generation: GenerationSettings::default(),
            metrics: MetricSettings::default(),
        }
    }
}

impl RunConfig {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("run config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Child seeds for every stochastic consumer, derived by role.
    fn resolve_seeds(&mut self) {
        let s = self.seed;
        self.embedder.seed = derive_seed(s, "embedder");
        self.diffuser.seed = derive_seed(s, "diffuser");
        self.entity.embedder.seed = derive_seed(s, "entity-embedder");
        self.entity.heads.seed = derive_seed(s, "entity-heads");
        self.entity.tails.seed = derive_seed(s, "entity-tails");
        self.entity.classifier.seed = derive_seed(s, "entity-relations");
        self.relevance.seed = derive_seed(s, "relevance");
    }
}

#[derive(Serialize, Deserialize)]
struct RunRecord {
    config_hash: String,
    kind: String,
    config: RunConfig,
}

#[derive(Parser, Debug)]
#[command(name = "noisefacts", version, about = "Contextual knowledge generation with latent diffusion")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed (overrides the config file and NOISEFACTS_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain the fact (or entity) autoencoder on a knowledge graph.
    PretrainEmbedder(PretrainArgs),
    /// Train the fact diffuser, the entity pipeline or a relevance classifier.
    Train(TrainArgs),
    /// Generate knowledge sets for every context of a narratives file.
    Generate(GenerateArgs),
    /// Score generations against gold sets.
    Evaluate(EvaluateArgs),
    /// Triple-matching precision/recall/F1 under three regimes.
    WebnlgScore(WebNlgArgs),
    /// Print or dump a noise schedule.
    InspectSchedule(InspectArgs),
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub kg: PathBuf,
    /// Narratives used, with the KG, to build the vocabulary.
    #[arg(long)]
    pub narratives: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub units: Option<UnitKind>,
    /// `atomic`, `open`, or a relation catalog JSON.
    #[arg(long)]
    pub catalog: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub embedder: PathBuf,
    #[arg(long)]
    pub narratives: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "fact")]
    pub mode: TrainMode,
    /// Diffusion training steps (both diffusers in entity mode).
    #[arg(long)]
    pub train_steps: Option<u64>,
    /// Classifier epochs (entity and relevance modes).
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub embedder: PathBuf,
    /// Output directory of `train --mode fact|entity`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub narratives: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of reverse steps (1..=T).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub max_facts: Option<usize>,
    /// Accept a model trained on a different embedder run.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generations: PathBuf,
    /// Narratives file with the gold sets, aligned with the generations.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub geometry: Option<GeometryChoice>,
    /// `auto` or a comma-separated list of radii.
    #[arg(long)]
    pub thresholds: Option<String>,
    #[arg(long, value_enum)]
    pub scorer: Option<ScorerChoice>,
    /// Precomputed relevance scores (`--scorer file`).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Output directory of `train --mode relevance` (`--scorer classifier`).
    #[arg(long)]
    pub relevance_model: Option<PathBuf>,
    /// Fact embedder for the embedding geometry and novelty.
    #[arg(long)]
    pub embedder: Option<PathBuf>,
    /// External fact vectors; takes precedence over `--embedder`.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub novelty: bool,
    #[arg(long)]
    pub novelty_eps: Option<f64>,
    /// Reference pool for novelty; defaults to all gold facts.
    #[arg(long)]
    pub reference_kg: Option<PathBuf>,
    #[arg(long)]
    pub webnlg: bool,
    #[arg(long)]
    pub nlg: bool,
    #[arg(long)]
    pub types: bool,
    /// `atomic`, `open`, or a relation catalog JSON (ignored with `--embedder`).
    #[arg(long)]
    pub catalog: Option<String>,
    /// Evaluate generations carrying different config hashes.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct WebNlgArgs {
    #[arg(long)]
    pub generations: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Write the scores here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub catalog: Option<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// A diffuser checkpoint directory or a schedule JSON file.
    pub path: PathBuf,
    /// Print the full row dump as JSON instead of a summary table.
    #[arg(long)]
    pub json: bool,
    /// Steps at which to tabulate; defaults to five evenly spaced ones.
    #[arg(long, value_delimiter = ',')]
    pub at: Vec<usize>,
}

/// One line of a generations file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub context_id: usize,
    pub context: String,
    pub facts: Vec<FactTriple>,
    pub n_dropped: usize,
    pub inference_steps: usize,
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs_scored: Option<usize>,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

/// Parses `args` and runs the command; returns the exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let mut base = serde_json::to_value(RunConfig::default())?;
            merge_json(&mut base, serde_json::from_str(&text)?);
            serde_json::from_value::<RunConfig>(base)?
        }
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.resolve_seeds();
    match cli.command {
        Command::PretrainEmbedder(a) => cmd_pretrain(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Generate(a) => cmd_generate(cfg, a),
        Command::Evaluate(a) => cmd_evaluate(cfg, a),
        Command::WebnlgScore(a) => cmd_webnlg(cfg, a),
        Command::InspectSchedule(a) => cmd_inspect(a),
    }
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn resolve_catalog(spec: &str) -> Result<RelationCatalog> {
    match spec {
        "atomic" => Ok(RelationCatalog::atomic()),
        "open" => Ok(RelationCatalog::open()),
        path => RelationCatalog::load(Path::new(path)),
    }
}

fn save_catalog(dir: &Path, cat: &RelationCatalog) -> Result<()> {
    if cat.is_open() {
        write_text(&dir.join(CATALOG_FILE), OPEN_CATALOG)
    } else {
        cat.save(&dir.join(CATALOG_FILE))
    }
}

fn load_catalog(dir: &Path) -> Result<RelationCatalog> {
    let path = dir.join(CATALOG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    if text.trim() == OPEN_CATALOG {
        Ok(RelationCatalog::open())
    } else {
        RelationCatalog::load(&path)
    }
}

fn write_run(dir: &Path, kind: &str, cfg: &RunConfig) -> Result<String> {
    let rec = RunRecord { config_hash: cfg.hash(), kind: kind.into(), config: cfg.clone() };
    write_text(&dir.join(RUN_FILE), &serde_json::to_string_pretty(&rec)?)?;
    Ok(rec.config_hash)
}

fn read_run(dir: &Path) -> Result<RunRecord> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).map(|_| ()).map_err(|e| Error::io(from, e))
}

fn loss_csv(points: &[LossPoint]) -> String {
    let mut s = String::from("step,mse,anchor,total\n");
    for p in points {
        s.push_str(&format!("{},{},{},{}\n", p.step, p.mse, p.anchor, p.total));
    }
    s
}

fn curve_csv(values: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, v));
    }
    s
}

fn dump_schedules(dir: &Path, prefix: &str, log: &TrainLog) -> Result<()> {
    let sdir = dir.join("schedules");
    create_dir(&sdir)?;
    for (step, sched) in &log.schedule_snapshots {
        sched.dump_rows(&sdir.join(format!("{prefix}step_{step:08}.json")))?;
    }
    Ok(())
}

/// Fact/entity embedder with its vocabulary and catalog, as written by
/// `pretrain-embedder`.
struct EmbedderRun {
    embedder: Embedder<f32>,
    vocab: Vocabulary,
    catalog: RelationCatalog,
    record: RunRecord,
}

fn load_embedder_run(dir: &Path) -> Result<EmbedderRun> {
    let record = read_run(dir)?;
    if record.kind != "embedder" {
        return Err(Error::Input(format!("{} is a `{}` run, not an embedder", dir.display(), record.kind)));
    }
    Ok(EmbedderRun {
        embedder: Embedder::load(&dir.join("embedder"))?,
        vocab: Vocabulary::load(&dir.join(VOCAB_FILE))?,
        catalog: load_catalog(dir)?,
        record,
    })
}

fn cmd_pretrain(mut cfg: RunConfig, a: PretrainArgs) -> Result<()> {
    cfg.command = "pretrain-embedder".into();
    if let Some(u) = a.units {
        cfg.units = u;
    }
    if let Some(c) = a.catalog {
        cfg.catalog = c;
    }
    if let Some(e) = a.epochs {
        cfg.embedder.epochs = e;
    }
    cfg.inputs.insert("kg".into(), path_str(&a.kg));
    cfg.inputs.insert("narratives".into(), path_str(&a.narratives));
    cfg.output = Some(a.out.clone());

    let catalog = resolve_catalog(&cfg.catalog)?;
    let (kg, kg_report) = ingest_kg(&a.kg, &catalog)?;
    let (samples, nar_report) = ingest_narratives(&a.narratives, &catalog)?;
    if kg.is_empty() {
        return Err(Error::Input(format!("{}: no usable triples", a.kg.display())));
    }
    let vocab = Vocabulary::build(&samples, &kg, &catalog, cfg.min_count);
    let seqs = match cfg.units {
        UnitKind::Facts => fact_sequences(&kg, &catalog, &vocab)?,
        UnitKind::Entities => entity_sequences(&entity_units(&samples, &kg), &catalog, &vocab)?,
    };
    let (emb, report) = pretrain_sequences::<f32>(&seqs, vocab.len(), &cfg.embedder)?;
    let eok = KnowledgeUnit::Eok.tokens(&catalog, &vocab)?;
    let units: Vec<Vec<u32>> = seqs.iter().filter(|s| **s != eok).cloned().collect();
    let unit_rate = emb.reconstruction_rate(&units)?;
    let eok_rate = emb.reconstruction_rate(&[eok])?;

    create_dir(&a.out)?;
    emb.save(&a.out.join("embedder"))?;
    vocab.save(&a.out.join(VOCAB_FILE))?;
    save_catalog(&a.out, &catalog)?;
    let hash = write_run(&a.out, "embedder", &cfg)?;
    let summary = serde_json::json!({
        "config_hash": hash,
        "units": cfg.units,
        "n_units": units.len(),
        "vocab_size": vocab.len(),
        "reconstruction_rate": unit_rate,
        "eok_reconstruction_rate": eok_rate,
        "initial_loss": report.initial_loss,
        "epoch_losses": report.epoch_losses,
        "skipped_updates": report.skipped_updates,
        "ingest": { "kg": kg_report, "narratives": nar_report },
    });
    write_text(&a.out.join("pretrain_report.json"), &serde_json::to_string_pretty(&summary)?)?;
    write_text(&a.out.join("loss.csv"), &curve_csv(&report.epoch_losses))?;
    say!(
        "pretrained {} {:?} units (vocab {}): reconstruction {:.2}%, <eok> {:.0}%, final loss {:.5}",
        units.len(),
        cfg.units,
        vocab.len(),
        100.0 * unit_rate,
        100.0 * eok_rate,
        report.epoch_losses.last().copied().unwrap_or(report.initial_loss)
    );
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    cfg.command = "train".into();
    cfg.inputs.insert("embedder".into(), path_str(&a.embedder));
    cfg.inputs.insert("narratives".into(), path_str(&a.narratives));
    cfg.inputs.insert("mode".into(), format!("{:?}", a.mode).to_lowercase());
    cfg.output = Some(a.out.clone());
    if let Some(n) = a.train_steps {
        for d in [&mut cfg.diffuser, &mut cfg.entity.heads, &mut cfg.entity.tails] {
            d.train_steps = n;
            d.optim.total = n;
        }
    }
    if let Some(e) = a.epochs {
        cfg.entity.classifier.epochs = e;
        cfg.relevance.epochs = e;
    }
    let run = load_embedder_run(&a.embedder)?;
    cfg.upstream.insert("embedder".into(), run.record.config_hash.clone());
    let want = match a.mode {
        TrainMode::Fact => Some(UnitKind::Facts),
        TrainMode::Entity => Some(UnitKind::Entities),
        TrainMode::Relevance => None,
    };
    if let Some(w) = want {
        if run.record.config.units != w {
            return Err(Error::Input(format!(
                "mode {:?} needs an embedder pretrained on {:?}, found {:?}",
                a.mode, w, run.record.config.units
            )));
        }
    }
    let (samples, _) = ingest_narratives(&a.narratives, &run.catalog)?;
    if samples.is_empty() {
        return Err(Error::Input(format!("{}: no narratives", a.narratives.display())));
    }
    create_dir(&a.out)?;
    copy_file(&a.embedder.join(VOCAB_FILE), &a.out.join(VOCAB_FILE))?;
    copy_file(&a.embedder.join(CATALOG_FILE), &a.out.join(CATALOG_FILE))?;
    match a.mode {
        TrainMode::Fact => {
            check_width(run.embedder.dim(), cfg.diffuser.model.d)?;
            let items = fact_items(&samples, &run.catalog, &run.vocab, cfg.diffuser.model.max_len)?;
            let mut diff = Diffuser::<f32>::init(&cfg.diffuser, run.vocab.len())?;
            let log = diff.train(&items, &run.embedder, &run.vocab, &run.catalog)?;
            diff.save(&a.out.join("diffuser"))?;
            write_text(&a.out.join("loss.csv"), &loss_csv(&log.points))?;
            dump_schedules(&a.out, "", &log)?;
            write_run(&a.out, "fact", &cfg)?;
            report_log("diffuser", &log);
        }
        TrainMode::Entity => {
            check_width(run.embedder.dim(), cfg.entity.heads.model.d)?;
            check_width(run.embedder.dim(), cfg.entity.tails.model.d)?;
            let (pipe, report) = train_entity_models(run.embedder, &samples, &run.catalog, &run.vocab, &cfg.entity)?;
            pipe.heads.save(&a.out.join("heads"))?;
            pipe.tails.save(&a.out.join("tails"))?;
            pipe.relations.save(&a.out.join("relations"))?;
            write_text(&a.out.join("loss_heads.csv"), &loss_csv(&report.heads.points))?;
            write_text(&a.out.join("loss_tails.csv"), &loss_csv(&report.tails.points))?;
            write_text(&a.out.join("loss_relations.csv"), &curve_csv(&report.classifier_losses))?;
            dump_schedules(&a.out, "heads_", &report.heads)?;
            dump_schedules(&a.out, "tails_", &report.tails)?;
            write_run(&a.out, "entity", &cfg)?;
            report_log("heads", &report.heads);
            report_log("tails", &report.tails);
            say!("relations: final loss {:.5}", report.classifier_losses.last().copied().unwrap_or(f64::NAN));
        }
        TrainMode::Relevance => {
            let (clf, curve) = train_relevance_classifier::<f32>(&samples, &run.catalog, &run.vocab, &cfg.relevance)?;
            clf.save(&a.out.join("relevance"))?;
            write_text(&a.out.join("loss.csv"), &curve_csv(&curve))?;
            write_run(&a.out, "relevance", &cfg)?;
            say!("relevance classifier: final loss {:.5}", curve.last().copied().unwrap_or(f64::NAN));
        }
    }
    Ok(())
}

fn check_width(emb: usize, model: usize) -> Result<()> {
    if emb != model {
        return Err(Error::Config(format!("embedder width {emb} differs from model width {model}")));
    }
    Ok(())
}

fn report_log(name: &str, log: &TrainLog) {
    let last = log.points.last().map_or(f64::NAN, |p| p.total);
    say!(
        "{name}: {} logged points, final loss {last:.5}, {} schedule updates, {} samples skipped",
        log.points.len(),
        log.schedule_updates,
        log.skipped.len()
    );
}

enum Generator {
    Fact(Diffuser<f32>),
    Entity(Box<EntityPipeline<f32>>),
}

fn cmd_generate(mut cfg: RunConfig, a: GenerateArgs) -> Result<()> {
    cfg.command = "generate".into();
    cfg.inputs.insert("embedder".into(), path_str(&a.embedder));
    cfg.inputs.insert("model".into(), path_str(&a.model));
    cfg.inputs.insert("narratives".into(), path_str(&a.narratives));
    cfg.output = Some(a.out.clone());
    if a.steps.is_some() {
        cfg.generation.inference_steps = a.steps;
    }
    if a.max_facts.is_some() {
        cfg.generation.max_facts = a.max_facts;
    }
    let run = load_embedder_run(&a.embedder)?;
    let model_run = read_run(&a.model)?;
    let emb_hash = run.record.config_hash.clone();
    match model_run.config.upstream.get("embedder") {
        Some(h) if *h == emb_hash => {}
        _ if a.force => {}
        other => {
            return Err(Error::Input(format!(
                "model was trained on embedder run {} but {} is run {emb_hash} (use --force to override)",
                other.map_or("<unknown>", String::as_str),
                a.embedder.display()
            )))
        }
    }
    cfg.upstream.insert("embedder".into(), emb_hash);
    cfg.upstream.insert("model".into(), model_run.config_hash.clone());

    let generator = match model_run.kind.as_str() {
        "fact" => {
            let d = Diffuser::<f32>::load(&a.model.join("diffuser"))?;
            check_width(run.embedder.dim(), d.config().model.d)?;
            Generator::Fact(d)
        }
        "entity" => {
            let heads = Diffuser::<f32>::load(&a.model.join("heads"))?;
            let tails = Diffuser::<f32>::load(&a.model.join("tails"))?;
            check_width(run.embedder.dim(), heads.config().model.d)?;
            check_width(run.embedder.dim(), tails.config().model.d)?;
            let relations = RelationClassifier::load(&a.model.join("relations"))?;
            Generator::Entity(Box::new(EntityPipeline { embedder: run.embedder.clone(), heads, tails, relations }))
        }
        k => return Err(Error::Input(format!("{} is a `{k}` run; expected fact or entity", a.model.display()))),
    };
    let total = match &generator {
        Generator::Fact(d) => d.config().steps,
        Generator::Entity(p) => p.heads.config().steps,
    };
    let steps = cfg.generation.inference_steps.unwrap_or(total);
    if steps == 0 || steps > total {
        return Err(Error::Input(format!("--steps must lie in 1..={total}, got {steps}")));
    }
    let (samples, _) = ingest_narratives(&a.narratives, &run.catalog)?;
    let hash = cfg.hash();
    let mut out = String::new();
    for (i, s) in samples.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &format!("generate/{i}"));
        let gen = GenerationConfig { inference_steps: steps, n_slots: None, seed };
        let mut rec = GenerationRecord {
            context_id: i,
            context: s.context.clone(),
            facts: Vec::new(),
            n_dropped: 0,
            inference_steps: steps,
            seed,
            config_hash: hash.clone(),
            heads: None,
            pairs_scored: None,
        };
        match &generator {
            Generator::Fact(d) => {
                let g = d.generate_facts(&s.context, &run.embedder, &run.vocab, &run.catalog, &gen)?;
                rec.facts = g.facts;
                rec.n_dropped = g.n_dropped;
            }
            Generator::Entity(p) => {
                let g = p.generate_fact_graph(&s.context, &run.vocab, &gen)?;
                rec.facts = g.facts;
                rec.heads = Some(g.heads);
                rec.pairs_scored = Some(g.pairs_scored);
            }
        }
        if let Some(m) = cfg.generation.max_facts {
            rec.facts.truncate(m);
        }
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_text(&a.out, &out)?;
    say!("generated {} contexts at {steps} steps -> {}", samples.len(), a.out.display());
    Ok(())
}

/// Reads a generations file; all lines must carry one config hash unless `force`.
pub fn read_generations(path: &Path, force: bool) -> Result<(Vec<GenerationRecord>, Option<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut recs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: GenerationRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
        recs.push(r);
    }
    let first = recs.first().map(|r| r.config_hash.clone());
    if let Some(h) = &first {
        if let Some(bad) = recs.iter().find(|r| &r.config_hash != h) {
            if !force {
                return Err(Error::Input(format!(
                    "generations mix config hashes ({h} and {} at context {}); use --force to evaluate anyway",
                    bad.config_hash, bad.context_id
                )));
            }
        }
    }
    Ok((recs, first))
}

/// Checks that generation `i` belongs to gold context `i`.
pub fn check_alignment(gen: &[GenerationRecord], gold: &[NarrativeSample]) -> Result<()> {
    for i in 0..gen.len().max(gold.len()) {
        let ok = match (gen.get(i), gold.get(i)) {
            (Some(g), Some(s)) => g.context_id == i && g.context == s.context,
            _ => false,
        };
        if !ok {
            return Err(Error::Input(format!(
                "generations and gold are misaligned at context id {i} ({} generated, {} gold)",
                gen.len(),
                gold.len()
            )));
        }
    }
    Ok(())
}

fn parse_thresholds(s: &str) -> Result<ThresholdSpec> {
    if s.trim().eq_ignore_ascii_case("auto") {
        return Ok(ThresholdSpec::Auto);
    }
    let v = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad threshold `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ThresholdSpec::Explicit(v))
}

fn cmd_evaluate(mut cfg: RunConfig, a: EvaluateArgs) -> Result<()> {
    cfg.command = "evaluate".into();
    cfg.inputs.insert("generations".into(), path_str(&a.generations));
    cfg.inputs.insert("gold".into(), path_str(&a.gold));
    for (k, v) in [
        ("scores", &a.scores),
        ("relevance_model", &a.relevance_model),
        ("embedder", &a.embedder),
        ("vectors", &a.vectors),
        ("reference_kg", &a.reference_kg),
    ] {
        if let Some(p) = v {
            cfg.inputs.insert(k.into(), path_str(p));
        }
    }
    cfg.output = Some(a.out.clone());
    let m = &mut cfg.metrics;
    if let Some(g) = a.geometry {
        m.geometry = g;
    }
    if let Some(t) = &a.thresholds {
        m.thresholds = parse_thresholds(t)?;
    }
    if let Some(s) = a.scorer {
        m.scorer = s;
    }
    m.novelty |= a.novelty;
    m.webnlg |= a.webnlg;
    m.nlg |= a.nlg;
    m.types |= a.types;
    if a.novelty_eps.is_some() {
        m.novelty_eps = a.novelty_eps;
    }
    if let Some(c) = &a.catalog {
        cfg.catalog = c.clone();
    }

    let emb_run = a.embedder.as_deref().map(load_embedder_run).transpose()?;
    if let Some(r) = &emb_run {
        if r.record.config.units != UnitKind::Facts {
            return Err(Error::Input("the evaluation embedder must be pretrained on facts".into()));
        }
        cfg.upstream.insert("embedder".into(), r.record.config_hash.clone());
    }
    let catalog = match &emb_run {
        Some(r) => r.catalog.clone(),
        None => resolve_catalog(&cfg.catalog)?,
    };
    let (gen, gen_hash) = read_generations(&a.generations, a.force)?;
    let (gold, _) = ingest_narratives(&a.gold, &catalog)?;
    check_alignment(&gen, &gold)?;
    if let Some(h) = &gen_hash {
        cfg.upstream.insert("generations".into(), h.clone());
    }

    let vectors = a.vectors.as_deref().map(|p| VectorFile::load(p, catalog.clone())).transpose()?;
    let internal = emb_run
        .as_ref()
        .map(|r| InternalEmbedder { embedder: &r.embedder, vocab: &r.vocab, catalog: &r.catalog });
    let provider: Option<&dyn EmbeddingProvider> = match (&vectors, &internal) {
        (Some(v), _) => Some(v),
        (None, Some(i)) => Some(i),
        (None, None) => None,
    };
    let relevance_run = match cfg.metrics.scorer {
        ScorerChoice::Classifier => {
            let dir = a
                .relevance_model
                .as_deref()
                .ok_or_else(|| Error::Input("--scorer classifier needs --relevance-model".into()))?;
            let rec = read_run(dir)?;
            cfg.upstream.insert("relevance_model".into(), rec.config_hash.clone());
            Some((RelationClassifier::<f32>::load(&dir.join("relevance"))?, Vocabulary::load(&dir.join(VOCAB_FILE))?))
        }
        _ => None,
    };
    let file_scorer = match cfg.metrics.scorer {
        ScorerChoice::File => {
            let p = a.scores.as_deref().ok_or_else(|| Error::Input("--scorer file needs --scores".into()))?;
            Some(FileScorer::load(p, catalog.clone())?)
        }
        _ => None,
    };
    let overlap = OverlapScorer { catalog: catalog.clone() };
    let classifier_scorer = relevance_run.as_ref().map(|(clf, vocab)| ClassifierScorer {
        classifier: clf,
        vocab,
        catalog: &catalog,
        max_len: clf.config().max_len,
    });
    let scorer: &dyn RelevanceScorer = match (&file_scorer, &classifier_scorer) {
        (Some(f), _) => f,
        (None, Some(c)) => c,
        (None, None) => &overlap,
    };

    let gen_sets: Vec<Vec<FactTriple>> = gen.iter().map(|r| r.facts.clone()).collect();
    let gold_sets: Vec<Vec<FactTriple>> = gold.iter().map(|s| s.gold.facts().to_vec()).collect();
    let contexts: Vec<String> = gold.iter().map(|s| s.context.clone()).collect();
    let suite = SuiteConfig { geometries: cfg.metrics.geometry.geometries(), thresholds: cfg.metrics.thresholds.clone() };
    if suite.geometries.contains(&Geometry::Embedding) && provider.is_none() {
        return Err(Error::Input("the embedding geometry needs --embedder or --vectors".into()));
    }
    let geometries = evaluate_suite(&gen_sets, &gold_sets, &contexts, &suite, &catalog, provider, scorer)?;

    let mut report = MetricReport { geometries, generation_hash: gen_hash, ..Default::default() };
    if cfg.metrics.nlg {
        report.nlg = Some(nlg_scores(&gen_sets, &gold_sets, &catalog));
    }
    if cfg.metrics.webnlg {
        report.webnlg = Some(webnlg_scores(&gen_sets, &gold_sets));
    }
    if cfg.metrics.types {
        report.types = Some(knowledge_type_proportions(&gen_sets, &catalog));
    }
    if cfg.metrics.novelty {
        let provider = provider.ok_or_else(|| Error::Input("novelty needs --embedder or --vectors".into()))?;
        let pool: Vec<FactTriple> = match &a.reference_kg {
            Some(p) => ingest_kg(p, &catalog)?.0.into_facts(),
            None => KnowledgeSet::new(gold_sets.concat()).into_facts(),
        };
        let eps = match cfg.metrics.novelty_eps {
            Some(e) => e,
            None => {
                let feats = gold_sets
                    .iter()
                    .map(|g| Features::build(g, Geometry::Embedding, &catalog, Some(provider)))
                    .collect::<Result<Vec<_>>>()?;
                let range = auto_threshold_range(&feats, Geometry::Embedding);
                range.get(range.len() / 2).copied().unwrap_or(1.0)
            }
        };
        cfg.metrics.novelty_eps = Some(eps);
        report.novelty = Some(novelty(&gen_sets, &contexts, &pool, provider, scorer, eps)?);
    }
    report.config_hash = cfg.hash();
    create_dir(&a.out)?;
    write_text(&a.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_text(&a.out.join("report.md"), &report.to_markdown())?;
    write_run(&a.out, "evaluate", &cfg)?;
    for g in &report.geometries {
        let c = &g.corpus;
        say!(
            "{}: #facts {:.2} #clusters {:.2} relevance {} alignment {:.4} ra-f1 {:.4}",
            g.geometry.name(),
            c.n_facts,
            c.n_clusters,
            c.relevance.map_or("n/a".into(), |r| format!("{r:.4}")),
            c.alignment,
            c.ra_f1
        );
    }
    Ok(())
}

fn cmd_webnlg(mut cfg: RunConfig, a: WebNlgArgs) -> Result<()> {
    cfg.command = "webnlg-score".into();
    cfg.inputs.insert("generations".into(), path_str(&a.generations));
    cfg.inputs.insert("gold".into(), path_str(&a.gold));
    cfg.output = a.out.clone();
    cfg.catalog = a.catalog.unwrap_or_else(|| "open".into());
    let catalog = resolve_catalog(&cfg.catalog)?;
    let (gen, gen_hash) = read_generations(&a.generations, a.force)?;
    let (gold, _) = ingest_narratives(&a.gold, &catalog)?;
    check_alignment(&gen, &gold)?;
    if let Some(h) = gen_hash {
        cfg.upstream.insert("generations".into(), h);
    }
    let gen_sets: Vec<Vec<FactTriple>> = gen.into_iter().map(|r| r.facts).collect();
    let gold_sets: Vec<Vec<FactTriple>> = gold.iter().map(|s| s.gold.facts().to_vec()).collect();
    let scores = webnlg_scores(&gen_sets, &gold_sets);
    let body = serde_json::json!({ "config_hash": cfg.hash(), "scores": scores });
    let text = serde_json::to_string_pretty(&body)?;
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => say!("{text}"),
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let path = if a.path.is_dir() { a.path.join(crate::diffuser::SCHEDULE_FILE) } else { a.path.clone() };
    let sched = NoiseSchedule::load(&path)?;
    sched.validate()?;
    if a.json {
        say!("{}", serde_json::to_string(&sched.alpha_bar)?);
        return Ok(());
    }
    let t_max = sched.steps;
    let at: Vec<usize> = if a.at.is_empty() { (0..=4).map(|k| k * t_max / 4).collect() } else { a.at.clone() };
    if let Some(bad) = at.iter().find(|&&t| t > t_max) {
        return Err(Error::Input(format!("step {bad} exceeds T = {t_max}")));
    }
    say!(
        "T = {t_max}, offset = {}, amplification = {}, {} row(s){}",
        sched.offset,
        sched.amp,
        sched.n_rows(),
        if sched.is_shared() { " (shared)" } else { "" }
    );
    let mut header = String::from("t");
    for n in 0..sched.n_rows() {
        header.push_str(&format!("\tpos{n}"));
    }
    say!("{header}");
    for t in at {
        let mut line = t.to_string();
        for n in 0..sched.n_rows() {
            line.push_str(&format!("\t{:.6}", sched.alpha_bar(t, n)));
        }
        say!("{line}");
    }
    Ok(())
}
