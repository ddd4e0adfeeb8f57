//! Command-line front end: dataset generation, training, evaluation, scoring
//! and attention dumps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{self, generate_corpus, read_dataset, write_dataset, Dataset, DatasetManifest, Split, EOS};
use crate::error::{Error, Result};
use crate::geometry::GridLayout;
use crate::metrics::{corpus_bleu, sentence_bleu, tokenize, CiderScorer, CorpusStats, MAX_N};
use crate::model::{CrossMode, Dlct, FeatureMode, ForwardCtx, ModelConfig, PositionMode, Sublayer, Variant};
use crate::numerics::io::write_tensor;
use crate::numerics::{Tape, Tensor};
use crate::training::{
    self, config_hash, decode_example, evaluate, load_checkpoint, shift_right, thread_count, PhaseSelection, TrainConfig,
    TrainOptions, Trainer,
};

#[derive(Debug, Parser)]
#[command(name = "dlct", version, about = "Dual-level collaborative transformer for image captioning")]
pub struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration, or the name of a preset (`desk`, `reference`).
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Pretty-print results instead of one JSON object per line.
    #[arg(long, global = true)]
    pub human: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
    /// Train a model (cross-entropy, then self-critical fine-tuning).
    Train(TrainArgs),
    /// Decode a split with beam search and report BLEU and CIDEr-D.
    Eval(EvalArgs),
    /// Score a candidate file against a tab-separated reference file.
    Score(ScoreArgs),
    /// Dump attention weights for one example.
    DumpAttention(DumpArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Grid layout such as `4x4`; defaults to the preset's layout.
    #[arg(long)]
    pub grid: Option<GridLayout>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub phase: Option<PhaseArg>,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Validation examples scored after each epoch.
    #[arg(long)]
    pub val_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: Split,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// One candidate caption per line.
    #[arg(long)]
    pub candidates: PathBuf,
    /// One line per candidate with tab-separated references.
    #[arg(long)]
    pub references: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Example index within the split.
    #[arg(long)]
    pub example: usize,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Also run the color-word alignment probe over this many examples.
    #[arg(long)]
    pub probe: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseArg {
    Xe,
    Scst,
    Both,
}

impl From<PhaseArg> for PhaseSelection {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Xe => PhaseSelection::Xe,
            PhaseArg::Scst => PhaseSelection::Scst,
            PhaseArg::Both => PhaseSelection::Both,
        }
    }
}

/// Architecture ablations, each a runtime switch over the one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoLcca,
    Cbg,
    GridOnly,
    RegionOnly,
    Concat,
    NoCra,
    PeOnly,
}

impl Ablation {
    pub fn flag(self) -> &'static str {
        match self {
            Ablation::NoLcca => "no-lcca",
            Ablation::Cbg => "cbg",
            Ablation::GridOnly => "grid-only",
            Ablation::RegionOnly => "region-only",
            Ablation::Concat => "concat",
            Ablation::NoCra => "no-cra",
            Ablation::PeOnly => "pe-only",
        }
    }
}

/// Applies ablation flags to `base`, rejecting contradictory combinations.
pub fn apply_ablations(base: Variant, flags: &[Ablation]) -> Result<Variant> {
    let mut v = base;
    let (mut features, mut cross, mut position) = (None, None, None);
    let set = |slot: &mut Option<Ablation>, a: Ablation| match slot {
        Some(prev) if *prev != a => Err(Error::Config(format!("ablations {} and {} are mutually exclusive", prev.flag(), a.flag()))),
        _ => {
            *slot = Some(a);
            Ok(())
        }
    };
    for &a in flags {
        match a {
            Ablation::GridOnly | Ablation::RegionOnly | Ablation::Concat => set(&mut features, a)?,
            Ablation::NoLcca | Ablation::Cbg => set(&mut cross, a)?,
            Ablation::NoCra | Ablation::PeOnly => set(&mut position, a)?,
        }
    }
    if let (Some(f), Some(c)) = (features, cross) {
        return Err(Error::Config(format!("ablation {} needs both feature streams, which {} removes", c.flag(), f.flag())));
    }
    match features {
        Some(Ablation::GridOnly) => v.features = FeatureMode::GridOnly,
        Some(Ablation::RegionOnly) => v.features = FeatureMode::RegionOnly,
        Some(Ablation::Concat) => v.features = FeatureMode::Concat,
        _ => {}
    }
    match cross {
        Some(Ablation::NoLcca) => v.cross = CrossMode::NoLcca,
        Some(Ablation::Cbg) => v.cross = CrossMode::Cbg,
        _ => {}
    }
    match position {
        Some(Ablation::NoCra) => v.position = PositionMode::NoCra,
        Some(Ablation::PeOnly) => v.position = PositionMode::PeOnly,
        _ => {}
    }
    v.validate()?;
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Reference,
}

/// Everything a run needs besides its input files; the `train` command
/// writes the resolved form to `run.toml` in its output directory, and
/// passing that file back through `--config` replays the run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub preset: Preset,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub phase: PhaseSelection,
    pub ablate: Vec<Ablation>,
    pub val_limit: Option<usize>,
    /// Overrides of model configuration fields.
    pub model: toml::Table,
    /// Overrides of training configuration fields.
    pub train: toml::Table,
}

impl RunConfig {
    /// Reads `--config`: a preset name unless a file of that name exists.
    pub fn load(arg: Option<&str>) -> Result<Self> {
        let Some(arg) = arg else { return Ok(Self::default()) };
        let path = Path::new(arg);
        if !path.exists() {
            return match arg {
                "desk" => Ok(Self { preset: Preset::Desk, ..Self::default() }),
                "reference" => Ok(Self { preset: Preset::Reference, ..Self::default() }),
                _ => Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such config file or preset"))),
            };
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.message()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let base = match self.preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Reference => TrainConfig::reference(),
        };
        let cfg: TrainConfig = overlay(&base, &self.train)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model configuration for a dataset: the preset sized to the dataset,
    /// then field overrides, then ablation flags.
    pub fn model_config(&self, data: &DatasetManifest) -> Result<ModelConfig> {
        let vocab = data.vocab.len();
        let mut base = match self.preset {
            Preset::Desk => ModelConfig::desk(vocab),
            Preset::Reference => ModelConfig::reference(vocab),
        };
        base.grid = data.layout.parse().map_err(|e| Error::Config(format!("dataset layout: {e}")))?;
        base.region_dim = data.region_dim;
        base.grid_dim = data.grid_dim;
        let mut cfg: ModelConfig = overlay(&base, &self.model)?;
        cfg.variant = apply_ablations(cfg.variant, &self.ablate)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn default_grid(&self) -> Result<GridLayout> {
        let base = match self.preset {
            Preset::Desk => ModelConfig::desk(1),
            Preset::Reference => ModelConfig::reference(1),
        };
        Ok(overlay::<ModelConfig>(&base, &self.model)?.grid)
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// `base` with the fields named in `over` replaced.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, over: &toml::Table) -> Result<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut table, over);
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

fn table_of<T: Serialize>(value: &T) -> toml::Table {
    toml::Table::try_from(value).expect("configs serialize to tables")
}

/// Result sink: JSON lines, or `key: value` text with `--human`.
struct Output<'a> {
    human: bool,
    w: &'a mut dyn Write,
}

impl Output<'_> {
    fn emit(&mut self, v: Value) -> Result<()> {
        let text = if self.human { human(&v, 0) } else { v.to_string() };
        writeln!(self.w, "{text}").map_err(|e| Error::io("<stdout>", e))
    }
}

fn human(v: &Value, indent: usize) -> String {
    let pad = "  ".repeat(indent);
    match v {
        Value::Object(map) => map
            .iter()
            .map(|(k, x)| match x {
                Value::Object(_) => format!("{pad}{k}:\n{}", human(x, indent + 1)),
                Value::Number(n) if n.is_f64() => format!("{pad}{k}: {:.4}", n.as_f64().unwrap_or(f64::NAN)),
                Value::String(s) => format!("{pad}{k}: {s}"),
                other => format!("{pad}{k}: {other}"),
            })
            .collect::<Vec<_>>()
            .join("\n"),
        other => format!("{pad}{other}"),
    }
}

/// Parses `args` (program name first) and runs the command, writing results to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(out, "{e}").map_err(|e| CliError::from(Error::io("<stdout>", e)))?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string().lines().next().unwrap_or("invalid arguments").to_string())),
    };
    execute(cli, out).map_err(CliError::from)
}

/// Failure of a CLI invocation, printable as one JSON line.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Run(e) => match e {
                Error::Numerics(_) => "numerics",
                Error::Geometry(_) => "geometry",
                Error::TensorIo(_) => "tensor_io",
                Error::Data(_) => "data",
                Error::Metrics(_) => "metrics",
                Error::EmptyNeighborhood(_) => "numerics",
                Error::Config(_) => "config",
                Error::Checkpoint(_) => "checkpoint",
                Error::Io { .. } => "io",
                Error::Parse { .. } => "parse",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `{"error":{"kind":..,"message":..}}` on one line.
    pub fn to_json_line(&self) -> String {
        let message = self.to_string().replace('\n', " ");
        json!({"error": {"kind": self.kind(), "message": message}}).to_string()
    }
}

fn execute(cli: Cli, w: &mut dyn Write) -> Result<()> {
    let mut run = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        run.seed = seed;
    }
    if cli.out.is_some() {
        run.out = cli.out.clone();
    }
    let mut out = Output { human: cli.human, w };
    match cli.command {
        Command::GenData(a) => gen_data(&run, a, &mut out),
        Command::Train(a) => train(run, a, &mut out),
        Command::Eval(a) => eval(run, a, cli.config.is_some(), &mut out),
        Command::Score(a) => score(a, &mut out),
        Command::DumpAttention(a) => dump_attention(run, a, &mut out),
    }
}

fn require_out(run: &RunConfig) -> Result<PathBuf> {
    run.out.clone().ok_or_else(|| Error::Config("--out is required".into()))
}

fn data_dir(run: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| run.data.clone()).ok_or_else(|| Error::Config("--data is required".into()))
}

fn gen_data(run: &RunConfig, a: GenDataArgs, out: &mut Output) -> Result<()> {
    let dir = require_out(run)?;
    let grid = match a.grid {
        Some(g) => g,
        None => run.default_grid()?,
    };
    let data = generate_corpus(a.n, run.seed, grid)?;
    write_dataset(&dir, &data)?;
    let m = &data.manifest;
    out.emit(json!({
        "command": "gen-data",
        "out": dir.display().to_string(),
        "seed": m.seed,
        "layout": m.layout,
        "train": m.counts.train,
        "val": m.counts.val,
        "test": m.counts.test,
        "vocab": m.vocab.len(),
    }))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    if !dir.exists() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    Ok(read_dataset(dir)?)
}

fn train(mut run: RunConfig, a: TrainArgs, out: &mut Output) -> Result<()> {
    let dir = require_out(&run)?;
    run.data = Some(data_dir(&run, a.data)?);
    if let Some(p) = a.phase {
        run.phase = p.into();
    }
    if !a.ablate.is_empty() {
        run.ablate = a.ablate;
    }
    if a.val_limit.is_some() {
        run.val_limit = a.val_limit;
    }
    let data = load_data(run.data.as_deref().expect("set above"))?;
    let model_cfg = run.model_config(&data.manifest)?;
    let train_cfg = run.train_config()?;

    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let c = load_checkpoint(ckpt)?;
            if c.manifest.config_hash != config_hash(&model_cfg) {
                return Err(Error::Checkpoint(format!("{}: checkpoint was trained with a different model config", ckpt.display())));
            }
            Trainer::from_checkpoint(c)?
        }
        None => Trainer::new(Dlct::new(model_cfg.clone(), run.seed)?, train_cfg.clone(), run.seed)?,
    };
    trainer.set_threads(thread_count())?;

    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let resolved = RunConfig {
        command: Some("train".into()),
        model: table_of(&model_cfg),
        train: table_of(trainer.config()),
        ablate: Vec::new(),
        ..run.clone()
    };
    let manifest = dir.join("run.toml");
    let text = toml::to_string(&resolved).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;

    let opts = TrainOptions { phases: run.phase, out_dir: Some(dir.clone()), val_limit: run.val_limit };
    let records = training::train(&mut trainer, &data, &opts)?;
    for r in &records {
        out.emit(serde_json::to_value(r).expect("record serializes"))?;
    }
    let p = trainer.progress();
    out.emit(json!({
        "command": "train",
        "out": dir.display().to_string(),
        "phase": p.phase.name(),
        "epoch": p.epoch,
        "steps": p.step,
        "parameters": trainer.model().params().scalar_count(),
        "config_hash": config_hash(trainer.model().config()),
    }))
}

/// Model from a checkpoint, checked against the dataset and, when the caller
/// states one, an expected configuration.
fn checkpoint_model(ckpt: &Path, data: &Dataset, expected: Option<&ModelConfig>) -> Result<Dlct> {
    let c = load_checkpoint(ckpt)?;
    if let Some(exp) = expected {
        if config_hash(exp) != c.manifest.config_hash {
            return Err(Error::Checkpoint(format!(
                "{}: config hash {} does not match requested {}",
                ckpt.display(),
                &c.manifest.config_hash[..12],
                &config_hash(exp)[..12]
            )));
        }
    }
    let m = &c.manifest.model;
    let d = &data.manifest;
    if m.vocab_size != d.vocab.len() || m.grid.to_string() != d.layout || m.region_dim != d.region_dim || m.grid_dim != d.grid_dim {
        return Err(Error::Checkpoint(format!("{}: checkpoint does not fit the dataset", ckpt.display())));
    }
    Dlct::from_params(c.manifest.model.clone(), c.params)
}

fn eval(run: RunConfig, a: EvalArgs, explicit_config: bool, out: &mut Output) -> Result<()> {
    let data = load_data(&data_dir(&run, a.data)?)?;
    let run = RunConfig { ablate: if a.ablate.is_empty() { run.ablate } else { a.ablate }, ..run };
    let expected = if explicit_config || !run.ablate.is_empty() { Some(run.model_config(&data.manifest)?) } else { None };
    let model = checkpoint_model(&a.checkpoint, &data, expected.as_ref())?;
    let split = data.split(a.split);
    let examples = &split[..a.limit.unwrap_or(split.len()).min(split.len())];
    let report = evaluate(&model, examples, &data.vocab()?, a.beam, thread_count())?;
    let v = json!({
        "command": "eval",
        "split": a.split.name(),
        "examples": examples.len(),
        "beam": a.beam,
        "bleu1": report.bleu[0],
        "bleu4": report.bleu[3],
        "cider_d": report.cider_d,
        "loss": report.loss,
        "log_prob": report.log_prob,
    });
    if let Some(dir) = &run.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("eval.jsonl");
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{v}").map_err(|e| Error::io(&path, e))?;
    }
    out.emit(v)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn score(a: ScoreArgs, out: &mut Output) -> Result<()> {
    let cands: Vec<Vec<String>> = read_lines(&a.candidates)?.iter().map(|l| tokenize(l)).collect();
    let refs: Vec<Vec<Vec<String>>> = read_lines(&a.references)?
        .iter()
        .map(|l| l.split('\t').map(tokenize).filter(|r| !r.is_empty()).collect())
        .collect();
    if cands.len() != refs.len() {
        return Err(Error::parse(&a.references, format!("{} reference lines for {} candidates", refs.len(), cands.len())));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::parse(&a.references, format!("line {} has no references", i + 1)));
    }
    let scorer = CiderScorer::new(CorpusStats::build(&refs)?);
    let (cider, each) = scorer.corpus(&cands, &refs)?;
    for (i, (c, r)) in cands.iter().zip(&refs).enumerate() {
        out.emit(json!({"line": i + 1, "cider_d": each[i], "bleu4": sentence_bleu(c, r, MAX_N)?}))?;
    }
    let bleu = corpus_bleu(&cands, &refs, MAX_N)?;
    out.emit(json!({
        "command": "score",
        "lines": cands.len(),
        "cider_d": cider,
        "bleu1": bleu[0],
        "bleu2": bleu[1],
        "bleu3": bleu[2],
        "bleu4": bleu[3],
    }))
}

/// Attention records of one teacher-forced pass over a generated caption.
struct AttentionDump {
    /// Generated tokens, ending with the end marker when produced.
    tokens: Vec<usize>,
    records: Vec<crate::model::AttentionRecord>,
}

fn record_attention(model: &Dlct, bundle: &data::FeatureBundle, beam: usize) -> Result<AttentionDump> {
    let decoded = decode_example(model, bundle, beam)?;
    let tokens = decoded.sequences[0].clone();
    let (inputs, _) = shift_right(&[tokens.as_slice()]);
    let mut tape = Tape::new();
    let b = model.params().bind(&mut tape, false);
    let mut ctx = ForwardCtx::recording();
    let memory = model.encode(&mut tape, &b, bundle, &mut ctx)?;
    model.decode(&mut tape, &b, memory, &inputs, &mut ctx)?;
    Ok(AttentionDump { tokens, records: ctx.records.unwrap_or_default() })
}

/// `[heads, rows, cols]` view of a record, dropping the decoder batch axis.
fn per_head(w: &Tensor) -> (usize, usize, usize) {
    let s = w.shape();
    let s = &s[s.len() - 3..];
    (s[0], s[1], s[2])
}

/// Columns `[lo, hi)` of head `h`.
fn head_block(w: &Tensor, h: usize, lo: usize, hi: usize) -> Tensor {
    let (_, rows, cols) = per_head(w);
    let base = h * rows * cols;
    let data = (0..rows).flat_map(|r| w.data()[base + r * cols + lo..base + r * cols + hi].iter().copied()).collect();
    Tensor::new(vec![rows, hi - lo], data).expect("sized")
}

/// Head-averaged last-layer cross-attention `[words, memory]`.
fn last_layer_cross(dump: &AttentionDump) -> Option<Vec<Vec<f64>>> {
    let rec = dump.records.iter().filter(|r| r.sublayer == Sublayer::DecCross).max_by_key(|r| r.layer)?;
    let (heads, rows, cols) = per_head(&rec.weights);
    let w = rec.weights.data();
    Some((0..rows).map(|r| (0..cols).map(|c| (0..heads).map(|h| w[(h * rows + r) * cols + c]).sum::<f64>() / heads as f64).collect()).collect())
}

fn dump_attention(run: RunConfig, a: DumpArgs, out: &mut Output) -> Result<()> {
    let dir = require_out(&run)?;
    let data = load_data(&data_dir(&run, a.data)?)?;
    let model = checkpoint_model(&a.checkpoint, &data, None)?;
    let vocab = data.vocab()?;
    let split = data.split(a.split);
    let ex = split.get(a.example).ok_or_else(|| {
        Error::Config(format!("example {} out of range for {} split of {}", a.example, a.split.name(), split.len()))
    })?;
    let n_regions = match model.config().variant.features {
        FeatureMode::GridOnly => 0,
        _ => ex.features.n_regions(),
    };
    let dump = record_attention(&model, &ex.features, a.beam)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = format!("attention-{}-{}", a.split.name(), a.example);
    let bin_path = dir.join(format!("{stem}.dlt"));
    let idx_path = dir.join(format!("{stem}.idx"));
    let mut bin = Vec::new();
    let mut idx = String::from("record\tlayer\tsublayer\thead\tblock\trows\tcols\n");
    let mut count = 0;
    for rec in &dump.records {
        if rec.sublayer == Sublayer::DecSelf {
            continue;
        }
        let (heads, _, cols) = per_head(&rec.weights);
        let blocks: Vec<(&str, usize, usize)> = if rec.sublayer == Sublayer::DecCross && n_regions > 0 && n_regions < cols {
            vec![("all", 0, cols), ("region", 0, n_regions), ("grid", n_regions, cols)]
        } else {
            vec![("all", 0, cols)]
        };
        for h in 0..heads {
            for &(name, lo, hi) in &blocks {
                let t = head_block(&rec.weights, h, lo, hi);
                write_tensor(&mut bin, &t)?;
                idx.push_str(&format!("{count}\t{}\t{}\t{h}\t{name}\t{}\t{}\n", rec.layer, rec.sublayer.name(), t.shape()[0], t.shape()[1]));
                count += 1;
            }
        }
    }
    fs::write(&bin_path, &bin).map_err(|e| Error::io(&bin_path, e))?;
    fs::write(&idx_path, idx).map_err(|e| Error::io(&idx_path, e))?;

    let words: Vec<String> = dump.tokens.iter().map(|&t| vocab.word(t).unwrap_or("?").to_string()).collect();
    let mut report = format!("example {} ({} split)\ncaption: {}\n", a.example, a.split.name(), vocab.decode(&dump.tokens).join(" "));
    let cross = last_layer_cross(&dump);
    if let (Some(cross), true) = (&cross, n_regions > 0) {
        report.push_str("top regions per word (last decoder layer, head average):\n");
        for (t, word) in words.iter().enumerate() {
            if dump.tokens[t] == EOS {
                break;
            }
            let top = top_regions(&cross[t][..n_regions], 3);
            let cells: Vec<String> = top
                .iter()
                .map(|&(r, w)| {
                    let row = &ex.features.regions.data()[r * ex.features.region_dim()..(r + 1) * ex.features.region_dim()];
                    let color = if row.len() >= 7 { format!(" {}", data::region_color(row).word()) } else { String::new() };
                    format!("region {r}{color} ({w:.3})")
                })
                .collect();
            report.push_str(&format!("{word}\t{}\n", cells.join(", ")));
        }
    }
    let report_path = dir.join(format!("{stem}.txt"));
    fs::write(&report_path, &report).map_err(|e| Error::io(&report_path, e))?;

    let mut v = json!({
        "command": "dump-attention",
        "example": a.example,
        "split": a.split.name(),
        "caption": vocab.decode(&dump.tokens).join(" "),
        "records": count,
        "dump": bin_path.display().to_string(),
        "index": idx_path.display().to_string(),
        "report": report_path.display().to_string(),
    });
    if let Some(n) = a.probe {
        let (hits, total) = color_probe(&model, &split[..n.min(split.len())], &vocab, a.beam)?;
        v["probe"] = json!({"examples": n.min(split.len()), "color_words": total, "aligned": hits,
            "fraction": if total == 0 { 0.0 } else { hits as f64 / total as f64 }});
    }
    out.emit(v)
}

/// The `n` highest-weighted regions, ties to the lower index.
fn top_regions(weights: &[f64], n: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<(usize, f64)> = weights.iter().copied().enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.truncate(n);
    order
}

/// Counts generated color words whose most attended region has that color.
pub fn color_probe(model: &Dlct, examples: &[data::TrainExample], vocab: &data::Vocab, beam: usize) -> Result<(usize, usize)> {
    if model.config().variant.features == FeatureMode::GridOnly {
        return Ok((0, 0));
    }
    let (mut hits, mut total) = (0, 0);
    for ex in examples {
        let dump = record_attention(model, &ex.features, beam)?;
        let Some(cross) = last_layer_cross(&dump) else { continue };
        let n = ex.features.n_regions();
        let dim = ex.features.region_dim();
        for (t, &tok) in dump.tokens.iter().enumerate() {
            let Some(word) = vocab.word(tok) else { continue };
            let Some(color) = data::Color::ALL.iter().find(|c| c.word() == word) else { continue };
            total += 1;
            let best = top_regions(&cross[t][..n], 1)[0].0;
            if data::region_color(&ex.features.regions.data()[best * dim..(best + 1) * dim]) == *color {
                hits += 1;
            }
        }
    }
    Ok((hits, total))
}
