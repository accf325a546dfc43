//! Command-line front end.
//!
//! Every subcommand resolves a [`RunConfig`] (defaults, then `--config`, then
//! flags), computes its artifacts in memory and writes them together with a
//! `manifest.json` recording the resolved configuration. `replay` reruns a
//! manifest into a fresh directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cw::{cw_generate_batch, CwConfig, CwMode};
use crate::dataset::{
    format_bursts, format_directions, generate_open_world, generate_synthetic, parse_bursts,
    parse_directions, preprocess, split_half, DatasetError, LabeledDataset, SyntheticSpec,
    TraceFormat,
};
use crate::defended::BatchResult;
use crate::detector::{accuracy, train, DetectorError, DetectorModel, TrainConfig};
use crate::evaluation::{
    eval_with_adv_training, eval_without_adv_training, intersection_attack, summarize_intersection,
    EvalError, IntersectionOutcome, IntersectionSummary, Scenario,
};
use crate::mockingbird::{generate_batch, GenError, GenerationConfig, TargetCase};
use crate::molding::{mold, read_events, verify_molding, write_events, MoldError, MoldingConfig};
use crate::trace::{directions_to_bursts, BurstTrace, TraceError, DEFAULT_BURST_LEN};

const EXIT_CODES: &str = "Exit codes:
  0  success
  2  command-line usage error
  3  invalid configuration (schema violation or out-of-range value)
  4  I/O error (missing input, unwritable or already existing output)
  5  malformed input data
  6  computation failed (a manifest with status \"failed\" is written)";

const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("input data: {0}")]
    Input(String),
    #[error("{0}")]
    Compute(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Input(_) => 5,
            CliError::Compute(_) => 6,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::InvalidConfig(m) => CliError::Config(m),
            e => CliError::Compute(e.to_string()),
        }
    }
}

impl From<DetectorError> for CliError {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::InvalidConfig(m) => CliError::Config(m),
            DetectorError::Format(m) => CliError::Input(m),
            e => CliError::Compute(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Detector(e) => e.into(),
            e => CliError::Compute(e.to_string()),
        }
    }
}

impl From<MoldError> for CliError {
    fn from(e: MoldError) -> Self {
        match e {
            MoldError::Parse { .. } => CliError::Input(e.to_string()),
            MoldError::InvalidInput(m) => CliError::Input(m),
            e => CliError::Compute(e.to_string()),
        }
    }
}

fn data_error(e: DatasetError) -> CliError {
    match e {
        DatasetError::InvalidSpec(m) => CliError::Config(m),
        DatasetError::ClassTooSmall { .. } => CliError::Compute(e.to_string()),
        e => CliError::Input(e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Mockingbird,
    Cw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Synth,
    Preprocess,
    Split,
    Train,
    Generate,
    Evaluate,
    Intersect,
    Mold,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    /// Output file of `preprocess`.
    pub output: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// JSON-lines generation report whose mean overhead goes into an evaluation.
    pub report: Option<PathBuf>,
    pub rounds: Vec<PathBuf>,
    pub trace: Option<PathBuf>,
    pub target: Option<PathBuf>,
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub paths: Paths,
    pub format: TraceFormat,
    pub fixed_len: usize,
    pub min_packets: usize,
    pub split_seed: u64,
    pub synthetic: SyntheticSpec,
    pub open_world_sites: usize,
    pub train: TrainConfig,
    pub attacker: TrainConfig,
    pub algo: Algo,
    pub generation: GenerationConfig,
    pub cw: CwConfig,
    pub scenario: Scenario,
    pub top_k: usize,
    pub molding: MoldingConfig,
    /// Line of the target file used by `mold`.
    pub target_index: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: None,
            paths: Paths::default(),
            format: TraceFormat::Bursts,
            fixed_len: DEFAULT_BURST_LEN,
            min_packets: 50,
            split_seed: 0,
            synthetic: SyntheticSpec::default(),
            open_world_sites: 0,
            train: TrainConfig::default(),
            attacker: TrainConfig::attacker_default(),
            algo: Algo::Mockingbird,
            generation: GenerationConfig::default(),
            cw: CwConfig::default(),
            scenario: Scenario::WithoutAdvTraining,
            top_k: 2,
            molding: MoldingConfig::default(),
            target_index: 0,
        }
    }
}

impl RunConfig {
    /// SHA-256 of the configuration without its output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        hex::encode(Sha256::digest(
            serde_json::to_vec(&c).expect("config serializes"),
        ))
    }

    fn seed_for(&self, command: Command) -> Option<u64> {
        match command {
            Command::Synth => Some(self.synthetic.seed),
            Command::Split => Some(self.split_seed),
            Command::Train => Some(self.train.seed),
            Command::Generate => Some(match self.algo {
                Algo::Mockingbird => self.generation.seed,
                Algo::Cw => self.cw.seed,
            }),
            Command::Evaluate => Some(self.attacker.seed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub version: String,
    pub command: Command,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub outputs: Vec<OutputRecord>,
    pub config: RunConfig,
}

#[derive(Parser, Debug)]
#[command(name = "mockingbird", version, about = "Adversarial burst-trace defense toolkit", after_help = EXIT_CODES)]
struct Cli {
    /// Worker threads for batch work (0 = all cores); results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Generate the seeded synthetic dataset and its adversarial/detector split
    Synth(SynthArgs),
    /// Drop short traces and traces starting with an incoming packet
    Preprocess(PreprocessArgs),
    /// Split a dataset per class into adversarial and detector halves
    Split(SplitArgs),
    /// Train a detector model
    Train(TrainArgs),
    /// Defend every trace of a dataset against a detector
    Generate(GenerateArgs),
    /// Top-k accuracy of an attacker trained with or without defended traces
    Evaluate(EvaluateArgs),
    /// Multi-round intersection attack over defended visits
    Intersect(IntersectArgs),
    /// Mold a packet event stream onto a target burst sequence
    Mold(MoldArgs),
    /// Rerun a manifest into a new output directory
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Also write this many unmonitored sites
    #[arg(long)]
    open_world_sites: Option<usize>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    min_packets: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    fixed_len: Option<usize>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    data_path: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Hidden layer widths, comma separated
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    arch: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Directions,
    Bursts,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(alias = "base_untargeted", alias = "base-untargeted")]
    Untargeted,
    #[value(alias = "base_targeted", alias = "base-targeted")]
    Targeted,
    #[value(alias = "hybrid_capped", alias = "hybrid-capped")]
    Hybrid,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CaseArg {
    #[value(name = "I", alias = "i", alias = "1")]
    One,
    #[value(name = "II", alias = "ii", alias = "2")]
    Two,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    #[value(alias = "without_adv_training")]
    Without,
    #[value(alias = "with_adv_training")]
    With,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    algo: Option<Algo>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Source traces to defend
    #[arg(long = "data")]
    data_path: Option<PathBuf>,
    /// Target pool traces (defaults to the source traces)
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    tau_d: Option<f64>,
    #[arg(long)]
    lambda: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_enum)]
    case: Option<CaseArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    max_overhead: Option<f64>,
    #[arg(long)]
    target_changes: Option<usize>,
    #[arg(long)]
    iters_per_target: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    /// Attacker training traces (undefended without adversarial training)
    #[arg(long)]
    train: Option<PathBuf>,
    /// Defended test traces
    #[arg(long)]
    test: Option<PathBuf>,
    /// Generation report for the mean overhead
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct IntersectArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// One defended dataset per round; line i of every file is user i
    #[arg(long, num_args = 1..)]
    rounds: Option<Vec<PathBuf>>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Debug)]
struct MoldArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    fixed_len: Option<usize>,
    /// JSON-lines packet events
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Bursts file holding the target sequence
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    target_index: Option<usize>,
    #[arg(long)]
    timeout_ms: Option<f64>,
    #[arg(long)]
    signal_overhead: Option<usize>,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl DataArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(
            &mut cfg.format,
            self.format.map(|f| match f {
                FormatArg::Directions => TraceFormat::Directions,
                FormatArg::Bursts => TraceFormat::Bursts,
            }),
        );
        set(&mut cfg.fixed_len, self.fixed_len);
    }
}

fn resolve(sub: Sub) -> Result<(Command, RunConfig), CliError> {
    let base = |c: &Common| -> Result<RunConfig, CliError> {
        let mut cfg = load_config(c.config.as_deref())?;
        set_opt(&mut cfg.output_dir, c.out_dir.clone());
        Ok(cfg)
    };
    Ok(match sub {
        Sub::Synth(a) => {
            let mut cfg = base(&a.common)?;
            set(&mut cfg.synthetic.classes, a.classes);
            set(&mut cfg.synthetic.instances_per_class, a.instances);
            set(&mut cfg.synthetic.seed, a.seed);
            set(&mut cfg.split_seed, a.split_seed);
            set(&mut cfg.open_world_sites, a.open_world_sites);
            (Command::Synth, cfg)
        }
        Sub::Preprocess(a) => {
            let mut cfg = load_config(a.config.as_deref())?;
            set_opt(&mut cfg.paths.input, a.input);
            set_opt(&mut cfg.paths.output, a.out);
            set(&mut cfg.min_packets, a.min_packets);
            if let Some(out) = &cfg.paths.output {
                let parent = out.parent().filter(|p| !p.as_os_str().is_empty());
                cfg.output_dir = Some(parent.map_or_else(|| PathBuf::from("."), Path::to_path_buf));
            }
            (Command::Preprocess, cfg)
        }
        Sub::Split(a) => {
            let mut cfg = base(&a.common)?;
            a.data.apply(&mut cfg);
            set_opt(&mut cfg.paths.input, a.input);
            set(&mut cfg.split_seed, a.seed);
            (Command::Split, cfg)
        }
        Sub::Train(a) => {
            let mut cfg = base(&a.common)?;
            a.data.apply(&mut cfg);
            set_opt(&mut cfg.paths.input, a.data_path);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.learning_rate, a.learning_rate);
            set(&mut cfg.train.hidden_dims, a.hidden);
            set(&mut cfg.train.seed, a.seed);
            set(&mut cfg.train.arch_id, a.arch);
            (Command::Train, cfg)
        }
        Sub::Generate(a) => {
            let mut cfg = base(&a.common)?;
            a.data.apply(&mut cfg);
            set(&mut cfg.algo, a.algo);
            set_opt(&mut cfg.paths.model, a.model);
            set_opt(&mut cfg.paths.input, a.data_path);
            set_opt(&mut cfg.paths.pool, a.pool);
            let g = &mut cfg.generation;
            set(&mut g.alpha, a.alpha);
            set(&mut g.tau_c, a.tau_c);
            set(&mut g.tau_d, a.tau_d);
            set(&mut g.lambda, a.lambda);
            set(&mut g.pool_size, a.pool_size);
            set(&mut g.max_iters, a.iters);
            set(
                &mut g.target_case,
                a.case.map(|c| match c {
                    CaseArg::One => TargetCase::CaseI,
                    CaseArg::Two => TargetCase::CaseII,
                }),
            );
            set(&mut g.seed, a.seed);
            let c = &mut cfg.cw;
            set(&mut c.seed, a.seed);
            set(&mut c.pool_size, a.pool_size);
            set(
                &mut c.mode,
                a.mode.map(|m| match m {
                    ModeArg::Untargeted => CwMode::BaseUntargeted,
                    ModeArg::Targeted => CwMode::BaseTargeted,
                    ModeArg::Hybrid => CwMode::HybridCapped,
                }),
            );
            set(&mut c.max_overhead, a.max_overhead);
            set(&mut c.max_target_changes, a.target_changes);
            set(&mut c.iters_per_target, a.iters_per_target);
            set(&mut c.step_size, a.step_size);
            set(&mut c.kappa, a.kappa);
            (Command::Generate, cfg)
        }
        Sub::Evaluate(a) => {
            let mut cfg = base(&a.common)?;
            a.data.apply(&mut cfg);
            set(
                &mut cfg.scenario,
                a.scenario.map(|s| match s {
                    ScenarioArg::Without => Scenario::WithoutAdvTraining,
                    ScenarioArg::With => Scenario::WithAdvTraining,
                }),
            );
            set_opt(&mut cfg.paths.train, a.train);
            set_opt(&mut cfg.paths.test, a.test);
            set_opt(&mut cfg.paths.report, a.report);
            set(&mut cfg.attacker.epochs, a.epochs);
            set(&mut cfg.attacker.hidden_dims, a.hidden);
            set(&mut cfg.attacker.seed, a.seed);
            (Command::Evaluate, cfg)
        }
        Sub::Intersect(a) => {
            let mut cfg = base(&a.common)?;
            a.data.apply(&mut cfg);
            set_opt(&mut cfg.paths.model, a.model);
            set(&mut cfg.paths.rounds, a.rounds);
            set(&mut cfg.top_k, a.k);
            (Command::Intersect, cfg)
        }
        Sub::Mold(a) => {
            let mut cfg = base(&a.common)?;
            set(&mut cfg.fixed_len, a.fixed_len);
            set_opt(&mut cfg.paths.trace, a.trace);
            set_opt(&mut cfg.paths.target, a.target);
            set(&mut cfg.target_index, a.target_index);
            set(&mut cfg.molding.timeout_ms, a.timeout_ms);
            set(&mut cfg.molding.signal_overhead, a.signal_overhead);
            (Command::Mold, cfg)
        }
        Sub::Replay(_) => unreachable!("replay is resolved from its manifest"),
    })
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("missing {what} path")))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_traces(path: &Path, cfg: &RunConfig) -> Result<LabeledDataset<BurstTrace<f64>>, CliError> {
    let text = read(path)?;
    let with_path = |e: DatasetError| CliError::Input(format!("{}: {e}", path.display()));
    match cfg.format {
        TraceFormat::Bursts => parse_bursts(&text, cfg.fixed_len, None).map_err(with_path),
        TraceFormat::Directions => {
            let ds = parse_directions(&text, None).map_err(with_path)?;
            let traces = ds
                .traces
                .iter()
                .map(|t| directions_to_bursts(t, cfg.fixed_len))
                .collect::<Result<Vec<_>, TraceError>>()
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            Ok(LabeledDataset::new(ds.classes, traces))
        }
    }
}

fn load_model(path: &Path) -> Result<DetectorModel<f64>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    DetectorModel::from_bytes(&bytes)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Sets the class count of `ds` to `classes` when its labels fit.
fn with_classes(
    mut ds: LabeledDataset<BurstTrace<f64>>,
    classes: usize,
    path: &Path,
) -> Result<LabeledDataset<BurstTrace<f64>>, CliError> {
    if ds.classes > classes {
        return Err(CliError::Input(format!(
            "{}: labels exceed the {classes} classes of the model",
            path.display()
        )));
    }
    ds.classes = classes;
    Ok(ds)
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

type Outputs = Vec<(String, Vec<u8>)>;

fn batch_outputs(batch: &BatchResult<f64>, classes: usize, mode: Option<&str>) -> Outputs {
    let mut report = Vec::new();
    for line in batch.report_lines(mode) {
        serde_json::to_writer(&mut report, &line).expect("report serializes");
        report.push(b'\n');
    }
    #[derive(Serialize)]
    struct Summary<'a> {
        summary: &'a crate::defended::BatchSummary,
        failures: &'a [(usize, String)],
    }
    vec![
        (
            "defended.bursts".into(),
            format_bursts(&batch.defended_dataset(classes)).into_bytes(),
        ),
        ("report.jsonl".into(), report),
        (
            "summary.json".into(),
            json(&Summary {
                summary: &batch.summary,
                failures: &batch.failures,
            }),
        ),
    ]
}

fn mean_overhead_from(path: &Path) -> Result<f64, CliError> {
    let text = read(path)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let r: crate::defended::ReportLine = serde_json::from_str(line)
            .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        sum += r.overhead;
        n += 1;
    }
    if n == 0 {
        return Err(CliError::Input(format!("{}: empty report", path.display())));
    }
    Ok(sum / n as f64)
}

/// Runs `command` and returns its artifacts, relative to the output directory.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<Outputs, CliError> {
    match command {
        Command::Synth => {
            let ds = generate_synthetic::<f64>(&cfg.synthetic).map_err(data_error)?;
            let split = split_half(&ds, cfg.split_seed).map_err(data_error)?;
            let mut out: Outputs = vec![
                ("synthetic.bursts".into(), format_bursts(&ds).into_bytes()),
                (
                    "adv_set.bursts".into(),
                    format_bursts(&split.adv_set).into_bytes(),
                ),
                (
                    "detector_set.bursts".into(),
                    format_bursts(&split.detector_set).into_bytes(),
                ),
            ];
            if cfg.open_world_sites > 0 {
                let ow = generate_open_world::<f64>(&cfg.synthetic, cfg.open_world_sites)
                    .map_err(data_error)?;
                out.push(("open_world.bursts".into(), format_bursts(&ow).into_bytes()));
            }
            Ok(out)
        }
        Command::Preprocess => {
            let input = required(&cfg.paths.input, "input")?;
            let output = required(&cfg.paths.output, "output")?;
            let name = output
                .file_name()
                .ok_or_else(|| CliError::Config("output must name a file".into()))?
                .to_string_lossy()
                .into_owned();
            let raw = parse_directions(&read(input)?, None)
                .map_err(|e| CliError::Input(format!("{}: {e}", input.display())))?;
            let (kept, report) = preprocess(&raw, cfg.min_packets);
            Ok(vec![
                (name.clone(), format_directions(&kept).into_bytes()),
                (format!("{name}.report.json"), json(&report)),
            ])
        }
        Command::Split => {
            let input = required(&cfg.paths.input, "input")?;
            let ds = load_traces(input, cfg)?;
            let split = split_half(&ds, cfg.split_seed).map_err(data_error)?;
            Ok(vec![
                (
                    "adv_set.bursts".into(),
                    format_bursts(&split.adv_set).into_bytes(),
                ),
                (
                    "detector_set.bursts".into(),
                    format_bursts(&split.detector_set).into_bytes(),
                ),
            ])
        }
        Command::Train => {
            let input = required(&cfg.paths.input, "training data")?;
            let ds = load_traces(input, cfg)?;
            let model = train(&ds, &cfg.train)?;
            #[derive(Serialize)]
            struct TrainReport<'a> {
                arch_id: &'a str,
                layer_dims: &'a [usize],
                parameters: usize,
                normalization_scale: f64,
                training_examples: usize,
                training_accuracy: f64,
            }
            let report = TrainReport {
                arch_id: model.arch_id(),
                layer_dims: model.layer_dims(),
                parameters: model.parameter_count(),
                normalization_scale: model.normalization_scale(),
                training_examples: ds.len(),
                training_accuracy: accuracy(&model, &ds)?,
            };
            let report = json(&report);
            Ok(vec![
                ("model.mbdm".into(), model.to_bytes()),
                ("train_report.json".into(), report),
            ])
        }
        Command::Generate => {
            let model_path = required(&cfg.paths.model, "model")?;
            let input = required(&cfg.paths.input, "source data")?;
            let model = load_model(model_path)?;
            let classes = model.classes();
            let sources = with_classes(load_traces(input, cfg)?, classes, input)?;
            let pool = match &cfg.paths.pool {
                Some(p) => load_traces(p, cfg)?,
                None => sources.clone(),
            };
            let (batch, mode) = match cfg.algo {
                Algo::Mockingbird => (
                    generate_batch(&sources, &model, &pool, &cfg.generation)?,
                    None,
                ),
                Algo::Cw => (
                    cw_generate_batch(&sources, &model, &pool, &cfg.cw)?,
                    Some(cfg.cw.mode.as_str()),
                ),
            };
            Ok(batch_outputs(&batch, classes, mode))
        }
        Command::Evaluate => {
            let train_path = required(&cfg.paths.train, "train")?;
            let test_path = required(&cfg.paths.test, "test")?;
            let train_set = load_traces(train_path, cfg)?;
            let test_set = load_traces(test_path, cfg)?;
            let classes = train_set.classes.max(test_set.classes);
            let train_set = with_classes(train_set, classes, train_path)?;
            let test_set = with_classes(test_set, classes, test_path)?;
            let overhead = cfg
                .paths
                .report
                .as_deref()
                .map(mean_overhead_from)
                .transpose()?;
            let (report, _) = match cfg.scenario {
                Scenario::WithoutAdvTraining => {
                    eval_without_adv_training(&train_set, &test_set, &cfg.attacker, overhead)?
                }
                Scenario::WithAdvTraining => {
                    eval_with_adv_training(&train_set, &test_set, &cfg.attacker, overhead)?
                }
            };
            Ok(vec![
                ("eval_report.json".into(), json(&report)),
                ("topk.csv".into(), report.top_k_csv().into_bytes()),
            ])
        }
        Command::Intersect => {
            let model = load_model(required(&cfg.paths.model, "model")?)?;
            if cfg.paths.rounds.is_empty() {
                return Err(CliError::Config("missing rounds".into()));
            }
            let rounds = cfg
                .paths
                .rounds
                .iter()
                .map(|p| load_traces(p, cfg))
                .collect::<Result<Vec<_>, _>>()?;
            let users = rounds[0].len();
            if rounds.iter().any(|r| r.len() != users) {
                return Err(CliError::Input("round files differ in length".into()));
            }
            #[derive(Serialize)]
            struct User {
                index: usize,
                label: usize,
                outcome: IntersectionOutcome,
                sizes: Vec<usize>,
            }
            #[derive(Serialize)]
            struct Report {
                k: usize,
                rounds: usize,
                summary: IntersectionSummary,
                users: Vec<User>,
            }
            let mut per_user = Vec::with_capacity(users);
            for i in 0..users {
                let visits: Vec<BurstTrace<f64>> =
                    rounds.iter().map(|r| r.traces[i].clone()).collect();
                let (outcome, sizes) = intersection_attack(&model, &visits, cfg.top_k)?;
                per_user.push(User {
                    index: i,
                    label: visits[0].label,
                    outcome,
                    sizes,
                });
            }
            let outcomes: Vec<IntersectionOutcome> = per_user.iter().map(|u| u.outcome).collect();
            let report = Report {
                k: cfg.top_k,
                rounds: rounds.len(),
                summary: summarize_intersection(&outcomes)?,
                users: per_user,
            };
            Ok(vec![("intersection.json".into(), json(&report))])
        }
        Command::Mold => {
            let trace_path = required(&cfg.paths.trace, "trace")?;
            let target_path = required(&cfg.paths.target, "target")?;
            let real = read_events(read(trace_path)?.as_bytes())
                .map_err(|e| CliError::Input(format!("{}: {e}", trace_path.display())))?;
            let targets = parse_bursts::<f64>(&read(target_path)?, cfg.fixed_len, None)
                .map_err(|e| CliError::Input(format!("{}: {e}", target_path.display())))?;
            let target = targets.traces.get(cfg.target_index).ok_or_else(|| {
                CliError::Input(format!(
                    "{}: no trace at index {}",
                    target_path.display(),
                    cfg.target_index
                ))
            })?;
            let result = mold(&real, target, &cfg.molding)?;
            let mut events = Vec::new();
            write_events(&mut events, &result.events)?;
            let report: BTreeMap<&str, serde_json::Value> = [
                ("added_latency_ms", result.added_latency_ms.into()),
                ("dummy_count", result.dummy_count.into()),
                ("closed_bursts", result.closed_bursts.into()),
                ("piggybacked_signals", result.piggybacked_signals.into()),
                ("packets", result.events.len().into()),
                (
                    "verified",
                    verify_molding(&real, &result.events, target).into(),
                ),
            ]
            .into_iter()
            .collect();
            Ok(vec![
                ("molded.jsonl".into(), events),
                ("mold_report.json".into(), json(&report)),
            ])
        }
    }
}

fn manifest_name(command: Command, cfg: &RunConfig) -> String {
    match (
        command,
        cfg.paths.output.as_ref().and_then(|p| p.file_name()),
    ) {
        (Command::Preprocess, Some(name)) => format!("{}.manifest.json", name.to_string_lossy()),
        _ => "manifest.json".into(),
    }
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    let dest = dir.join(name);
    fs::rename(&tmp, &dest).map_err(|e| CliError::io(&dest, e))
}

fn manifest(
    command: Command,
    cfg: &RunConfig,
    outputs: &Outputs,
    error: Option<String>,
) -> Manifest {
    Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION").into(),
        command,
        status: if error.is_some() { "failed" } else { "ok" }.into(),
        error,
        config_hash: cfg.hash(),
        seed: cfg.seed_for(command),
        outputs: outputs
            .iter()
            .map(|(name, bytes)| OutputRecord {
                name: name.clone(),
                sha256: hex::encode(Sha256::digest(bytes)),
            })
            .collect(),
        config: cfg.clone(),
    }
}

/// Executes and writes the artifacts plus manifest. Input and configuration
/// errors leave nothing on disk; computation failures leave a failed manifest.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Manifest, CliError> {
    let dir = cfg
        .output_dir
        .clone()
        .ok_or_else(|| CliError::Config("missing output directory".into()))?;
    let result = execute(command, cfg);
    let outputs = match result {
        Ok(outputs) => outputs,
        Err(CliError::Compute(msg)) => {
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            let m = manifest(command, cfg, &Vec::new(), Some(msg.clone()));
            write_atomic(&dir, &manifest_name(command, cfg), &json(&m))?;
            return Err(CliError::Compute(msg));
        }
        Err(e) => return Err(e),
    };
    let m = manifest(command, cfg, &outputs, None);
    let mname = manifest_name(command, cfg);
    for name in outputs.iter().map(|(n, _)| n).chain([&mname]) {
        let p = dir.join(name);
        if p.exists() {
            return Err(CliError::io(
                &p,
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "refusing to overwrite"),
            ));
        }
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    for (name, bytes) in &outputs {
        write_atomic(&dir, name, bytes)?;
    }
    write_atomic(&dir, &mname, &json(&m))?;
    Ok(m)
}

fn replay(args: ReplayArgs) -> Result<Manifest, CliError> {
    let text = read(&args.manifest)?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.manifest.display())))?;
    let mut cfg = m.config;
    cfg.output_dir = Some(args.out_dir);
    run(m.command, &cfg)
}

/// Entry point of the `mockingbird` binary.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    let outcome = pool.install(|| match cli.command {
        Sub::Replay(args) => replay(args),
        sub => resolve(sub).and_then(|(command, cfg)| run(command, &cfg)),
    });
    match outcome {
        Ok(m) => {
            eprintln!(
                "{} ok, {} output(s)",
                serde_json::to_string(&m.command).unwrap_or_default(),
                m.outputs.len()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
