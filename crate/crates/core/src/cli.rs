//! Command implementations behind the `taskgrasp` binary.
//!
//! Every command reads its inputs, calls into the library, and writes its
//! outputs atomically. Failures map onto [`Error::exit_code`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    self, generate_world, load_triplets, triplets_to_string, DatasetSplit, SplitMode,
    SyntheticWorld, TripletSet, WorldSpec, DEFAULT_TRAIN_FRACTION,
};
use crate::embed;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, MetricsReport, PredicateOracle};
use crate::geometry::{self, CameraModel};
use crate::infer::{
    infer_missing, predict_grasp, Candidate, PartialTriplet, PredictOptions, Prediction,
    RankedItem, Vocabulary,
};
use crate::io::write_atomic;
use crate::learn::{loss_trace_csv, train_with_progress, EpochLoss, TrainConfig, TrainOutcome};
use crate::model::{ActionId, EmbeddingModel, Observation, NULL_ENTITY};

pub const MANIFEST_FORMAT: &str = "taskgrasp-dataset";
pub const PREDICTION_FORMAT: &str = "taskgrasp-prediction";
pub const INFERENCE_FORMAT: &str = "taskgrasp-inference";
pub const OUTPUT_VERSION: u32 = 1;

pub const WORLD_FILE: &str = "world.json";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXAMPLE_SCENE_FILE: &str = "example_scene.json";
pub const EXAMPLE_TARGET_FILE: &str = "example_target.json";

#[derive(Debug, Parser)]
#[command(name = "taskgrasp", version, about = "Task-specific grasp selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world, its triplets, and a train/test split.
    Synth(SynthArgs),
    /// Train an embedding model on a triplet file or dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint (or the predicate oracle) on a dataset's test split.
    Eval(EvalArgs),
    /// Rank the grasp candidates of one scene for an action and target.
    Predict(PredictArgs),
    /// Rank candidates for the one missing element of a triplet.
    Infer(InferArgs),
    /// Write raw embeddings and a 2-D linear projection as CSV.
    EmbedDump(EmbedDumpArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// World spec (JSON); defaults apply to omitted fields.
    #[arg(long = "config", alias = "spec")]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed; also seeds the split.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "image-wise")]
    pub mode: SplitMode,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    pub fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Triplet file, or a dataset directory holding `train.jsonl`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training config (JSON or TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Loss trace CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Replace every target with the null observation before training.
    #[arg(long)]
    pub target_blind: bool,
    /// Suppress the per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Score with the world's planted predicates instead of a model.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Report path (JSON); a CSV with the same stem is written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub target_blind: bool,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = geometry::DEFAULT_NMS_THRESHOLD)]
    pub nms_threshold: f64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene file: `{"candidates": [{"grasp": ..., "tool": ...}, ...]}`.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub action: String,
    /// Target observation (JSON); the null target when omitted.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = geometry::DEFAULT_NMS_THRESHOLD)]
    pub nms_threshold: f64,
    /// Camera intrinsics and extrinsic (JSON); needs `--depth`.
    #[arg(long, requires = "depth")]
    pub calibration: Option<PathBuf>,
    /// Depth at the grasp center, meters.
    #[arg(long)]
    pub depth: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Triplet file or dataset directory the candidate heads and targets
    /// are drawn from.
    #[arg(long)]
    pub data: PathBuf,
    /// Tool observation (JSON).
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub action: Option<String>,
    /// Target observation (JSON), or `none` for the null target.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct EmbedDumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Triplet file or dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `embeddings.csv` and `projection.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub mode: SplitMode,
    pub fraction: f64,
    pub seed: u64,
    pub triplets: usize,
    pub positives: usize,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionOutput {
    pub format: &'static str,
    pub version: u32,
    pub action: String,
    pub target: String,
    #[serde(flatten)]
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceOutput {
    pub format: &'static str,
    pub version: u32,
    pub slot: &'static str,
    pub ranked: Vec<RankedItem>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Data(format!("{what} {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn load_world_spec(path: &Path) -> Result<WorldSpec> {
    let spec: WorldSpec = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::config(format!("world spec {}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

/// A triplet file, or `file_name` inside a dataset directory.
fn resolve(data: &Path, file_name: &str) -> PathBuf {
    if data.is_dir() {
        data.join(file_name)
    } else {
        data.to_path_buf()
    }
}

pub fn load_split(dir: &Path) -> Result<DatasetSplit> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE), "manifest")?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != OUTPUT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported manifest {} v{}",
            manifest.format, manifest.version
        )));
    }
    let train = load_triplets(&dir.join(TRAIN_FILE))?;
    let test = load_triplets(&dir.join(TEST_FILE))?;
    if train.header != test.header {
        return Err(Error::Schema("train and test headers differ".into()));
    }
    Ok(DatasetSplit {
        header: train.header,
        train: train.triplets,
        test: test.triplets,
        mode: manifest.mode,
    })
}

fn parse_action(model: &EmbeddingModel, name: &str) -> Result<ActionId> {
    model.action_by_name(name).ok_or_else(|| {
        Error::invalid(format!(
            "unknown action '{name}'; known actions: {}",
            model.header().action_names.join(", ")
        ))
    })
}

/// Summary of a `synth` run.
#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub world: SyntheticWorld,
    pub set: TripletSet,
    pub manifest: Manifest,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<SynthOutcome> {
    let mut spec = match &args.spec {
        Some(p) => load_world_spec(p)?,
        None => WorldSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let world = generate_world(&spec)?;
    let set = data::enumerate_triplets(&world)?;
    let split = data::split(&set, args.mode, args.fraction, spec.seed)?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: OUTPUT_VERSION,
        mode: args.mode,
        fraction: args.fraction,
        seed: spec.seed,
        triplets: set.triplets.len(),
        positives: set.positives().count(),
        train: split.train.len(),
        test: split.test.len(),
    };
    let mut seen = std::collections::BTreeSet::new();
    let scene: Vec<Candidate> = set
        .triplets
        .iter()
        .filter(|t| t.scene == 0 && seen.insert(t.tool_image()))
        .map(|t| Candidate {
            grasp: t.grasp,
            tool: t.tool.clone(),
        })
        .collect();
    let example_target = set
        .triplets
        .iter()
        .find(|t| t.scene == 0 && !t.target.is_null())
        .map(|t| t.target.clone())
        .unwrap_or_else(|| Observation::null(set.header.feature_len));

    // Render everything first so a failure leaves no partial dataset behind.
    let files: Vec<(&str, Vec<u8>)> = vec![
        (WORLD_FILE, (world.to_json()? + "\n").into_bytes()),
        (TRIPLETS_FILE, triplets_to_string(&set)?.into_bytes()),
        (TRAIN_FILE, triplets_to_string(&split.train_set())?.into_bytes()),
        (TEST_FILE, triplets_to_string(&split.test_set())?.into_bytes()),
        (EXAMPLE_SCENE_FILE, json_bytes(&SceneFile { candidates: scene })?),
        (EXAMPLE_TARGET_FILE, json_bytes(&example_target)?),
        (MANIFEST_FILE, json_bytes(&manifest)?),
    ];
    ensure_dir(&args.out)?;
    for (name, bytes) in files {
        write_atomic(&args.out.join(name), &bytes)?;
    }
    Ok(SynthOutcome {
        world,
        set,
        manifest,
    })
}

pub fn loss_csv_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

pub fn cmd_train(args: &TrainArgs, progress: impl FnMut(&EpochLoss)) -> Result<TrainOutcome> {
    let mut config = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    let mut set = load_triplets(&resolve(&args.data, TRAIN_FILE))?;
    if args.target_blind {
        set = set.target_blind();
    }
    let outcome = train_with_progress(&set, &config, progress)?;
    let checkpoint = outcome.model.save_json()?;
    let trace = loss_trace_csv(&outcome.trace);
    ensure_parent(&args.out)?;
    let csv = args.loss_csv.clone().unwrap_or_else(|| loss_csv_path(&args.out));
    ensure_parent(&csv)?;
    write_atomic(&args.out, checkpoint.as_bytes())?;
    write_atomic(&csv, trace.as_bytes())?;
    Ok(outcome)
}

pub fn report_csv_path(report: &Path) -> PathBuf {
    report.with_extension("csv")
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let split = load_split(&args.data)?;
    let config = EvalConfig {
        alpha: args.alpha,
        nms_threshold: args.nms_threshold,
        target_blind: args.target_blind,
    };
    let report = match (&args.checkpoint, &args.oracle) {
        (Some(ckpt), None) => {
            let model = EmbeddingModel::load(ckpt)?;
            evaluate(&model, &split, &config)?
        }
        (None, Some(world)) => {
            let world = SyntheticWorld::from_json(&read_text(world)?)?;
            evaluate(&PredicateOracle::new(world), &split, &config)?
        }
        _ => {
            return Err(Error::invalid(
                "give exactly one of --checkpoint and --oracle",
            ))
        }
    };
    let json = report.to_json()?;
    let csv = report.to_csv();
    ensure_parent(&args.out)?;
    write_atomic(&args.out, json.as_bytes())?;
    write_atomic(&report_csv_path(&args.out), csv.as_bytes())?;
    Ok(report)
}

fn load_target(path: Option<&Path>, feature_len: usize) -> Result<Observation> {
    match path {
        Some(p) => read_json(p, "target"),
        None => Ok(Observation::null(feature_len)),
    }
}

pub fn cmd_predict(args: &PredictArgs) -> Result<PredictionOutput> {
    let model = EmbeddingModel::load(&args.checkpoint)?;
    let action = parse_action(&model, &args.action)?;
    let scene: SceneFile = read_json(&args.scene, "scene")?;
    let target = load_target(args.target.as_deref(), model.header().feature_len)?;
    let camera = match &args.calibration {
        Some(p) => Some(read_json::<CameraModel>(p, "calibration")?),
        None => None,
    };
    let options = PredictOptions {
        alpha: args.alpha,
        nms_threshold: args.nms_threshold,
        camera,
        depth: args.depth,
    };
    let prediction = predict_grasp(&model, &scene.candidates, &action, &target, &options)?;
    Ok(PredictionOutput {
        format: PREDICTION_FORMAT,
        version: OUTPUT_VERSION,
        action: action.name,
        target: target.entity_id,
        prediction,
    })
}

pub fn cmd_infer(args: &InferArgs) -> Result<InferenceOutput> {
    let model = EmbeddingModel::load(&args.checkpoint)?;
    let set = load_triplets(&resolve(&args.data, TRIPLETS_FILE))?;
    let head = match &args.head {
        Some(p) => Some(read_json::<Observation>(p, "head")?),
        None => None,
    };
    let action = match &args.action {
        Some(name) => Some(parse_action(&model, name)?),
        None => None,
    };
    let target = match args.target.as_deref() {
        Some(NULL_ENTITY) => Some(Observation::null(model.header().feature_len)),
        Some(p) => Some(read_json::<Observation>(Path::new(p), "target")?),
        None => None,
    };
    let (slot, vocabulary) = match (&head, &action, &target) {
        (None, _, _) => (
            "head",
            Vocabulary::Heads(
                embed::distinct_heads(&set)
                    .into_iter()
                    .map(|(_, o)| o.clone())
                    .collect(),
            ),
        ),
        (_, None, _) => ("action", Vocabulary::Actions(model.actions())),
        _ => {
            let mut tails: Vec<Observation> = embed::distinct_tails(&set)
                .into_iter()
                .map(|(_, o)| o.clone())
                .collect();
            if !tails.iter().any(|o| o.is_null()) {
                tails.push(Observation::null(model.header().feature_len));
            }
            ("target", Vocabulary::Tails(tails))
        }
    };
    let known = PartialTriplet {
        head,
        action,
        target,
    };
    let mut ranked = infer_missing(&model, &known, &vocabulary)?;
    ranked.truncate(args.top);
    Ok(InferenceOutput {
        format: INFERENCE_FORMAT,
        version: OUTPUT_VERSION,
        slot,
        ranked,
    })
}

pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const PROJECTION_FILE: &str = "projection.csv";

/// Returns the number of rows written.
pub fn cmd_embed_dump(args: &EmbedDumpArgs) -> Result<usize> {
    let model = EmbeddingModel::load(&args.checkpoint)?;
    let set = load_triplets(&resolve(&args.data, TRIPLETS_FILE))?;
    let rows = embed::dump_embeddings(&model, &set)?;
    let vectors: Vec<Vec<f64>> = rows.iter().map(|r| r.vector.clone()).collect();
    let projected = embed::principal_components(&vectors, 2)?;
    let raw = embed::embeddings_csv(&rows);
    let proj = embed::projection_csv(&rows, &projected);
    ensure_dir(&args.out)?;
    write_atomic(&args.out.join(EMBEDDINGS_FILE), raw.as_bytes())?;
    write_atomic(&args.out.join(PROJECTION_FILE), proj.as_bytes())?;
    Ok(rows.len())
}

fn mode_name(mode: SplitMode) -> &'static str {
    match mode {
        SplitMode::ImageWise => "image-wise",
        SplitMode::ObjectWise => "object-wise",
    }
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write as _;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(Error::io(Path::new("<stdout>"), e))
        }
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let out = cmd_synth(&args)?;
            let m = &out.manifest;
            emit(&format!(
                "wrote {}: {} triplets ({} positive), {} train / {} test ({})\n",
                args.out.display(),
                m.triplets,
                m.positives,
                m.train,
                m.test,
                mode_name(m.mode)
            ))?;
            emit(&data::summarize(&out.set))?;
        }
        Command::Train(args) => {
            let quiet = args.quiet;
            let total = match &args.config {
                Some(p) => TrainConfig::load(p)?.epochs,
                None => TrainConfig::default().epochs,
            };
            let total = args.epochs.unwrap_or(total);
            let outcome = cmd_train(&args, |row| {
                if !quiet {
                    eprintln!(
                        "epoch {}/{total} l_aff={:.6} l_hcls={:.6} l_tcls={:.6} total={:.6}",
                        row.epoch, row.aff, row.head_cls, row.tail_cls, row.total
                    );
                }
            })?;
            let last = outcome.trace.last();
            emit(&format!(
                "wrote {} after {} epochs (final l_aff={})\n",
                args.out.display(),
                outcome.trace.len(),
                last.map_or(f64::NAN, |r| r.aff)
            ))?;
        }
        Command::Eval(args) => {
            let r = cmd_eval(&args)?;
            emit(&format!(
                "scenes={} task_agnostic={:.4} task_specific={:.4} chance={:.4} \
                 head_hits@1={:.4} relation_hits@1={:.4} tail_hits@3={:.4}\n",
                r.scenes,
                r.task_agnostic_accuracy,
                r.task_specific_accuracy,
                r.chance_task_specific,
                r.link_prediction.head.hits_at_1,
                r.link_prediction.relation.hits_at_1,
                r.link_prediction.tail.hits_at_3
            ))?;
        }
        Command::Predict(args) => print_json(&cmd_predict(&args)?)?,
        Command::Infer(args) => print_json(&cmd_infer(&args)?)?,
        Command::EmbedDump(args) => {
            let n = cmd_embed_dump(&args)?;
            emit(&format!("wrote {n} rows to {}\n", args.out.display()))?;
        }
    }
    Ok(())
}

/// Parses the process arguments, runs the command, and returns the exit
/// status. Usage errors exit with 2 through clap.
pub fn main_exit_code() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
