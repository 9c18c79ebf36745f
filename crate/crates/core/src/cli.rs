//! `avd` command line: phantom generation, extraction, training, evaluation,
//! prediction and Grad-CAM export.
//!
//! Every subcommand resolves its settings from defaults, an optional
//! `--config` JSON file and explicit flags, in that order. Flag names are the
//! config keys with `-` for `_`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::cine_data::{read_ctv, read_manifest, write_ctv, Manifest, Split};
use crate::densenet::{load_checkpoint, ArchConfig};
use crate::evaluation::{evaluate, predict_volumes, Averaging};
use crate::gradcam::{gradcam, overlay_export};
use crate::heart_extraction::{trace_extraction, CropTransform, ExtractionConfig};
use crate::phantom::{generate_dataset, PhantomConfig, DEFAULT_CLASS_WEIGHTS};
use crate::training::{argmax, preprocess, stratified_split, train, SplitSpec, TrainConfig};

pub const SEED_ENV: &str = "CINE_AVD_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] crate::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn run_err<E: Into<crate::Error>>(e: E) -> CliError {
    CliError::Run(e.into())
}

#[derive(Debug, Parser)]
#[command(name = "avd", version, about = "Aortic valve pathology classification from cine cardiac volumes")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labelled synthetic cine dataset with a manifest.
    GenPhantom(GenPhantomArgs),
    /// Locate the heart in one cine and write the cropped, resampled volume.
    Extract(ExtractArgs),
    /// Train a classifier from a manifest.
    Train(TrainArgs),
    /// Score a checkpoint on the manifest's test split.
    Evaluate(EvaluateArgs),
    /// Print class probabilities for individual volumes.
    Predict(PredictArgs),
    /// Export Grad-CAM overlays for one volume.
    Gradcam(GradcamArgs),
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts[..] {
        [a, b] => match (a.parse(), b.parse()) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            _ => Err(format!("cannot parse {s:?} as a pair")),
        },
        _ => Err(format!("expected two comma-separated values, got {s:?}")),
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"))).collect()
}

/// Extraction flags shared by every command that preprocesses volumes.
#[derive(Debug, Args, Default)]
struct ExtractionFlags {
    /// Gaussian sigma (px) before edge detection.
    #[arg(long)]
    canny_sigma: Option<f64>,
    /// Diamond dilation radius (px) applied to the edge map.
    #[arg(long)]
    dilation_radius_px: Option<usize>,
    /// In-plane spacing after resampling, "row,col" in mm.
    #[arg(long, value_parser = parse_pair::<f64>)]
    target_spacing_mm: Option<(f64, f64)>,
    /// Output crop size, "rows,cols".
    #[arg(long, value_parser = parse_pair::<usize>)]
    target_hw: Option<(usize, usize)>,
    /// Position of the first difference frame as a fraction of the cycle.
    #[arg(long)]
    early_frame_fraction: Option<f64>,
    /// Position of the second difference frame as a fraction of the cycle.
    #[arg(long)]
    late_frame_fraction: Option<f64>,
    /// Percentile of gradient magnitude used as the high Canny threshold.
    #[arg(long)]
    canny_high_percentile: Option<f64>,
    /// Low threshold as a fraction of the high one.
    #[arg(long)]
    canny_low_ratio: Option<f64>,
}

/// Preprocessing and optimisation flags mirroring the training config.
#[derive(Debug, Args, Default)]
struct TrainFlags {
    /// Adam step size.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per optimiser step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Focal-loss focusing exponent.
    #[arg(long)]
    focal_gamma: Option<f64>,
    /// Per-class focal weights, comma separated (default: inverse frequency).
    #[arg(long, value_parser = parse_list)]
    focal_alpha: Option<Vec<f64>>,
    /// First-moment decay.
    #[arg(long)]
    adam_beta1: Option<f64>,
    /// Second-moment decay.
    #[arg(long)]
    adam_beta2: Option<f64>,
    /// Adam denominator epsilon.
    #[arg(long)]
    adam_eps: Option<f64>,
    /// Probability of each augmentation firing per sample.
    #[arg(long)]
    augment_prob: Option<f64>,
    /// Maximum in-plane rotation, degrees.
    #[arg(long)]
    rotation_range_deg: Option<f64>,
    /// Gamma contrast range, "lo,hi".
    #[arg(long, value_parser = parse_pair::<f64>)]
    contrast_gamma_range: Option<(f64, f64)>,
    /// Polynomial order of the bias field (at most 3).
    #[arg(long)]
    bias_field_order: Option<usize>,
    /// Bias-field polynomial coefficient range, "lo,hi".
    #[arg(long, value_parser = parse_pair::<f64>)]
    bias_field_coeff_range: Option<(f64, f64)>,
    /// Frames after depth resampling.
    #[arg(long)]
    target_depth: Option<usize>,
    /// Master seed (falls back to $CINE_AVD_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// two_class or four_class.
    #[arg(long)]
    task: Option<String>,
    /// Inputs are already cropped to the model input size.
    #[arg(long)]
    skip_extraction: Option<bool>,
    /// Data-loading threads.
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    extraction: ExtractionFlags,
}

#[derive(Debug, Args)]
struct GenPhantomArgs {
    /// JSON file with any of the settings below; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of volumes.
    #[arg(long)]
    n: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (falls back to $CINE_AVD_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Geometry preset: default (192x192x20) or small (64x64x16).
    #[arg(long)]
    preset: Option<String>,
    /// Class weights for none, AR, AS, mixed; comma separated.
    #[arg(long, value_parser = parse_list)]
    class_weights: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// JSON file with any of the settings below; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input .ctv volume.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output .ctv path for the cropped volume.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for difference / edge / dilation / bbox debug volumes.
    #[arg(long)]
    debug_dir: Option<PathBuf>,
    #[command(flatten)]
    extraction: ExtractionFlags,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON file with any of the settings below; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest CSV; unassigned splits are stratified 56/14/30.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory for checkpoints and history.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dense blocks.
    #[arg(long)]
    num_blocks: Option<usize>,
    /// Layers per dense block.
    #[arg(long)]
    layers_per_block: Option<usize>,
    /// Channels added by each dense layer.
    #[arg(long)]
    growth_rate: Option<usize>,
    /// Stem output channels (default: twice the growth rate).
    #[arg(long)]
    init_channels: Option<usize>,
    /// Bottleneck channels (default: four times the growth rate).
    #[arg(long)]
    bottleneck_width: Option<usize>,
    /// Channel compression factor of transitions.
    #[arg(long)]
    transition_compression: Option<f64>,
    /// Require four blocks of five layers.
    #[arg(long)]
    paper_faithful: Option<bool>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// JSON file with any of the settings below; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Manifest CSV with a test split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for report.json, confusion.csv and roc_<class>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bootstrap resamples for the standard deviations.
    #[arg(long)]
    bootstrap_n: Option<usize>,
    /// macro, micro or weighted.
    #[arg(long)]
    averaging: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// JSON file with any of the settings below; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint file written by train.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input .ctv volume; repeatable.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    /// CSV output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct GradcamArgs {
    /// JSON file with any of the settings below; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint file written by train.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input .ctv volume.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory for overlay frames and heatmap.ctv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Class to explain (default: the predicted class).
    #[arg(long)]
    class: Option<usize>,
    /// Captured layer (default: the last transition conv).
    #[arg(long)]
    layer: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
}

/// Flag values keyed by config field name.
#[derive(Default)]
struct Overrides(Map<String, Value>);

impl Overrides {
    fn put<T: Serialize>(&mut self, key: &str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialise"));
        }
        self
    }
}

impl ExtractionFlags {
    fn collect(&self, o: &mut Overrides) {
        o.put("canny_sigma", &self.canny_sigma)
            .put("dilation_radius_px", &self.dilation_radius_px)
            .put("target_spacing_mm", &self.target_spacing_mm)
            .put("target_hw", &self.target_hw)
            .put("early_frame_fraction", &self.early_frame_fraction)
            .put("late_frame_fraction", &self.late_frame_fraction)
            .put("canny_high_percentile", &self.canny_high_percentile)
            .put("canny_low_ratio", &self.canny_low_ratio);
    }
}

impl TrainFlags {
    fn collect(&self, o: &mut Overrides) {
        o.put("learning_rate", &self.learning_rate)
            .put("epochs", &self.epochs)
            .put("batch_size", &self.batch_size)
            .put("focal_gamma", &self.focal_gamma)
            .put("focal_alpha", &self.focal_alpha)
            .put("adam_beta1", &self.adam_beta1)
            .put("adam_beta2", &self.adam_beta2)
            .put("adam_eps", &self.adam_eps)
            .put("augment_prob", &self.augment_prob)
            .put("rotation_range_deg", &self.rotation_range_deg)
            .put("contrast_gamma_range", &self.contrast_gamma_range)
            .put("bias_field_order", &self.bias_field_order)
            .put("bias_field_coeff_range", &self.bias_field_coeff_range)
            .put("target_depth", &self.target_depth)
            .put("seed", &self.seed)
            .put("skip_extraction", &self.skip_extraction)
            .put("workers", &self.workers);
        if let Some(task) = &self.task {
            let value = match task.parse::<crate::cine_data::LabelTask>() {
                Ok(t) => serde_json::to_value(t).expect("task serialises"),
                Err(_) => Value::String(task.clone()),
            };
            o.0.insert("task".into(), value);
        }
        self.extraction.collect(o);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Default,
    Small,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenPhantomRun {
    pub n: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub preset: Preset,
    pub class_weights: Vec<f64>,
    /// Full geometry; replaces the preset when present.
    pub phantom: Option<PhantomConfig>,
}

impl Default for GenPhantomRun {
    fn default() -> Self {
        Self {
            n: 200,
            out: PathBuf::from("phantoms"),
            seed: 0,
            preset: Preset::Default,
            class_weights: DEFAULT_CLASS_WEIGHTS.to_vec(),
            phantom: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractRun {
    pub input: PathBuf,
    pub out: PathBuf,
    pub debug_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub extraction: ExtractionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub init_channels: Option<usize>,
    pub bottleneck_width: Option<usize>,
    pub transition_compression: f64,
    pub paper_faithful: bool,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        let arch = ArchConfig::default();
        Self {
            manifest: PathBuf::new(),
            out: PathBuf::from("run"),
            num_blocks: arch.num_blocks,
            layers_per_block: arch.layers_per_block,
            growth_rate: arch.growth_rate,
            init_channels: arch.init_channels,
            bottleneck_width: arch.bottleneck_width,
            transition_compression: arch.transition_compression,
            paper_faithful: arch.paper_faithful,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateRun {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub bootstrap_n: usize,
    pub averaging: Averaging,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for EvaluateRun {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            manifest: PathBuf::new(),
            out: PathBuf::from("eval"),
            bootstrap_n: 1000,
            averaging: Averaging::Macro,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictRun {
    pub checkpoint: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcamRun {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub class: Option<usize>,
    pub layer: Option<String>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for GradcamRun {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            input: PathBuf::new(),
            out: PathBuf::from("gradcam"),
            class: None,
            layer: None,
            train: TrainConfig::default(),
        }
    }
}

fn load_config_file(path: &Path) -> CliResult<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Config(format!("config not found: {}", path.display()))
        } else {
            CliError::Config(format!("{}: {e}", path.display()))
        }
    })?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Config(format!("{}: top level must be an object", path.display()))),
        Err(e) => Err(CliError::Config(format!("{}: {e}", path.display()))),
    }
}

/// Defaults, then the config file, then `$CINE_AVD_SEED` for an unset seed,
/// then flags. Unknown config keys are rejected.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(
    config: Option<&Path>,
    flags: Map<String, Value>,
    seed_env: Option<&str>,
) -> CliResult<T> {
    let Value::Object(defaults) = serde_json::to_value(T::default()).expect("defaults serialise") else {
        unreachable!("run configs are structs")
    };
    let mut merged = match config {
        Some(path) => load_config_file(path)?,
        None => Map::new(),
    };
    if let Some(key) = merged.keys().find(|k| !defaults.contains_key(*k)) {
        return Err(CliError::Config(format!("unknown key {key:?}")));
    }
    if defaults.contains_key("seed") && !merged.contains_key("seed") && !flags.contains_key("seed") {
        if let Some(raw) = seed_env {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
            merged.insert("seed".into(), seed.into());
        }
    }
    merged.extend(flags);
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(e.to_string()))
}

fn announce<T: Serialize>(command: &str, cfg: &T, seed: Option<u64>) {
    let json = serde_json::to_string(cfg).expect("config serialises");
    eprintln!("{command} config: {json}");
    if let Some(seed) = seed {
        eprintln!("{command} seed: {seed}");
    }
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.as_os_str().is_empty() {
        return Err(CliError::Usage(format!("--{what} is required")));
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns 0 on success, 1 on usage errors and 2 on runtime errors.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let seed_env = std::env::var(SEED_ENV).ok();
    match dispatch(cli.command, seed_env.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, seed_env: Option<&str>) -> CliResult<()> {
    match command {
        Command::GenPhantom(a) => {
            let mut o = Overrides::default();
            o.put("n", &a.n).put("out", &a.out).put("seed", &a.seed).put("preset", &a.preset).put("class_weights", &a.class_weights);
            let run: GenPhantomRun = resolve(a.config.as_deref(), o.0, seed_env)?;
            announce("gen-phantom", &run, Some(run.seed));
            gen_phantom(&run)
        }
        Command::Extract(a) => {
            let mut o = Overrides::default();
            o.put("input", &a.input).put("out", &a.out).put("debug_dir", &a.debug_dir);
            a.extraction.collect(&mut o);
            let run: ExtractRun = resolve(a.config.as_deref(), o.0, seed_env)?;
            announce("extract", &run, None);
            extract(&run)
        }
        Command::Train(a) => {
            let mut o = Overrides::default();
            o.put("manifest", &a.manifest)
                .put("out", &a.out)
                .put("num_blocks", &a.num_blocks)
                .put("layers_per_block", &a.layers_per_block)
                .put("growth_rate", &a.growth_rate)
                .put("init_channels", &a.init_channels)
                .put("bottleneck_width", &a.bottleneck_width)
                .put("transition_compression", &a.transition_compression)
                .put("paper_faithful", &a.paper_faithful);
            a.train.collect(&mut o);
            let run: TrainRun = resolve(a.config.as_deref(), o.0, seed_env)?;
            announce("train", &run, Some(run.train.seed));
            train_cmd(&run)
        }
        Command::Evaluate(a) => {
            let mut o = Overrides::default();
            o.put("checkpoint", &a.checkpoint)
                .put("manifest", &a.manifest)
                .put("out", &a.out)
                .put("bootstrap_n", &a.bootstrap_n)
                .put("averaging", &a.averaging);
            a.train.collect(&mut o);
            let run: EvaluateRun = resolve(a.config.as_deref(), o.0, seed_env)?;
            announce("evaluate", &run, Some(run.train.seed));
            evaluate_cmd(&run)
        }
        Command::Predict(a) => {
            let mut o = Overrides::default();
            if !a.inputs.is_empty() {
                o.put("inputs", &Some(&a.inputs));
            }
            o.put("checkpoint", &a.checkpoint).put("out", &a.out);
            a.train.collect(&mut o);
            let run: PredictRun = resolve(a.config.as_deref(), o.0, seed_env)?;
            announce("predict", &run, Some(run.train.seed));
            predict_cmd(&run)
        }
        Command::Gradcam(a) => {
            let mut o = Overrides::default();
            o.put("checkpoint", &a.checkpoint)
                .put("input", &a.input)
                .put("out", &a.out)
                .put("class", &a.class)
                .put("layer", &a.layer);
            a.train.collect(&mut o);
            let run: GradcamRun = resolve(a.config.as_deref(), o.0, seed_env)?;
            announce("gradcam", &run, Some(run.train.seed));
            gradcam_cmd(&run)
        }
    }
}

fn gen_phantom(run: &GenPhantomRun) -> CliResult<()> {
    let cfg = run.phantom.clone().unwrap_or_else(|| match run.preset {
        Preset::Default => PhantomConfig::default(),
        Preset::Small => PhantomConfig::small(),
    });
    let manifest = generate_dataset(run.n, &run.class_weights, &cfg, run.seed, &run.out)?;
    let hist = manifest.class_histogram();
    println!("wrote {} volumes to {} (labels {:?})", manifest.len(), run.out.display(), hist);
    Ok(())
}

fn extract(run: &ExtractRun) -> CliResult<()> {
    require(&run.input, "input")?;
    require(&run.out, "out")?;
    run.extraction.validate().map_err(run_err)?;
    let cine = read_ctv(&run.input).map_err(run_err)?;
    let trace = trace_extraction(&cine, &run.extraction).map_err(run_err)?;
    if let Some(dir) = &run.debug_dir {
        std::fs::create_dir_all(dir).map_err(|e| run_err(crate::Error::io(dir, e)))?;
        trace.write_debug_ctv(dir.join("extraction_debug.ctv"), cine.spacing_mm()).map_err(run_err)?;
    }
    let bbox = trace
        .bbox
        .ok_or(crate::heart_extraction::ExtractionError::NoMovingStructure)
        .map_err(run_err)?;
    let crop = CropTransform::new(bbox, cine.spacing_mm(), &run.extraction).map_err(run_err)?;
    let out = crop.apply(&cine).map_err(run_err)?;
    write_ctv(&out, &run.out).map_err(run_err)?;
    println!(
        "bbox rows {}..={} cols {}..={} -> {}",
        bbox.row_min,
        bbox.row_max,
        bbox.col_min,
        bbox.col_max,
        run.out.display()
    );
    Ok(())
}

/// Copies the manifest with absolute paths so it can live in another directory.
fn rebased(manifest: &Manifest) -> CliResult<Manifest> {
    let mut entries = manifest.entries.clone();
    for e in &mut entries {
        let p = manifest.resolve(e);
        e.path = std::path::absolute(&p).map_err(|err| run_err(crate::Error::io(&p, err)))?;
    }
    Manifest::new(entries, &manifest.base_dir).map_err(run_err)
}

fn train_cmd(run: &TrainRun) -> CliResult<()> {
    require(&run.manifest, "manifest")?;
    let cfg = &run.train;
    let mut manifest = read_manifest(&run.manifest).map_err(run_err)?;
    if manifest.split_entries(Split::Train).next().is_none() {
        let spec = SplitSpec::paper_proportions(manifest.len(), cfg.seed);
        manifest = stratified_split(&manifest, &spec).map_err(run_err)?;
        eprintln!("train: assigned splits {}/{}/{}", spec.train_n, spec.val_n, spec.test_n);
    }
    let input_shape = if cfg.skip_extraction {
        let first = manifest
            .split_entries(Split::Train)
            .next()
            .ok_or_else(|| CliError::Config("manifest has no training samples".into()))?;
        let v = read_ctv(manifest.resolve(first)).map_err(run_err)?;
        [v.rows(), v.cols(), cfg.target_depth]
    } else {
        [cfg.extraction.target_hw.0, cfg.extraction.target_hw.1, cfg.target_depth]
    };
    let arch = ArchConfig {
        num_blocks: run.num_blocks,
        layers_per_block: run.layers_per_block,
        growth_rate: run.growth_rate,
        init_channels: run.init_channels,
        bottleneck_width: run.bottleneck_width,
        transition_compression: run.transition_compression,
        num_classes: cfg.task.num_classes(),
        input_shape,
        paper_faithful: run.paper_faithful,
    };
    std::fs::create_dir_all(&run.out).map_err(|e| run_err(crate::Error::io(&run.out, e)))?;
    let split_manifest = rebased(&manifest)?;
    split_manifest.write(run.out.join("manifest.csv")).map_err(run_err)?;
    let cfg_path = run.out.join("train_config.json");
    let json = serde_json::to_string_pretty(cfg).expect("config serialises");
    std::fs::write(&cfg_path, json).map_err(|e| run_err(crate::Error::io(&cfg_path, e)))?;
    let outcome = train(&manifest, &arch, cfg, &run.out, &mut |r| {
        println!(
            "epoch {:>4}  train_loss {:.5}  val_loss {:.5}  val_acc {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy
        );
    })
    .map_err(run_err)?;
    println!(
        "best epoch {} -> {}; last -> {}",
        outcome.history.best_epoch,
        outcome.best_checkpoint.display(),
        outcome.last_checkpoint.display()
    );
    Ok(())
}

fn evaluate_cmd(run: &EvaluateRun) -> CliResult<()> {
    require(&run.checkpoint, "checkpoint")?;
    require(&run.manifest, "manifest")?;
    let (model, _) = load_checkpoint(&run.checkpoint).map_err(run_err)?;
    let manifest = read_manifest(&run.manifest).map_err(run_err)?;
    let report = evaluate(&model, &manifest, &run.train, run.bootstrap_n, run.averaging).map_err(run_err)?;
    report.write(&run.out).map_err(run_err)?;
    println!(
        "n_test {}  accuracy {:.4} ± {:.4}  f1 {:.4} ± {:.4}  precision {:.4} ± {:.4}",
        report.n_test,
        report.accuracy.mean,
        report.accuracy.std,
        report.f1.mean,
        report.f1.std,
        report.precision.mean,
        report.precision.std
    );
    println!("per-class AUC {:?}", report.per_class_auc);
    println!("report written to {}", run.out.display());
    Ok(())
}

fn predict_cmd(run: &PredictRun) -> CliResult<()> {
    require(&run.checkpoint, "checkpoint")?;
    if run.inputs.is_empty() {
        return Err(CliError::Usage("at least one --input is required".into()));
    }
    let (model, _) = load_checkpoint(&run.checkpoint).map_err(run_err)?;
    let mut volumes = Vec::with_capacity(run.inputs.len());
    for path in &run.inputs {
        let v = read_ctv(path).map_err(run_err)?;
        volumes.push(preprocess(&v, &run.train).map_err(CliError::Run)?);
    }
    let probs = predict_volumes(&model, &volumes).map_err(run_err)?;
    let k = model.config().num_classes;
    let mut text = String::from("subject_id,predicted");
    for c in 0..k {
        text.push_str(&format!(",p_{c}"));
    }
    text.push('\n');
    for (v, p) in volumes.iter().zip(&probs) {
        text.push_str(&format!("{},{}", v.subject_id(), argmax(p)));
        for x in p {
            text.push_str(&format!(",{x}"));
        }
        text.push('\n');
    }
    match &run.out {
        Some(path) => std::fs::write(path, text).map_err(|e| run_err(crate::Error::io(path, e)))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn gradcam_cmd(run: &GradcamRun) -> CliResult<()> {
    require(&run.checkpoint, "checkpoint")?;
    require(&run.input, "input")?;
    let (model, _) = load_checkpoint(&run.checkpoint).map_err(run_err)?;
    let raw = read_ctv(&run.input).map_err(run_err)?;
    let volume = preprocess(&raw, &run.train).map_err(CliError::Run)?;
    let batch = crate::training::batch_tensor(&[&volume]).map_err(run_err)?;
    let target = match run.class {
        Some(c) => c,
        None => {
            let (probs, _) = model.forward(&batch, None).map_err(run_err)?;
            argmax(probs.data())
        }
    };
    let heatmap = gradcam(&model, &batch, target, run.layer.as_deref()).map_err(run_err)?;
    overlay_export(&volume, &heatmap, &run.out).map_err(run_err)?;
    let hm = heatmap.to_volume(volume.spacing_mm(), volume.subject_id()).map_err(run_err)?;
    write_ctv(&hm, run.out.join("heatmap.ctv")).map_err(run_err)?;
    println!(
        "class {} via {}{}; {} frames written to {}",
        target,
        heatmap.source_layer,
        if heatmap.empty { " (empty attention)" } else { "" },
        heatmap.dims[2],
        run.out.display()
    );
    Ok(())
}
