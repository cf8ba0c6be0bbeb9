//! The `iceflow` command line: one subcommand per pipeline stage, each
//! driven by a resolved [`RunConfig`] that is written next to its outputs
//! as `run.json` and can be passed back with `--config` to replay the run.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use iceflow_autodiff::ParamStore;
use serde::{Deserialize, Serialize};

use crate::baselines::{highpass, HighPassConfig};
use crate::chip::{write_chip_dataset, ChipGridSpec};
use crate::correlation::{time_backends, Backend, Patch};
use crate::evaluation::{
    chip_sequences, eulerian_benchmark, evaluate_benchmark, render_table, summary_csv, Benchmark, BenchmarkSpec,
    ModelKind,
};
use crate::predictor::{log_csv, predict, train, ModelConfig, TrainConfig};
use crate::raster::{
    add_gaussian_noise, save_pgm, save_raster, synth_series, Manifest, OcclusionSpec, Raster, SceneSeries, SynthSpec,
};
use crate::tracking::{track_series, velocity, SearchConfig};
use crate::Grid;

pub const RUN_FILE: &str = "run.json";
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) => EXIT_DATA,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Data(m) => f.write_str(m),
        }
    }
}

fn data<E: Display>(context: impl Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub frames: usize,
    pub size: usize,
    pub dx: f64,
    pub dy: f64,
    pub texture_scales: Vec<f64>,
    pub slope_amplitude: f64,
    pub cloud_probability: f64,
    pub cloud_size: usize,
    pub frame_interval_days: f64,
    /// Amplitude signal-to-noise ratio of added white noise; none keeps frames clean.
    pub snr: Option<f64>,
    pub region_id: String,
}

impl Default for SynthSection {
    fn default() -> Self {
        let base = SynthSpec::uniform_flow(0, 512, 12, 0.0, 0.0);
        Self {
            frames: base.n_frames,
            size: base.size,
            dx: 0.0,
            dy: 0.0,
            texture_scales: base.texture_scales,
            slope_amplitude: base.slope_amplitude,
            cloud_probability: 0.0,
            cloud_size: OcclusionSpec::default().patch_size,
            frame_interval_days: base.frame_interval_days,
            snr: None,
            region_id: base.region_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub sizes: Vec<usize>,
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            sizes: vec![32, 64, 128, 256],
            repeats: 3,
        }
    }
}

/// Every knob of every subcommand. Defaults, then the `--config` file, then
/// flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub synth: SynthSection,
    pub grid: ChipGridSpec,
    pub search: SearchConfig,
    pub highpass: HighPassConfig,
    pub baseline: ModelKind,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub samples: usize,
    pub benchmark: BenchmarkSpec,
    pub models: Vec<ModelKind>,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            input: None,
            output: PathBuf::from("out"),
            checkpoint: None,
            synth: SynthSection::default(),
            grid: ChipGridSpec::default(),
            search: SearchConfig::default(),
            highpass: HighPassConfig::default(),
            baseline: ModelKind::Persistence,
            model: ModelConfig::toy(),
            train: TrainSection::default(),
            samples: 1,
            benchmark: BenchmarkSpec::default(),
            models: vec![ModelKind::Persistence, ModelKind::Highpass],
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("malformed config {}: {e}", path.display())))
    }
}

#[derive(Parser, Debug)]
#[command(name = "iceflow", version, about = "Ice-flow tracking and frame prediction on satellite chips")]
pub struct Cli {
    /// JSON run config (e.g. a previous run.json); flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene series with known offsets
    Synth(SynthArgs),
    /// Cut every frame of a series into chips plus an index
    Chip(ChipArgs),
    /// Track every chip of the first frame through the series
    Track(TrackArgs),
    /// Persistence or high-pass prediction of the next chip
    Baseline(BaselineArgs),
    /// Train the frame predictor
    Train(TrainArgs),
    /// Sample future chips from a trained predictor
    Predict(PredictArgs),
    /// Correlation maps and summary table for several models
    Eval(EvalArgs),
    /// Time the direct and FFT correlation backends
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct InputArg {
    /// Series manifest or the directory holding it
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct GridArgs {
    #[arg(long)]
    chip_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct SearchArgs {
    #[arg(long)]
    scale_factor: Option<f64>,
    #[arg(long)]
    min_score: Option<f64>,
    #[arg(long)]
    max_nodata: Option<f64>,
    #[arg(long)]
    backend: Option<Backend>,
}

#[derive(Args, Debug, Default)]
struct HighPassArgs {
    #[arg(long)]
    blur_sigma: Option<f64>,
    #[arg(long)]
    binarize: Option<bool>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    #[arg(long)]
    chip_size: Option<usize>,
    #[arg(long)]
    z_dim: Option<usize>,
    #[arg(long)]
    g_dim: Option<usize>,
    #[arg(long)]
    rnn_layers: Option<usize>,
    #[arg(long)]
    rnn_units: Option<usize>,
    #[arg(long)]
    latent_layers: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda_peak: Option<f64>,
    #[arg(long)]
    peak_window: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// Column shift per step in pixels
    #[arg(long, allow_hyphen_values = true)]
    dx: Option<f64>,
    /// Row shift per step in pixels
    #[arg(long, allow_hyphen_values = true)]
    dy: Option<f64>,
    #[arg(long)]
    cloud_probability: Option<f64>,
    #[arg(long)]
    cloud_size: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
}

#[derive(Args, Debug)]
struct ChipArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: InputArg,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: InputArg,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: InputArg,
    #[command(flatten)]
    grid: GridArgs,
    /// persistence or highpass
    #[arg(long)]
    model: Option<String>,
    #[command(flatten)]
    highpass: HighPassArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Series to learn from; a seeded synthetic benchmark when absent
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: InputArg,
    /// Checkpoint written by `train`
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Series to evaluate on; a seeded synthetic benchmark when absent
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Comma-separated: persistence,highpass,ml
    #[arg(long)]
    models: Option<String>,
    /// Checkpoint for the ml model
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    highpass: HighPassArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated template sizes
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl Common {
    fn apply(&self, cfg: &mut RunConfig) {
        set!(cfg.seed, self.seed);
        set!(cfg.output, self.out.clone());
    }
}

impl GridArgs {
    fn apply(&self, g: &mut ChipGridSpec) {
        if let Some(size) = self.chip_size {
            // a new chip size without a stride means non-overlapping chips
            if self.stride.is_none() {
                g.stride = size;
            }
            g.chip_size = size;
        }
        set!(g.stride, self.stride);
    }
}

impl SearchArgs {
    fn apply(&self, s: &mut SearchConfig) {
        set!(s.scale_factor, self.scale_factor);
        set!(s.min_score, self.min_score);
        set!(s.max_nodata, self.max_nodata);
        set!(s.backend, self.backend);
    }
}

impl HighPassArgs {
    fn apply(&self, h: &mut HighPassConfig) {
        set!(h.blur_sigma, self.blur_sigma);
        set!(h.binarize, self.binarize);
        set!(h.threshold, self.threshold);
    }
}

impl ModelArgs {
    fn apply(&self, m: &mut ModelConfig) {
        set!(m.chip_size, self.chip_size);
        set!(m.z_dim, self.z_dim);
        set!(m.g_dim, self.g_dim);
        set!(m.rnn_layers, self.rnn_layers);
        set!(m.rnn_units, self.rnn_units);
        set!(m.latent_layers, self.latent_layers);
        set!(m.base_channels, self.base_channels);
        set!(m.context_len, self.context_len);
        set!(m.horizon, self.horizon);
        set!(m.beta, self.beta);
        set!(m.lambda_peak, self.lambda_peak);
        set!(m.peak_window, self.peak_window);
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("bad --{what} entry {p:?}: {e}")))
        })
        .collect()
}

/// The model section of the config next to a checkpoint, if any.
fn sibling_model(checkpoint: &Path) -> Result<Option<ModelConfig>, CliError> {
    let path = checkpoint.with_file_name(MODEL_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(data(path.display()))?;
    serde_json::from_str(&text).map(Some).map_err(data(path.display()))
}

pub const MODEL_FILE: &str = "model.json";
pub const CHECKPOINT_FILE: &str = "model.icew";

/// Resolve the full configuration of one invocation.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Synth(a) => {
            cfg.command = "synth".into();
            a.common.apply(&mut cfg);
            let s = &mut cfg.synth;
            set!(s.frames, a.frames);
            set!(s.size, a.size);
            set!(s.dx, a.dx);
            set!(s.dy, a.dy);
            set!(s.cloud_probability, a.cloud_probability);
            set!(s.cloud_size, a.cloud_size);
            if a.snr.is_some() {
                s.snr = a.snr;
            }
        }
        Command::Chip(a) => {
            cfg.command = "chip".into();
            a.common.apply(&mut cfg);
            set!(cfg.input, a.input.input.clone().map(Some));
            a.grid.apply(&mut cfg.grid);
        }
        Command::Track(a) => {
            cfg.command = "track".into();
            a.common.apply(&mut cfg);
            set!(cfg.input, a.input.input.clone().map(Some));
            a.grid.apply(&mut cfg.grid);
            a.search.apply(&mut cfg.search);
        }
        Command::Baseline(a) => {
            cfg.command = "baseline".into();
            a.common.apply(&mut cfg);
            set!(cfg.input, a.input.input.clone().map(Some));
            a.grid.apply(&mut cfg.grid);
            a.highpass.apply(&mut cfg.highpass);
            if let Some(m) = &a.model {
                cfg.baseline = m.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
            }
            if cfg.baseline == ModelKind::Ml {
                return Err(CliError::Usage("baseline --model takes persistence or highpass; use predict for ml".into()));
            }
        }
        Command::Train(a) => {
            cfg.command = "train".into();
            a.common.apply(&mut cfg);
            set!(cfg.input, a.input.clone().map(Some));
            a.model.apply(&mut cfg.model);
            set!(cfg.train.epochs, a.epochs);
            set!(cfg.train.batch_size, a.batch_size);
            set!(cfg.train.learning_rate, a.learning_rate);
        }
        Command::Predict(a) => {
            cfg.command = "predict".into();
            a.common.apply(&mut cfg);
            set!(cfg.input, a.input.input.clone().map(Some));
            set!(cfg.checkpoint, a.checkpoint.clone().map(Some));
            if a.checkpoint.is_some() {
                if let Some(m) = sibling_model(a.checkpoint.as_ref().unwrap())? {
                    cfg.model = m;
                }
            }
            a.model.apply(&mut cfg.model);
            set!(cfg.samples, a.samples);
        }
        Command::Eval(a) => {
            cfg.command = "eval".into();
            a.common.apply(&mut cfg);
            set!(cfg.input, a.input.clone().map(Some));
            if let Some(m) = &a.models {
                cfg.models = parse_list(m, "models")?;
            }
            set!(cfg.checkpoint, a.checkpoint.clone().map(Some));
            if let Some(ckpt) = &a.checkpoint {
                if let Some(m) = sibling_model(ckpt)? {
                    cfg.model = m;
                }
            }
            a.model.apply(&mut cfg.model);
            a.highpass.apply(&mut cfg.highpass);
        }
        Command::Bench(a) => {
            cfg.command = "bench".into();
            a.common.apply(&mut cfg);
            if let Some(s) = &a.sizes {
                cfg.bench.sizes = parse_list(s, "sizes")?;
            }
            set!(cfg.bench.repeats, a.repeats);
        }
    }
    if matches!(cfg.command.as_str(), "train" | "predict" | "eval") {
        cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.grid = ChipGridSpec::non_overlapping(cfg.model.chip_size);
        cfg.benchmark.chip_size = cfg.model.chip_size;
        cfg.benchmark.context_len = cfg.model.context_len;
        cfg.benchmark.horizon = cfg.model.horizon;
        cfg.benchmark.seed = cfg.seed;
    }
    cfg.grid.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.search.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn need_input(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.input
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{} needs --input <manifest or directory>", cfg.command)))
}

fn load_series(cfg: &RunConfig) -> Result<SceneSeries, CliError> {
    let path = need_input(cfg)?;
    Manifest::load_series(path).map_err(data(format!("cannot load series {}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(data(format!("cannot write {}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string(v).map_err(data("serialization failed"))
}

fn chip_raster(values: &[f64], size: usize, timestamp: f64, pixel_size_m: f32) -> Result<Raster, CliError> {
    let pixels = values.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Raster::new(size, size, pixels, vec![false; size * size], timestamp, pixel_size_m)
        .map_err(data("invalid predicted chip"))
}

#[derive(Serialize)]
struct GroundTruth {
    /// `(drow, dcol)` from each frame to the next, rounded to pixels.
    step_offsets: Vec<(i64, i64)>,
    /// `(drow, dcol)` of every frame relative to frame 0.
    cumulative_offsets: Vec<(i64, i64)>,
    displacement_field: Vec<(f64, f64)>,
    occluded_fraction: Vec<f64>,
}

fn cmd_synth(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.synth;
    let spec = SynthSpec {
        seed: cfg.seed,
        size: s.size,
        n_frames: s.frames,
        displacement_field: vec![(s.dx, s.dy)],
        texture_scales: s.texture_scales.clone(),
        slope_amplitude: s.slope_amplitude,
        occlusion: OcclusionSpec {
            probability: s.cloud_probability,
            patch_size: s.cloud_size,
        },
        frame_interval_days: s.frame_interval_days,
        start_day: 0.0,
        region_id: s.region_id.clone(),
    };
    let out = synth_series(&spec).map_err(|e| CliError::Usage(format!("invalid synth settings: {e}")))?;
    let series = match s.snr {
        Some(snr) => add_gaussian_noise(&out.series, snr, cfg.seed ^ 0x5EED).map_err(data("noise"))?,
        None => out.series.clone(),
    };
    Manifest::write_series(&series, &cfg.output).map_err(data("cannot write series"))?;
    let truth = GroundTruth {
        step_offsets: out.step_truth(),
        cumulative_offsets: out.truth.clone(),
        displacement_field: spec.displacement_field.clone(),
        occluded_fraction: out
            .occluded
            .iter()
            .map(|m| m.iter().filter(|&&o| o).count() as f64 / m.len() as f64)
            .collect(),
    };
    let json = serde_json::to_string_pretty(&truth).map_err(data("serialization failed"))?;
    write_file(&cfg.output.join("ground_truth.json"), json)
}

fn cmd_chip(cfg: &RunConfig) -> Result<(), CliError> {
    let series = load_series(cfg)?;
    let index = write_chip_dataset(&series, &cfg.grid, &cfg.output).map_err(data("chipping failed"))?;
    println!("wrote {} chips to {}", index.len(), cfg.output.display());
    Ok(())
}

#[derive(Serialize)]
struct TrackLine<'a> {
    grid_index: usize,
    initial_origin: (usize, usize),
    origins: Vec<(usize, usize)>,
    steps: &'a [crate::tracking::TrackStep],
}

fn cmd_track(cfg: &RunConfig) -> Result<(), CliError> {
    let series = load_series(cfg)?;
    let records = track_series(&series, &cfg.grid, &cfg.search).map_err(data("tracking failed"))?;
    let mut tracks = String::new();
    let mut csv = String::from("grid_index,frame_index,speed_m_per_day,heading_deg\n");
    let timestamps = series.timestamps();
    for r in &records {
        tracks.push_str(&to_json(&TrackLine {
            grid_index: r.grid_index,
            initial_origin: r.initial_origin,
            origins: r.origins(),
            steps: &r.steps,
        })?);
        tracks.push('\n');
        for v in velocity(r, &timestamps, series.pixel_size_m() as f64).map_err(data("velocity"))? {
            let heading = v.heading_deg.map(|h| h.to_string()).unwrap_or_default();
            csv.push_str(&format!("{},{},{},{}\n", r.grid_index, v.frame_index, v.speed_m_per_day, heading));
        }
    }
    write_file(&cfg.output.join("tracks.jsonl"), tracks)?;
    write_file(&cfg.output.join("velocity.csv"), csv)?;
    println!("tracked {} chips over {} frames", records.len(), series.len());
    Ok(())
}

#[derive(Serialize)]
struct PredictionEntry {
    j: usize,
    origin: (usize, usize),
    sample: usize,
    step: usize,
    path: String,
}

fn write_index(cfg: &RunConfig, entries: &[PredictionEntry]) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(entries).map_err(data("serialization failed"))?;
    write_file(&cfg.output.join("predictions.json"), json)
}

fn cmd_baseline(cfg: &RunConfig) -> Result<(), CliError> {
    let series = load_series(cfg)?;
    let last = series.frames().last().expect("non-empty series");
    let chips = crate::chip::chip_frame(last, series.len() - 1, &cfg.grid).map_err(data("chipping failed"))?;
    let mut entries = Vec::new();
    for chip in &chips {
        let patch = Patch::from_chip(chip);
        let values = match cfg.baseline {
            ModelKind::Highpass => {
                let hp = highpass(&patch, &cfg.highpass).map_err(data("high-pass"))?;
                // raw residuals are centred on 0.5 to fit the [0, 1] raster range
                let shift = if cfg.highpass.binarize { 0.0 } else { 0.5 };
                hp.values.iter().map(|v| v + shift).collect()
            }
            _ => patch.values.clone(),
        };
        let path = format!("pred_j{:05}.icef", chip.grid_index);
        let raster = chip_raster(&values, chip.size, last.timestamp(), last.pixel_size_m())?;
        save_raster(&raster, cfg.output.join(&path)).map_err(data("cannot write chip"))?;
        entries.push(PredictionEntry {
            j: chip.grid_index,
            origin: chip.origin,
            sample: 0,
            step: 1,
            path,
        });
    }
    write_index(cfg, &entries)
}

fn training_data(cfg: &RunConfig) -> Result<Vec<Vec<Vec<f64>>>, CliError> {
    match &cfg.input {
        Some(path) => {
            let series = Manifest::load_series(path).map_err(data(format!("cannot load series {}", path.display())))?;
            let (seqs, valid) = chip_sequences(series.frames(), &cfg.grid).map_err(data("chipping failed"))?;
            Ok(seqs.into_iter().zip(valid).filter(|(_, v)| *v).map(|(s, _)| s).collect())
        }
        None => Ok(eulerian_benchmark(&cfg.benchmark).map_err(data("benchmark"))?.sequences),
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let seqs = training_data(cfg)?;
    let checkpoint = cfg.output.join(CHECKPOINT_FILE);
    let opt = TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        seed: cfg.seed,
        checkpoint: Some(checkpoint),
    };
    write_file(
        &cfg.output.join(MODEL_FILE),
        serde_json::to_string_pretty(&cfg.model).map_err(data("serialization failed"))?,
    )?;
    let out = train(&seqs, &cfg.model, &opt, None).map_err(data("training failed"))?;
    write_file(&cfg.output.join("train_log.csv"), log_csv(&out.log))?;
    if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
        println!(
            "trained {} epochs on {} sequences: recon_l2 {:.5} -> {:.5}",
            out.log.len(),
            seqs.len(),
            first.loss.recon_l2,
            last.loss.recon_l2
        );
    }
    Ok(())
}

fn load_params(cfg: &RunConfig) -> Result<ParamStore, CliError> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{} needs --checkpoint <model.icew>", cfg.command)))?;
    let file = fs::File::open(path).map_err(data(format!("cannot open {}", path.display())))?;
    ParamStore::read_checkpoint(std::io::BufReader::new(file)).map_err(data(format!("bad checkpoint {}", path.display())))
}

fn cmd_predict(cfg: &RunConfig) -> Result<(), CliError> {
    let series = load_series(cfg)?;
    let params = load_params(cfg)?;
    let m = &cfg.model;
    if series.len() < m.context_len {
        return Err(CliError::Data(format!(
            "series has {} frames, the model needs a context of {}",
            series.len(),
            m.context_len
        )));
    }
    let frames = &series.frames()[series.len() - m.context_len..];
    let (seqs, valid) = chip_sequences(frames, &cfg.grid).map_err(data("chipping failed"))?;
    let last = frames.last().expect("context >= 1");
    let origins: Vec<_> = (0..seqs.len())
        .map(|j| cfg.grid.origin_of(j, series.width(), series.height()).expect("grid index"))
        .collect();
    let mut entries = Vec::new();
    for (j, (seq, ok)) in seqs.iter().zip(valid).enumerate() {
        if !ok {
            continue;
        }
        let samples = predict(seq, &params, m, cfg.samples, cfg.seed ^ j as u64).map_err(data("prediction failed"))?;
        for (k, sample) in samples.iter().enumerate() {
            for (h, frame) in sample.iter().enumerate() {
                let path = format!("pred_j{j:05}_s{k}_h{}.icef", h + 1);
                let ts = last.timestamp() + (h + 1) as f64 * frame_interval(&series);
                let raster = chip_raster(frame, m.chip_size, ts, last.pixel_size_m())?;
                save_raster(&raster, cfg.output.join(&path)).map_err(data("cannot write chip"))?;
                entries.push(PredictionEntry {
                    j,
                    origin: origins[j],
                    sample: k,
                    step: h + 1,
                    path,
                });
            }
        }
    }
    write_index(cfg, &entries)
}

fn frame_interval(series: &SceneSeries) -> f64 {
    let ts = series.timestamps();
    match ts.len() {
        0 | 1 => 0.0,
        n => (ts[n - 1] - ts[0]) / (n - 1) as f64,
    }
}

#[derive(Serialize)]
struct ChipScore<'a> {
    model: &'a str,
    j: usize,
    row: usize,
    col: usize,
    ci: Option<f64>,
}

fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let bench = match &cfg.input {
        Some(_) => {
            let series = load_series(cfg)?;
            Benchmark::from_series(&series, &cfg.grid, cfg.model.context_len, cfg.model.horizon)
                .map_err(data("cannot build evaluation set"))?
        }
        None => eulerian_benchmark(&cfg.benchmark).map_err(data("benchmark"))?,
    };
    let params = if cfg.models.contains(&ModelKind::Ml) {
        Some(load_params(cfg)?)
    } else {
        None
    };
    let rows = evaluate_benchmark(
        &bench,
        &cfg.models,
        &cfg.highpass,
        params.as_ref().map(|p| (p, &cfg.model)),
        cfg.seed,
    )
    .map_err(data("evaluation failed"))?;
    let summaries: Vec<_> = rows.iter().map(|(s, _)| s.clone()).collect();
    write_file(&cfg.output.join("summary.csv"), summary_csv(&summaries))?;
    let mut lines = String::new();
    for (s, map) in &rows {
        for j in 0..map.values.len() {
            lines.push_str(&to_json(&ChipScore {
                model: &s.model,
                j,
                row: j / map.cols,
                col: j % map.cols,
                ci: map.get(j),
            })?);
            lines.push('\n');
        }
        let values = (0..map.values.len()).map(|j| map.get(j).unwrap_or(-1.0)).collect();
        let grid = Grid::new(map.rows, map.cols, values).map_err(data("map shape"))?;
        save_pgm(&grid, -1.0, 1.0, cfg.output.join(format!("map_{}.pgm", s.model))).map_err(data("cannot write map"))?;
    }
    write_file(&cfg.output.join("per_chip.jsonl"), lines)?;
    print!("{}", render_table(&summaries));
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<(), CliError> {
    let mut csv = String::from("size,search,direct_ms,fft_ms,max_abs_diff\n");
    for (k, &size) in cfg.bench.sizes.iter().enumerate() {
        if size < 2 {
            return Err(CliError::Usage(format!("bench sizes must be >= 2, got {size}")));
        }
        let search = (cfg.search.scale_factor * size as f64).round() as usize;
        let t = time_backends(size, search, cfg.bench.repeats, cfg.seed.wrapping_add(k as u64))
            .map_err(data("benchmark"))?;
        let line = format!("{},{},{:.3},{:.3},{:e}\n", t.size, t.search, t.direct_ms, t.fft_ms, t.max_abs_diff);
        print!("{line}");
        csv.push_str(&line);
    }
    write_file(&cfg.output.join("bench.csv"), csv)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("ICEFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("ICEFLOW_THREADS must be a positive integer, got {v:?}")))?;
    // a pool may already exist when running inside a test harness
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Execute a resolved configuration, writing its `run.json` first.
pub fn execute(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output).map_err(data(format!("cannot create {}", cfg.output.display())))?;
    let mut f = BufWriter::new(
        fs::File::create(cfg.output.join(RUN_FILE)).map_err(data("cannot write run.json"))?,
    );
    serde_json::to_writer_pretty(&mut f, cfg).map_err(data("cannot write run.json"))?;
    f.flush().map_err(data("cannot write run.json"))?;
    match cfg.command.as_str() {
        "synth" => cmd_synth(cfg),
        "chip" => cmd_chip(cfg),
        "track" => cmd_track(cfg),
        "baseline" => cmd_baseline(cfg),
        "train" => cmd_train(cfg),
        "predict" => cmd_predict(cfg),
        "eval" => cmd_eval(cfg),
        "bench" => cmd_bench(cfg),
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

/// Parse `args` (program name first), run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = init_threads().and_then(|_| resolve(&cli)).and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
