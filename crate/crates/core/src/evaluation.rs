//! Per-chip correlation maps between predicted and observed chips, their
//! summary statistics, and a seeded Eulerian benchmark comparing the
//! persistence, high-pass and learned predictors.

use std::fmt::Write as _;
use std::str::FromStr;

use iceflow_autodiff::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{highpass, persistence_predict, BaselineError, HighPassConfig};
use crate::chip::{chip_frame, ChipError, ChipGridSpec};
use crate::correlation::{ncc_f64, CorrelationError, Patch};
use crate::predictor::{rollout_many, ModelConfig, PredictorError};
use crate::raster::{synth_series, Raster, RasterError, SceneSeries, SynthSpec};

pub const LOW_EDGE: f64 = 0.3;
pub const HIGH_EDGE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {targets} targets")]
    CountMismatch { predictions: usize, targets: usize },
    #[error("validity mask has {got} entries, expected {expected}")]
    MaskLength { got: usize, expected: usize },
    #[error("grid {rows}x{cols} does not hold {n} chips")]
    GridShape { rows: usize, cols: usize, n: usize },
    #[error("chip {index} shape {pred:?} differs from target {target:?}")]
    ChipShape {
        index: usize,
        pred: (usize, usize),
        target: (usize, usize),
    },
    #[error("no valid chips to summarize")]
    NoValid,
    #[error("correlation maps cover different chip sets")]
    MaskMismatch,
    #[error("unknown model {0:?}, expected persistence, highpass or ml")]
    UnknownModel(String),
    #[error("the ml model needs trained parameters")]
    MissingParams,
    #[error("invalid benchmark: {0}")]
    Benchmark(String),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Chip(#[from] ChipError),
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
}

/// Per-chip correlation laid out on the chip grid. Invalid entries hold NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CorrelationMap {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn get(&self, j: usize) -> Option<f64> {
        self.valid[j].then(|| self.values[j])
    }

    /// Restrict to `mask`; entries outside it become invalid.
    pub fn masked(&self, mask: &[bool]) -> Self {
        let valid: Vec<bool> = self.valid.iter().zip(mask).map(|(&a, &b)| a && b).collect();
        let values = self
            .values
            .iter()
            .zip(&valid)
            .map(|(&v, &ok)| if ok { v } else { f64::NAN })
            .collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            values,
            valid,
        }
    }
}

/// Correlation over the pixels valid in both chips; `None` when either side
/// is constant there or fewer than two pixels remain.
fn pair_score(pred: &Patch, target: &Patch) -> Option<f64> {
    let (a, b): (Vec<f64>, Vec<f64>) = pred
        .values
        .iter()
        .zip(&target.values)
        .zip(pred.nodata.iter().zip(&target.nodata))
        .filter(|(_, (&m, &n))| !m && !n)
        .map(|((&x, &y), _)| (x, y))
        .unzip();
    ncc_f64(&a, &b).ok()
}

/// Entry `j` is the correlation of prediction `j` with target `j`, on a grid
/// of `shape`. Chips with `validity[j] == false` or a constant side are
/// invalid.
pub fn correlation_map(
    predictions: &[Patch],
    targets: &[Patch],
    validity: &[bool],
    shape: (usize, usize),
) -> Result<CorrelationMap, EvalError> {
    let n = targets.len();
    if predictions.len() != n {
        return Err(EvalError::CountMismatch {
            predictions: predictions.len(),
            targets: n,
        });
    }
    if validity.len() != n {
        return Err(EvalError::MaskLength {
            got: validity.len(),
            expected: n,
        });
    }
    if shape.0 * shape.1 != n {
        return Err(EvalError::GridShape {
            rows: shape.0,
            cols: shape.1,
            n,
        });
    }
    for (index, (p, t)) in predictions.iter().zip(targets).enumerate() {
        if p.shape() != t.shape() {
            return Err(EvalError::ChipShape {
                index,
                pred: p.shape(),
                target: t.shape(),
            });
        }
    }
    let scores: Vec<Option<f64>> = predictions
        .par_iter()
        .zip(targets)
        .zip(validity)
        .map(|((p, t), &ok)| if ok { pair_score(p, t) } else { None })
        .collect();
    Ok(CorrelationMap {
        rows: shape.0,
        cols: shape.1,
        values: scores.iter().map(|s| s.unwrap_or(f64::NAN)).collect(),
        valid: scores.iter().map(Option::is_some).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub mean_correlation: f64,
    pub low: f64,
    pub medium: f64,
    pub high: f64,
    pub n_valid: usize,
    pub n_total: usize,
}

impl EvalSummary {
    pub fn fraction_sum(&self) -> f64 {
        self.low + self.medium + self.high
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bucket {
    Low,
    Medium,
    High,
}

/// Low is `[-1, 0.3)`, medium `[0.3, 0.7]`, high `(0.7, 1]`.
pub fn bucket(ci: f64) -> Bucket {
    if ci < LOW_EDGE {
        Bucket::Low
    } else if ci <= HIGH_EDGE {
        Bucket::Medium
    } else {
        Bucket::High
    }
}

/// Mean and bucket fractions over the valid entries only.
pub fn summarize(map: &CorrelationMap, model: &str) -> Result<EvalSummary, EvalError> {
    let valid: Vec<f64> = (0..map.values.len()).filter_map(|j| map.get(j)).collect();
    if valid.is_empty() {
        return Err(EvalError::NoValid);
    }
    let n = valid.len();
    let mut counts = [0usize; 3];
    for &v in &valid {
        counts[bucket(v) as usize] += 1;
    }
    let low = counts[0] as f64 / n as f64;
    let medium = counts[1] as f64 / n as f64;
    Ok(EvalSummary {
        model: model.to_string(),
        mean_correlation: valid.iter().sum::<f64>() / n as f64,
        low,
        medium,
        // the remainder keeps the three fractions summing to one
        high: if counts[2] == 0 { 0.0 } else { 1.0 - low - medium },
        n_valid: n,
        n_total: map.values.len(),
    })
}

/// Summaries of several models over the chips valid for every one of them.
pub fn compare_models(maps: &[(String, CorrelationMap)]) -> Result<Vec<EvalSummary>, EvalError> {
    let Some((_, first)) = maps.first() else {
        return Ok(Vec::new());
    };
    if maps.iter().any(|(_, m)| m.rows != first.rows || m.cols != first.cols) {
        return Err(EvalError::MaskMismatch);
    }
    let mut shared = vec![true; first.valid.len()];
    for (_, m) in maps {
        for (s, &v) in shared.iter_mut().zip(&m.valid) {
            *s &= v;
        }
    }
    let out: Vec<EvalSummary> = maps
        .iter()
        .map(|(name, m)| summarize(&m.masked(&shared), name))
        .collect::<Result<_, _>>()?;
    if out.windows(2).any(|w| w[0].n_valid != w[1].n_valid) {
        return Err(EvalError::MaskMismatch);
    }
    Ok(out)
}

/// Side-by-side table: a mean row followed by the three bucket rows.
pub fn render_table(rows: &[EvalSummary]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<12}{:<10}", "", "");
    for r in rows {
        let _ = write!(out, "{:>14}", r.model);
    }
    out.push('\n');
    let lines: [(&str, &str, fn(&EvalSummary) -> f64); 4] = [
        ("Correlation", "Mean", |r| r.mean_correlation),
        ("Low", "< 0.3", |r| r.low),
        ("Medium", "0.3~0.7", |r| r.medium),
        ("High", "> 0.7", |r| r.high),
    ];
    for (label, range, f) in lines {
        let _ = write!(out, "{label:<12}{range:<10}");
        for r in rows {
            let _ = write!(out, "{:>14}", format!("{:.3}", f(r)));
        }
        out.push('\n');
    }
    out
}

pub const SUMMARY_HEADER: &str = "model,mean,low,medium,high,n_valid,n_total";

pub fn summary_csv(rows: &[EvalSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.model, r.mean_correlation, r.low, r.medium, r.high, r.n_valid, r.n_total
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Persistence,
    Highpass,
    Ml,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Persistence => "persistence",
            Self::Highpass => "highpass",
            Self::Ml => "ml",
        }
    }
}

impl FromStr for ModelKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "persistence" => Ok(Self::Persistence),
            "highpass" => Ok(Self::Highpass),
            "ml" => Ok(Self::Ml),
            other => Err(EvalError::UnknownModel(other.to_string())),
        }
    }
}

/// Seeded scenes cut into a fixed (Eulerian) chip grid. Every chip location
/// yields one sequence of `context_len + horizon` frames; a fraction of the
/// sequences get a cloud painted over their final context frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub n_scenes: usize,
    pub scene_size: usize,
    pub chip_size: usize,
    pub context_len: usize,
    pub horizon: usize,
    /// Per-scene flow is drawn uniformly from `[-max_speed, max_speed]` px/step on each axis.
    pub max_speed: f64,
    pub occluded_fraction: f64,
    /// Side of the cloud square as a fraction of the chip.
    pub cloud_fraction: f64,
    pub texture_scales: Vec<f64>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 8,
            scene_size: 96,
            chip_size: 32,
            context_len: 4,
            horizon: 2,
            max_speed: 1.5,
            occluded_fraction: 0.3,
            cloud_fraction: 0.75,
            texture_scales: vec![0.25, 0.1, 0.04],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    /// Row-major `chip_size^2` frames per sequence.
    pub sequences: Vec<Vec<Vec<f64>>>,
    pub occluded: Vec<bool>,
    /// Sequences free of nodata.
    pub valid: Vec<bool>,
    /// One map row per scene, one column per chip.
    pub grid: (usize, usize),
    pub chip_size: usize,
    pub context_len: usize,
}

impl Benchmark {
    /// The last `context_len + horizon` frames of every chip location of a
    /// fixed grid; the map has the chip-grid shape.
    pub fn from_series(
        series: &SceneSeries,
        grid: &ChipGridSpec,
        context_len: usize,
        horizon: usize,
    ) -> Result<Self, EvalError> {
        let total = context_len + horizon;
        if context_len == 0 || horizon == 0 || series.len() < total {
            return Err(EvalError::Benchmark(format!(
                "need {total} frames with context and horizon >= 1, series has {}",
                series.len()
            )));
        }
        let (sequences, valid) = chip_sequences(&series.frames()[series.len() - total..], grid)?;
        Ok(Self {
            occluded: vec![false; sequences.len()],
            sequences,
            valid,
            grid: grid.grid_shape(series.width(), series.height()),
            chip_size: grid.chip_size,
            context_len,
        })
    }

    pub fn contexts(&self) -> Vec<&[Vec<f64>]> {
        self.sequences.iter().map(|s| &s[..self.context_len]).collect()
    }

    pub fn targets(&self) -> Vec<Patch> {
        self.sequences
            .iter()
            .map(|s| self.patch(s.last().expect("non-empty").clone()))
            .collect()
    }

    fn patch(&self, values: Vec<f64>) -> Patch {
        let n = self.chip_size;
        Patch {
            rows: n,
            cols: n,
            values,
            nodata: vec![false; n * n],
        }
    }
}

/// One sequence per chip location over `frames`, with a flag telling
/// whether it is free of nodata.
pub fn chip_sequences(
    frames: &[Raster],
    grid: &ChipGridSpec,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<bool>), EvalError> {
    let chips: Vec<_> = frames
        .iter()
        .enumerate()
        .map(|(t, f)| chip_frame(f, t, grid))
        .collect::<Result<_, _>>()?;
    let n = chips.first().map_or(0, Vec::len);
    let sequences = (0..n)
        .map(|j| chips.iter().map(|f| f[j].values_f64()).collect())
        .collect();
    let valid = (0..n).map(|j| chips.iter().all(|f| !f[j].has_nodata())).collect();
    Ok((sequences, valid))
}

pub fn eulerian_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark, EvalError> {
    if spec.n_scenes == 0 || spec.chip_size == 0 || spec.scene_size < spec.chip_size {
        return Err(EvalError::Benchmark("need >= 1 scene at least one chip wide".into()));
    }
    if !(0.0..=1.0).contains(&spec.occluded_fraction) || !(0.0..=1.0).contains(&spec.cloud_fraction) {
        return Err(EvalError::Benchmark("fractions must lie in [0, 1]".into()));
    }
    let total = spec.context_len + spec.horizon;
    if spec.context_len == 0 || spec.horizon == 0 {
        return Err(EvalError::Benchmark("context_len and horizon must be >= 1".into()));
    }
    let grid = ChipGridSpec::non_overlapping(spec.chip_size);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.chip_size;
    let cloud = ((spec.cloud_fraction * n as f64).round() as usize).min(n);
    let mut sequences = Vec::new();
    let mut occluded = Vec::new();
    let mut per_scene = 0;
    for _ in 0..spec.n_scenes {
        let dx = rng.random_range(-spec.max_speed..=spec.max_speed);
        let dy = rng.random_range(-spec.max_speed..=spec.max_speed);
        let mut synth = SynthSpec::uniform_flow(rng.random(), spec.scene_size, total, dx, dy);
        synth.texture_scales = spec.texture_scales.clone();
        let out = synth_series(&synth)?;
        let (scene, _) = chip_sequences(out.series.frames(), &grid)?;
        per_scene = scene.len();
        for mut seq in scene {
            let hit = rng.random::<f64>() < spec.occluded_fraction;
            let r0 = rng.random_range(0..=n - cloud);
            let c0 = rng.random_range(0..=n - cloud);
            let tone: Vec<f64> = (0..cloud * cloud).map(|_| rng.random_range(0.85..0.95)).collect();
            if hit {
                let frame = &mut seq[spec.context_len - 1];
                for r in 0..cloud {
                    for c in 0..cloud {
                        frame[(r0 + r) * n + c0 + c] = tone[r * cloud + c];
                    }
                }
            }
            sequences.push(seq);
            occluded.push(hit);
        }
    }
    Ok(Benchmark {
        valid: vec![true; sequences.len()],
        sequences,
        occluded,
        grid: (spec.n_scenes, per_scene),
        chip_size: n,
        context_len: spec.context_len,
    })
}

/// What a model is scored on: its prediction of the final frame, and the
/// target it is compared with (the high-pass model is compared with the
/// filtered target).
pub struct ModelOutput {
    pub predictions: Vec<Patch>,
    pub targets: Vec<Patch>,
}

pub fn run_model(
    kind: ModelKind,
    bench: &Benchmark,
    hp: &HighPassConfig,
    ml: Option<(&ParamStore, &ModelConfig)>,
    seed: u64,
) -> Result<ModelOutput, EvalError> {
    let targets = bench.targets();
    let last_context = |s: &Vec<Vec<f64>>| -> Result<Patch, EvalError> {
        Ok(bench.patch(persistence_predict(&s[..bench.context_len])?))
    };
    match kind {
        ModelKind::Persistence => Ok(ModelOutput {
            predictions: bench.sequences.iter().map(last_context).collect::<Result<_, _>>()?,
            targets,
        }),
        ModelKind::Highpass => {
            let predictions = bench
                .sequences
                .iter()
                .map(|s| Ok(highpass(&last_context(s)?, hp)?))
                .collect::<Result<_, EvalError>>()?;
            let targets = targets.iter().map(|t| highpass(t, hp)).collect::<Result<_, _>>()?;
            Ok(ModelOutput { predictions, targets })
        }
        ModelKind::Ml => {
            let (params, cfg) = ml.ok_or(EvalError::MissingParams)?;
            let rolled = rollout_many(&bench.contexts(), params, cfg, seed)?;
            let predictions = rolled
                .into_iter()
                .map(|mut frames| bench.patch(frames.pop().expect("horizon >= 1")))
                .collect();
            Ok(ModelOutput { predictions, targets })
        }
    }
}

/// Score every requested model on `bench` over a shared chip set.
pub fn evaluate_benchmark(
    bench: &Benchmark,
    models: &[ModelKind],
    hp: &HighPassConfig,
    ml: Option<(&ParamStore, &ModelConfig)>,
    seed: u64,
) -> Result<Vec<(EvalSummary, CorrelationMap)>, EvalError> {
    let validity = &bench.valid;
    let mut maps = Vec::with_capacity(models.len());
    for &kind in models {
        let out = run_model(kind, bench, hp, ml, seed)?;
        maps.push((
            kind.name().to_string(),
            correlation_map(&out.predictions, &out.targets, validity, bench.grid)?,
        ));
    }
    let summaries = compare_models(&maps)?;
    Ok(summaries
        .into_iter()
        .zip(maps)
        .map(|(s, (_, m))| (s, m))
        .collect())
}
