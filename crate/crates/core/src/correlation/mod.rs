//! Normalized cross-correlation between equally sized images, full
//! correlation surfaces over a search region, and best-match selection.

mod direct;
mod fft;

use thiserror::Error;

use crate::chip::Chip;
use crate::raster::Raster;

#[derive(Debug, Error, PartialEq)]
pub enum CorrelationError {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("correlation needs at least 2 pixels, got {0}")]
    TooSmall(usize),
    #[error("correlation undefined: {0} image has zero variance")]
    ZeroVariance(&'static str),
    #[error("template {template:?} is larger than search region {search:?}")]
    TemplateTooLarge {
        template: (usize, usize),
        search: (usize, usize),
    },
    #[error("patch {rows}x{cols} needs {} values, got {len}", rows * cols)]
    PatchLength { rows: usize, cols: usize, len: usize },
    #[error("every candidate offset is invalid")]
    NoValidOffset,
}

fn is_constant(values: &[f64]) -> bool {
    values.iter().all(|v| v.to_bits() == values[0].to_bits())
}

/// Normalized cross-correlation (Pearson coefficient) of two equally sized
/// images given as flat slices. Errors if either
/// image is constant.
pub fn ncc<T: Copy + Into<f64>>(r: &[T], s: &[T]) -> Result<f64, CorrelationError> {
    if r.len() != s.len() {
        return Err(CorrelationError::ShapeMismatch {
            lhs: (1, r.len()),
            rhs: (1, s.len()),
        });
    }
    if r.len() < 2 {
        return Err(CorrelationError::TooSmall(r.len()));
    }
    let r: Vec<f64> = r.iter().map(|&v| v.into()).collect();
    let s: Vec<f64> = s.iter().map(|&v| v.into()).collect();
    ncc_f64(&r, &s)
}

pub(crate) fn ncc_f64(r: &[f64], s: &[f64]) -> Result<f64, CorrelationError> {
    if is_constant(r) {
        return Err(CorrelationError::ZeroVariance("first"));
    }
    if is_constant(s) {
        return Err(CorrelationError::ZeroVariance("second"));
    }
    let n = r.len() as f64;
    let mr = r.iter().sum::<f64>() / n;
    let ms = s.iter().sum::<f64>() / n;
    let (mut num, mut rr, mut ss) = (0.0, 0.0, 0.0);
    for (&a, &b) in r.iter().zip(s) {
        let (da, db) = (a - mr, b - ms);
        num += da * db;
        rr += da * da;
        ss += db * db;
    }
    if rr == 0.0 {
        return Err(CorrelationError::ZeroVariance("first"));
    }
    if ss == 0.0 {
        return Err(CorrelationError::ZeroVariance("second"));
    }
    Ok((num / (rr.sqrt() * ss.sqrt())).clamp(-1.0, 1.0))
}

/// A rectangular image with an optional nodata mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub nodata: Vec<bool>,
}

impl Patch {
    /// Non-finite values are treated as nodata.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, CorrelationError> {
        if values.len() != rows * cols || values.is_empty() {
            return Err(CorrelationError::PatchLength {
                rows,
                cols,
                len: values.len(),
            });
        }
        let nodata = values.iter().map(|v| !v.is_finite()).collect();
        Ok(Self {
            rows,
            cols,
            values,
            nodata,
        })
    }

    pub fn from_chip(chip: &Chip) -> Self {
        Self {
            rows: chip.size,
            cols: chip.size,
            values: chip.values_f64(),
            nodata: chip.nodata.clone(),
        }
    }

    pub fn from_raster(r: &Raster, row: usize, col: usize, rows: usize, cols: usize) -> Self {
        let (values, nodata) = r.window(row, col, rows, cols);
        Self {
            rows,
            cols,
            values: values.into_iter().map(f64::from).collect(),
            nodata,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn has_nodata(&self) -> bool {
        self.nodata.iter().any(|&m| m)
    }

    /// Values with nodata replaced by the mean of the valid pixels.
    pub(crate) fn filled(&self) -> Vec<f64> {
        let valid: Vec<f64> = self
            .values
            .iter()
            .zip(&self.nodata)
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
            .collect();
        if valid.len() == self.values.len() {
            return self.values.clone();
        }
        let mean = if valid.is_empty() {
            0.0
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        };
        self.values
            .iter()
            .zip(&self.nodata)
            .map(|(&v, &m)| if m { mean } else { v })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Direct,
    #[default]
    Fft,
}

impl std::str::FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(Backend::Direct),
            "fft" => Ok(Backend::Fft),
            other => Err(format!("unknown backend {other:?} (expected direct or fft)")),
        }
    }
}

/// Scores over every placement of a template inside a search region.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationSurface {
    pub rows: usize,
    pub cols: usize,
    /// Row-major; NaN where invalid.
    pub scores: Vec<f64>,
    pub valid: Vec<bool>,
    /// `(drow, dcol)` of element `(0, 0)`.
    pub offset_origin: (i64, i64),
}

impl CorrelationSurface {
    pub fn score(&self, r: usize, c: usize) -> Option<f64> {
        let k = r * self.cols + c;
        self.valid[k].then_some(self.scores[k])
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn with_offset_origin(mut self, origin: (i64, i64)) -> Self {
        self.offset_origin = origin;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchResult {
    pub offset: (i64, i64),
    /// Grid position of the match within the surface.
    pub index: (usize, usize),
    pub score: f64,
    /// Best score among the other valid offsets.
    pub runner_up: Option<f64>,
}

/// Correlation of `template` against every same-sized window of `search`.
///
/// Windows containing nodata or having zero variance are invalid. Template
/// nodata is filled with the template mean. A constant template leaves every
/// offset invalid.
pub fn ncc_surface(
    template: &Patch,
    search: &Patch,
    backend: Backend,
) -> Result<CorrelationSurface, CorrelationError> {
    if template.rows > search.rows || template.cols > search.cols {
        return Err(CorrelationError::TemplateTooLarge {
            template: template.shape(),
            search: search.shape(),
        });
    }
    let rows = search.rows - template.rows + 1;
    let cols = search.cols - template.cols + 1;
    let t = template.filled();
    let n = t.len() as f64;
    let mean = t.iter().sum::<f64>() / n;
    let dev: Vec<f64> = t.iter().map(|v| v - mean).collect();
    let norm = dev.iter().map(|d| d * d).sum::<f64>().sqrt();
    if is_constant(&t) || norm == 0.0 {
        return Ok(CorrelationSurface {
            rows,
            cols,
            scores: vec![f64::NAN; rows * cols],
            valid: vec![false; rows * cols],
            offset_origin: (0, 0),
        });
    }
    let tmpl = Template {
        rows: template.rows,
        cols: template.cols,
        dev,
        norm,
    };
    let (scores, valid) = match backend {
        Backend::Direct => direct::surface(&tmpl, search, rows, cols),
        Backend::Fft => fft::surface(&tmpl, search, rows, cols),
    };
    Ok(CorrelationSurface {
        rows,
        cols,
        scores,
        valid,
        offset_origin: (0, 0),
    })
}

/// Mean-removed template shared by both backends.
pub(crate) struct Template {
    pub rows: usize,
    pub cols: usize,
    pub dev: Vec<f64>,
    pub norm: f64,
}

/// Window-nodata counts via a summed-area table; `true` where a window is clean.
pub(crate) fn clean_windows(search: &Patch, th: usize, tw: usize, rows: usize, cols: usize) -> Vec<bool> {
    if !search.has_nodata() {
        return vec![true; rows * cols];
    }
    let w = search.cols + 1;
    let mut sat = vec![0u32; (search.rows + 1) * w];
    for r in 0..search.rows {
        for c in 0..search.cols {
            sat[(r + 1) * w + c + 1] = search.nodata[r * search.cols + c] as u32
                + sat[r * w + c + 1]
                + sat[(r + 1) * w + c]
                - sat[r * w + c];
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let count = sat[(r + th) * w + c + tw] + sat[r * w + c] - sat[r * w + c + tw] - sat[(r + th) * w + c];
            out.push(count == 0);
        }
    }
    out
}

/// Highest valid score; ties go to the offset nearest the surface centre and
/// then to row-major order.
pub fn best_match(surface: &CorrelationSurface) -> Result<MatchResult, CorrelationError> {
    let dist = |r: usize, c: usize| {
        let dr = 2 * r as i64 - (surface.rows as i64 - 1);
        let dc = 2 * c as i64 - (surface.cols as i64 - 1);
        dr * dr + dc * dc
    };
    let mut best: Option<(usize, f64, i64)> = None;
    let mut scores_seen = 0usize;
    for k in 0..surface.scores.len() {
        if !surface.valid[k] {
            continue;
        }
        scores_seen += 1;
        let s = surface.scores[k];
        let d = dist(k / surface.cols, k % surface.cols);
        let better = match best {
            None => true,
            Some((_, bs, bd)) => s > bs || (s == bs && d < bd),
        };
        if better {
            best = Some((k, s, d));
        }
    }
    let (k, score, _) = best.ok_or(CorrelationError::NoValidOffset)?;
    let runner_up = (scores_seen > 1).then(|| {
        surface
            .scores
            .iter()
            .zip(&surface.valid)
            .enumerate()
            .filter(|&(i, (_, &v))| v && i != k)
            .map(|(_, (&s, _))| s)
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let index = (k / surface.cols, k % surface.cols);
    Ok(MatchResult {
        offset: (
            surface.offset_origin.0 + index.0 as i64,
            surface.offset_origin.1 + index.1 as i64,
        ),
        index,
        score,
        runner_up,
    })
}

/// Wall-clock cost of both backends on one random template/search pair.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct BackendTiming {
    pub size: usize,
    pub search: usize,
    pub direct_ms: f64,
    pub fft_ms: f64,
    pub max_abs_diff: f64,
}

/// Times `repeats` surfaces of a `size` template inside a `search` window
/// and keeps the fastest run of each backend.
pub fn time_backends(size: usize, search: usize, repeats: usize, seed: u64) -> Result<BackendTiming, CorrelationError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut random = |n: usize| Patch::new(n, n, (0..n * n).map(|_| rng.random()).collect());
    let t = random(size)?;
    let s = random(search)?;
    let run = |backend| -> Result<(f64, CorrelationSurface), CorrelationError> {
        let mut best = f64::INFINITY;
        let mut out = None;
        for _ in 0..repeats.max(1) {
            let start = std::time::Instant::now();
            let surface = ncc_surface(&t, &s, backend)?;
            best = best.min(start.elapsed().as_secs_f64() * 1e3);
            out = Some(surface);
        }
        Ok((best, out.expect("at least one run")))
    };
    let (direct_ms, a) = run(Backend::Direct)?;
    let (fft_ms, b) = run(Backend::Fft)?;
    let max_abs_diff = a
        .scores
        .iter()
        .zip(&b.scores)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok(BackendTiming {
        size,
        search,
        direct_ms,
        fft_ms,
        max_abs_diff,
    })
}
