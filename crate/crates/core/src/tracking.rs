//! Chained enlarged-window tracking of chips through a scene series.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chip::{chip_frame, cut_chip, usable, Chip, ChipError, ChipGridSpec};
use crate::correlation::{best_match, ncc_surface, Backend, CorrelationError, Patch};
use crate::raster::{Raster, SceneSeries};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("scale factor must be > 1, got {0}")]
    ScaleFactor(f64),
    #[error("min_score must be in [-1, 1], got {0}")]
    MinScore(f64),
    #[error("search window {size} exceeds frame {width}x{height}")]
    WindowTooLarge {
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("chip at {origin:?} size {size} does not fit in {width}x{height} frame")]
    ChipOutside {
        origin: (usize, usize),
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("tracking needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("timestamps must strictly increase, got dt = {0} days")]
    NonPositiveInterval(f64),
    #[error("record has no steps")]
    EmptyRecord,
    #[error("no timestamp for frame {0}")]
    MissingTimestamp(usize),
    #[error(transparent)]
    Chip(#[from] ChipError),
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub scale_factor: f64,
    pub min_score: f64,
    pub max_nodata: f64,
    #[serde(default)]
    pub backend: Backend,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            scale_factor: 1.5,
            min_score: 0.0,
            max_nodata: 0.0,
            backend: Backend::Fft,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if !(self.scale_factor > 1.0) || !self.scale_factor.is_finite() {
            return Err(TrackError::ScaleFactor(self.scale_factor));
        }
        if !(-1.0..=1.0).contains(&self.min_score) {
            return Err(TrackError::MinScore(self.min_score));
        }
        if !(0.0..=1.0).contains(&self.max_nodata) {
            return Err(ChipError::Threshold(self.max_nodata).into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Square search window of side `round(c * chip_size)` centred on the chip,
/// shifted to stay inside a `width x height` frame.
pub fn enlarge_window(
    origin: (usize, usize),
    chip_size: usize,
    c: f64,
    width: usize,
    height: usize,
) -> Result<Rect, TrackError> {
    if !(c > 1.0) || !c.is_finite() {
        return Err(TrackError::ScaleFactor(c));
    }
    if origin.0 + chip_size > height || origin.1 + chip_size > width {
        return Err(TrackError::ChipOutside {
            origin,
            size: chip_size,
            width,
            height,
        });
    }
    let size = (c * chip_size as f64).round() as usize;
    if size > width || size > height {
        return Err(TrackError::WindowTooLarge {
            size,
            width,
            height,
        });
    }
    let margin = (size - chip_size) / 2;
    let place = |o: usize, extent: usize| o.saturating_sub(margin).min(extent - size);
    Ok(Rect {
        row: place(origin.0, height),
        col: place(origin.1, width),
        rows: size,
        cols: size,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackStep {
    pub frame_index: usize,
    /// Displacement from the previously adopted origin; `(0, 0)` when no match.
    pub offset: (i64, i64),
    /// Best correlation, absent when every candidate was invalid.
    pub score: Option<f64>,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackRecord {
    pub grid_index: usize,
    pub initial_origin: (usize, usize),
    pub steps: Vec<TrackStep>,
    /// Adopted subscene per step; `None` where the track froze.
    pub chips: Vec<Option<Chip>>,
}

impl TrackRecord {
    /// Chip origin after each step.
    pub fn origins(&self) -> Vec<(usize, usize)> {
        let mut cur = (self.initial_origin.0 as i64, self.initial_origin.1 as i64);
        self.steps
            .iter()
            .map(|s| {
                if s.accepted {
                    cur = (cur.0 + s.offset.0, cur.1 + s.offset.1);
                }
                (cur.0 as usize, cur.1 as usize)
            })
            .collect()
    }

    /// Total displacement from the initial origin after each step.
    pub fn cumulative_offsets(&self) -> Vec<(i64, i64)> {
        self.origins()
            .into_iter()
            .map(|(r, c)| {
                (
                    r as i64 - self.initial_origin.0 as i64,
                    c as i64 - self.initial_origin.1 as i64,
                )
            })
            .collect()
    }
}

/// Match `prev` inside the enlarged window of `next_frame`. An unaccepted step
/// adopts nothing and leaves the track at `prev.origin`.
pub fn track_step(
    prev: &Chip,
    next_frame: &Raster,
    next_index: usize,
    cfg: &SearchConfig,
) -> Result<(TrackStep, Option<Chip>), TrackError> {
    cfg.validate()?;
    let win = enlarge_window(
        prev.origin,
        prev.size,
        cfg.scale_factor,
        next_frame.width(),
        next_frame.height(),
    )?;
    let search = Patch::from_raster(next_frame, win.row, win.col, win.rows, win.cols);
    let surface = ncc_surface(&Patch::from_chip(prev), &search, cfg.backend)?.with_offset_origin((
        win.row as i64 - prev.origin.0 as i64,
        win.col as i64 - prev.origin.1 as i64,
    ));
    let frozen = |score| TrackStep {
        frame_index: next_index,
        offset: (0, 0),
        score,
        accepted: false,
    };
    let m = match best_match(&surface) {
        Ok(m) => m,
        Err(CorrelationError::NoValidOffset) => return Ok((frozen(None), None)),
        Err(e) => return Err(e.into()),
    };
    if m.score < cfg.min_score {
        return Ok((frozen(Some(m.score)), None));
    }
    let origin = (win.row + m.index.0, win.col + m.index.1);
    let chip = cut_chip(next_frame, origin, prev.size, prev.grid_index, next_index)?;
    Ok((
        TrackStep {
            frame_index: next_index,
            offset: m.offset,
            score: Some(m.score),
            accepted: true,
        },
        Some(chip),
    ))
}

/// Chain one chip of frame 0 through every later frame.
pub fn track_chip(series: &SceneSeries, start: Chip, cfg: &SearchConfig) -> Result<TrackRecord, TrackError> {
    let mut record = TrackRecord {
        grid_index: start.grid_index,
        initial_origin: start.origin,
        steps: Vec::with_capacity(series.len() - 1),
        chips: Vec::with_capacity(series.len() - 1),
    };
    let mut template = start;
    for (i, frame) in series.frames().iter().enumerate().skip(1) {
        let (step, adopted) = track_step(&template, frame, i, cfg)?;
        record.steps.push(step);
        if let Some(chip) = &adopted {
            template = chip.clone();
        }
        record.chips.push(adopted);
    }
    Ok(record)
}

/// Tracks for every usable chip of the first frame, ordered by grid index.
pub fn track_series(
    series: &SceneSeries,
    grid: &ChipGridSpec,
    cfg: &SearchConfig,
) -> Result<Vec<TrackRecord>, TrackError> {
    cfg.validate()?;
    if series.len() < 2 {
        return Err(TrackError::TooFewFrames(series.len()));
    }
    let mut starts = Vec::new();
    for chip in chip_frame(&series.frames()[0], 0, grid)? {
        if usable(&chip, cfg.max_nodata)? {
            starts.push(chip);
        }
    }
    starts
        .into_par_iter()
        .map(|chip| track_chip(series, chip, cfg))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocitySample {
    pub frame_index: usize,
    pub speed_m_per_day: f64,
    /// Degrees clockwise from grid north; absent for zero displacement.
    pub heading_deg: Option<f64>,
}

/// Speed and heading of every accepted step. The interval of a step runs
/// from the last accepted frame (frame 0 initially).
pub fn velocity(
    record: &TrackRecord,
    timestamps: &[f64],
    pixel_size_m: f64,
) -> Result<Vec<VelocitySample>, TrackError> {
    if record.steps.is_empty() {
        return Err(TrackError::EmptyRecord);
    }
    let time = |i: usize| timestamps.get(i).copied().ok_or(TrackError::MissingTimestamp(i));
    let mut last = 0usize;
    let mut out = Vec::new();
    for step in &record.steps {
        if !step.accepted {
            continue;
        }
        let dt = time(step.frame_index)? - time(last)?;
        if !(dt > 0.0) {
            return Err(TrackError::NonPositiveInterval(dt));
        }
        let (dr, dc) = (step.offset.0 as f64, step.offset.1 as f64);
        let heading = (step.offset != (0, 0)).then(|| dc.atan2(-dr).to_degrees().rem_euclid(360.0));
        out.push(VelocitySample {
            frame_index: step.frame_index,
            speed_m_per_day: dr.hypot(dc) * pixel_size_m / dt,
            heading_deg: heading,
        });
        last = step.frame_index;
    }
    Ok(out)
}
