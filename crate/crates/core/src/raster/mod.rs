//! Single-band rasters, their on-disk formats, and synthetic scene series.

mod icef;
mod manifest;
mod pgm;
pub mod synth;

use std::io;

use thiserror::Error;

pub use icef::{load_raster, read_raster, save_raster, write_raster, ICEF_MAGIC, ICEF_VERSION};
pub use manifest::{FrameEntry, Manifest};
pub use pgm::{export_pgm, pgm_value, save_pgm};
pub use synth::{add_gaussian_noise, synth_series, OcclusionSpec, SynthOutput, SynthSpec};

/// Ground sampling distance of the source imagery.
pub const DEFAULT_PIXEL_SIZE_M: f32 = 30.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("{what} has {got} entries, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("pixel ({row}, {col}) = {value} is outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f32 },
    #[error("non-finite pixel ({row}, {col}) outside the nodata mask")]
    NonFinite { row: usize, col: usize },
    #[error("pixel size must be positive and finite, got {0}")]
    PixelSize(f32),
    #[error("timestamp must be finite, got {0}")]
    Timestamp(f64),
    #[error("bad magic {0:?}, expected \"ICEF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported ICEF version {0}")]
    Version(u8),
    #[error("stream truncated while reading {0}")]
    Truncated(&'static str),
    #[error("mask byte {value} at index {index} is neither 0 nor 1")]
    MaskByte { index: usize, value: u8 },
    #[error("empty scene series")]
    EmptySeries,
    #[error("frame {index} is {got:?}, series frames are {expected:?}")]
    FrameMismatch {
        index: usize,
        got: (usize, usize, f32),
        expected: (usize, usize, f32),
    },
    #[error("timestamps must strictly increase (frame {index})")]
    Timestamps { index: usize },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("PGM range needs lo < hi, got lo={lo} hi={hi}")]
    PgmRange { lo: f64, hi: f64 },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// A single-band reflectance grid with a nodata mask.
///
/// Pixels under the mask are stored as NaN; the mask is authoritative.
/// Equality is bitwise on every field.
#[derive(Clone, Debug)]
pub struct Raster {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    nodata: Vec<bool>,
    timestamp: f64,
    pixel_size_m: f32,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        mut pixels: Vec<f32>,
        nodata: Vec<bool>,
        timestamp: f64,
        pixel_size_m: f32,
    ) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyDimensions { width, height });
        }
        let n = width * height;
        if pixels.len() != n {
            return Err(RasterError::Length {
                what: "pixels",
                got: pixels.len(),
                expected: n,
            });
        }
        if nodata.len() != n {
            return Err(RasterError::Length {
                what: "nodata mask",
                got: nodata.len(),
                expected: n,
            });
        }
        if !(pixel_size_m.is_finite() && pixel_size_m > 0.0) {
            return Err(RasterError::PixelSize(pixel_size_m));
        }
        if !timestamp.is_finite() {
            return Err(RasterError::Timestamp(timestamp));
        }
        for (i, (p, &masked)) in pixels.iter_mut().zip(&nodata).enumerate() {
            if masked {
                *p = f32::NAN;
                continue;
            }
            let (row, col) = (i / width, i % width);
            if !p.is_finite() {
                return Err(RasterError::NonFinite { row, col });
            }
            if !(0.0..=1.0).contains(p) {
                return Err(RasterError::OutOfRange { row, col, value: *p });
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
            nodata,
            timestamp,
            pixel_size_m,
        })
    }

    /// Fully valid raster at t = 0 with the default pixel size.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, RasterError> {
        let n = width * height;
        Self::new(width, height, pixels, vec![false; n], 0.0, DEFAULT_PIXEL_SIZE_M)
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Result<Self, RasterError> {
        if !timestamp.is_finite() {
            return Err(RasterError::Timestamp(timestamp));
        }
        self.timestamp = timestamp;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn nodata(&self) -> &[bool] {
        &self.nodata
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn pixel_size_m(&self) -> f32 {
        self.pixel_size_m
    }

    pub fn value(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn is_nodata(&self, row: usize, col: usize) -> bool {
        self.nodata[row * self.width + col]
    }

    /// Valid pixel value, `None` under the mask.
    pub fn get(&self, row: usize, col: usize) -> Option<f32> {
        (!self.is_nodata(row, col)).then(|| self.value(row, col))
    }

    pub fn nodata_fraction(&self) -> f64 {
        self.nodata.iter().filter(|&&m| m).count() as f64 / self.nodata.len() as f64
    }

    /// Copy of the rectangle `rows x cols` starting at `(row, col)` as
    /// `(values, mask)`. The rectangle must lie inside the raster.
    pub fn window(&self, row: usize, col: usize, rows: usize, cols: usize) -> (Vec<f32>, Vec<bool>) {
        assert!(row + rows <= self.height && col + cols <= self.width);
        let mut values = Vec::with_capacity(rows * cols);
        let mut mask = Vec::with_capacity(rows * cols);
        for r in row..row + rows {
            let start = r * self.width + col;
            values.extend_from_slice(&self.pixels[start..start + cols]);
            mask.extend_from_slice(&self.nodata[start..start + cols]);
        }
        (values, mask)
    }
}

impl PartialEq for Raster {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.nodata == other.nodata
            && self.timestamp.to_bits() == other.timestamp.to_bits()
            && self.pixel_size_m.to_bits() == other.pixel_size_m.to_bits()
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Ordered frames of one region sharing geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSeries {
    frames: Vec<Raster>,
    region_id: String,
}

impl SceneSeries {
    pub fn new(frames: Vec<Raster>, region_id: impl Into<String>) -> Result<Self, RasterError> {
        let first = frames.first().ok_or(RasterError::EmptySeries)?;
        let expected = (first.width, first.height, first.pixel_size_m);
        for (index, f) in frames.iter().enumerate().skip(1) {
            let got = (f.width, f.height, f.pixel_size_m);
            if got.0 != expected.0 || got.1 != expected.1 || got.2.to_bits() != expected.2.to_bits() {
                return Err(RasterError::FrameMismatch {
                    index,
                    got,
                    expected,
                });
            }
            if f.timestamp <= frames[index - 1].timestamp {
                return Err(RasterError::Timestamps { index });
            }
        }
        Ok(Self {
            frames,
            region_id: region_id.into(),
        })
    }

    pub fn frames(&self) -> &[Raster] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Raster> {
        self.frames
    }

    pub fn region_id(&self) -> &str {
        &self.region_id
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn pixel_size_m(&self) -> f32 {
        self.frames[0].pixel_size_m
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(Raster::timestamp).collect()
    }
}
