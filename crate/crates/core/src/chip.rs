//! Cutting frames into a regular grid of square chips.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{save_raster, Raster, RasterError, SceneSeries};

#[derive(Debug, Error)]
pub enum ChipError {
    #[error("chip size must be >= 8, got {0}")]
    ChipSize(usize),
    #[error("stride must be in 1..={chip_size}, got {stride}")]
    Stride { stride: usize, chip_size: usize },
    #[error("frame {width}x{height} is smaller than chip size {chip_size}")]
    FrameTooSmall {
        width: usize,
        height: usize,
        chip_size: usize,
    },
    #[error("chip at ({row}, {col}) size {size} does not fit in {width}x{height} frame")]
    OutOfBounds {
        row: usize,
        col: usize,
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("max_nodata must be in [0, 1], got {0}")]
    Threshold(f64),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChipGridSpec {
    pub chip_size: usize,
    pub stride: usize,
}

impl Default for ChipGridSpec {
    fn default() -> Self {
        Self::non_overlapping(128)
    }
}

impl ChipGridSpec {
    pub fn new(chip_size: usize, stride: usize) -> Result<Self, ChipError> {
        let spec = Self { chip_size, stride };
        spec.validate()?;
        Ok(spec)
    }

    pub fn non_overlapping(chip_size: usize) -> Self {
        Self {
            chip_size,
            stride: chip_size,
        }
    }

    pub fn validate(&self) -> Result<(), ChipError> {
        if self.chip_size < 8 {
            return Err(ChipError::ChipSize(self.chip_size));
        }
        if self.stride == 0 || self.stride > self.chip_size {
            return Err(ChipError::Stride {
                stride: self.stride,
                chip_size: self.chip_size,
            });
        }
        Ok(())
    }

    /// `(grid rows, grid cols)` for a `width x height` frame. Trailing partial
    /// tiles are dropped.
    pub fn grid_shape(&self, width: usize, height: usize) -> (usize, usize) {
        let count = |n: usize| {
            if n < self.chip_size {
                0
            } else {
                (n - self.chip_size) / self.stride + 1
            }
        };
        (count(height), count(width))
    }

    /// Pixel origin of grid index `j`.
    pub fn origin_of(&self, j: usize, width: usize, height: usize) -> Option<(usize, usize)> {
        let (gr, gc) = self.grid_shape(width, height);
        (j < gr * gc).then(|| ((j / gc) * self.stride, (j % gc) * self.stride))
    }
}

/// A square subscene `x^j_i` of frame `i` at grid position `j`.
#[derive(Clone, Debug)]
pub struct Chip {
    pub size: usize,
    /// Row-major values, NaN under the mask.
    pub values: Vec<f32>,
    pub nodata: Vec<bool>,
    pub origin: (usize, usize),
    pub grid_index: usize,
    pub frame_index: usize,
    pub nodata_fraction: f64,
}

impl PartialEq for Chip {
    fn eq(&self, other: &Self) -> bool {
        self.size == other.size
            && self.origin == other.origin
            && self.grid_index == other.grid_index
            && self.frame_index == other.frame_index
            && self.nodata == other.nodata
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Chip {
    pub fn values_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn has_nodata(&self) -> bool {
        self.nodata_fraction > 0.0
    }

    pub fn to_raster(&self, timestamp: f64, pixel_size_m: f32) -> Result<Raster, RasterError> {
        Raster::new(
            self.size,
            self.size,
            self.values.clone(),
            self.nodata.clone(),
            timestamp,
            pixel_size_m,
        )
    }
}

/// Cut one `size x size` chip at `origin`.
pub fn cut_chip(
    frame: &Raster,
    origin: (usize, usize),
    size: usize,
    grid_index: usize,
    frame_index: usize,
) -> Result<Chip, ChipError> {
    let (row, col) = origin;
    if row + size > frame.height() || col + size > frame.width() {
        return Err(ChipError::OutOfBounds {
            row,
            col,
            size,
            width: frame.width(),
            height: frame.height(),
        });
    }
    let (values, nodata) = frame.window(row, col, size, size);
    let nodata_fraction = nodata.iter().filter(|&&m| m).count() as f64 / (size * size) as f64;
    Ok(Chip {
        size,
        values,
        nodata,
        origin,
        grid_index,
        frame_index,
        nodata_fraction,
    })
}

/// All grid chips of `frame` in row-major order with `j` counting from 0.
pub fn chip_frame(frame: &Raster, frame_index: usize, spec: &ChipGridSpec) -> Result<Vec<Chip>, ChipError> {
    spec.validate()?;
    if frame.width() < spec.chip_size || frame.height() < spec.chip_size {
        return Err(ChipError::FrameTooSmall {
            width: frame.width(),
            height: frame.height(),
            chip_size: spec.chip_size,
        });
    }
    let (gr, gc) = spec.grid_shape(frame.width(), frame.height());
    let mut chips = Vec::with_capacity(gr * gc);
    for gi in 0..gr {
        for gj in 0..gc {
            let origin = (gi * spec.stride, gj * spec.stride);
            chips.push(cut_chip(frame, origin, spec.chip_size, chips.len(), frame_index)?);
        }
    }
    Ok(chips)
}

/// Inclusive nodata threshold test.
pub fn usable(chip: &Chip, max_nodata: f64) -> Result<bool, ChipError> {
    if !(0.0..=1.0).contains(&max_nodata) {
        return Err(ChipError::Threshold(max_nodata));
    }
    Ok(chip.nodata_fraction <= max_nodata)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipIndexEntry {
    pub region_id: String,
    pub i: usize,
    pub j: usize,
    pub origin: (usize, usize),
    pub nodata_fraction: f64,
    pub path: String,
}

pub const CHIP_INDEX_FILE: &str = "chips.json";

/// Write every chip of every frame as `chip_iNNN_jNNNNN.icef` plus a JSON index.
pub fn write_chip_dataset(
    series: &SceneSeries,
    spec: &ChipGridSpec,
    dir: impl AsRef<Path>,
) -> Result<Vec<ChipIndexEntry>, ChipError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(RasterError::from)?;
    let mut index = Vec::new();
    for (i, frame) in series.frames().iter().enumerate() {
        for chip in chip_frame(frame, i, spec)? {
            let path = format!("chip_i{i:03}_j{:05}.icef", chip.grid_index);
            save_raster(
                &chip.to_raster(frame.timestamp(), frame.pixel_size_m())?,
                dir.join(&path),
            )?;
            index.push(ChipIndexEntry {
                region_id: series.region_id().to_string(),
                i,
                j: chip.grid_index,
                origin: chip.origin,
                nodata_fraction: chip.nodata_fraction,
                path,
            });
        }
    }
    let json = serde_json::to_vec_pretty(&index).map_err(RasterError::from)?;
    fs::write(dir.join(CHIP_INDEX_FILE), json).map_err(RasterError::from)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(width: usize, height: usize) -> Raster {
        let n = width * height;
        Raster::from_pixels(width, height, (0..n).map(|k| k as f32 / n as f32).collect()).unwrap()
    }

    #[test]
    fn exact_tiling() {
        let chips = chip_frame(&ramp(256, 256), 0, &ChipGridSpec::non_overlapping(128)).unwrap();
        let origins: Vec<_> = chips.iter().map(|c| c.origin).collect();
        assert_eq!(origins, vec![(0, 0), (0, 128), (128, 0), (128, 128)]);
        assert_eq!(chips.iter().map(|c| c.grid_index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_and_trailing() {
        let spec = ChipGridSpec::default();
        assert_eq!(chip_frame(&ramp(128, 128), 0, &spec).unwrap().len(), 1);
        assert_eq!(chip_frame(&ramp(128, 130), 0, &spec).unwrap().len(), 1);
        assert!(matches!(
            chip_frame(&ramp(100, 130), 0, &spec),
            Err(ChipError::FrameTooSmall { .. })
        ));
    }

    #[test]
    fn overlapping_stride() {
        let spec = ChipGridSpec::new(16, 8).unwrap();
        assert_eq!(spec.grid_shape(40, 32), (3, 4));
        assert_eq!(spec.origin_of(5, 40, 32), Some((8, 8)));
        assert_eq!(spec.origin_of(12, 40, 32), None);
        assert!(ChipGridSpec::new(4, 4).is_err());
        assert!(ChipGridSpec::new(16, 17).is_err());
        assert!(ChipGridSpec::new(16, 0).is_err());
    }

    #[test]
    fn usable_threshold_is_inclusive() {
        let mut nodata = vec![false; 64];
        nodata[..16].iter_mut().for_each(|m| *m = true);
        let frame = Raster::new(8, 8, vec![0.5; 64], nodata, 0.0, 30.0).unwrap();
        let chip = cut_chip(&frame, (0, 0), 8, 0, 0).unwrap();
        assert_eq!(chip.nodata_fraction, 0.25);
        assert!(usable(&chip, 0.25).unwrap());
        assert!(!usable(&chip, 0.2).unwrap());
        let empty = Raster::new(8, 8, vec![0.0; 64], vec![true; 64], 0.0, 30.0).unwrap();
        let corner = cut_chip(&empty, (0, 0), 8, 0, 0).unwrap();
        assert!(!usable(&corner, 0.99).unwrap());
        assert!(usable(&corner, 1.0).unwrap());
        assert!(usable(&chip, 1.5).is_err());
    }

    #[test]
    fn chip_values_match_parent() {
        let frame = ramp(40, 24);
        let spec = ChipGridSpec::non_overlapping(8);
        let chips = chip_frame(&frame, 3, &spec).unwrap();
        assert_eq!(chips.len(), 15);
        let mut covered = vec![0u8; 40 * 24];
        for chip in &chips {
            assert_eq!(chip.frame_index, 3);
            for r in 0..8 {
                for c in 0..8 {
                    let (fr, fc) = (chip.origin.0 + r, chip.origin.1 + c);
                    assert_eq!(chip.values[r * 8 + c].to_bits(), frame.value(fr, fc).to_bits());
                    covered[fr * 40 + fc] += 1;
                }
            }
        }
        assert!(covered.iter().all(|&n| n == 1));
    }
}
