use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::RasterError;
use crate::grid::Grid;

/// 8-bit level of `v` in the window `[lo, hi]`, rounding half up.
/// Non-finite values (nodata) map to 0.
pub fn pgm_value(v: f64, lo: f64, hi: f64) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (255.0 * t + 0.5).floor() as u8
}

/// Binary PGM (`P5`, maxval 255) rendering of `grid`.
pub fn export_pgm<W: Write>(grid: &Grid, lo: f64, hi: f64, mut w: W) -> Result<(), RasterError> {
    if !(lo < hi) {
        return Err(RasterError::PgmRange { lo, hi });
    }
    let mut out = format!("P5\n{} {}\n255\n", grid.cols(), grid.rows()).into_bytes();
    out.extend(grid.data().iter().map(|&v| pgm_value(v, lo, hi)));
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

pub fn save_pgm(grid: &Grid, lo: f64, hi: f64, path: impl AsRef<Path>) -> Result<(), RasterError> {
    if !(lo < hi) {
        return Err(RasterError::PgmRange { lo, hi });
    }
    export_pgm(grid, lo, hi, BufWriter::new(File::create(path)?))
}
