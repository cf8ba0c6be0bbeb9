pub mod baselines;
pub mod chip;
pub mod cli;
pub mod correlation;
pub mod evaluation;
pub mod grid;
pub mod predictor;
pub mod raster;
pub mod tracking;

pub use grid::Grid;
pub use raster::{Raster, RasterError, SceneSeries};
