use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_raster, save_raster, RasterError, SceneSeries};

/// JSON listing of one scene series. Frame paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub region_id: String,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub path: String,
    pub timestamp: f64,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    /// Write every frame as `frame_NNN.icef` plus `manifest.json` into `dir`.
    pub fn write_series(series: &SceneSeries, dir: impl AsRef<Path>) -> Result<Self, RasterError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut frames = Vec::with_capacity(series.len());
        for (i, frame) in series.frames().iter().enumerate() {
            let name = format!("frame_{i:03}.icef");
            save_raster(frame, dir.join(&name))?;
            frames.push(FrameEntry {
                path: name,
                timestamp: frame.timestamp(),
            });
        }
        let manifest = Manifest {
            region_id: series.region_id().to_string(),
            frames,
        };
        manifest.save(dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RasterError> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Accepts either a manifest file or a directory containing `manifest.json`.
    pub fn resolve(path: impl AsRef<Path>) -> PathBuf {
        let p = path.as_ref();
        if p.is_dir() {
            p.join(MANIFEST_FILE)
        } else {
            p.to_path_buf()
        }
    }

    pub fn load_series(path: impl AsRef<Path>) -> Result<SceneSeries, RasterError> {
        let path = Self::resolve(path);
        let manifest = Self::load(&path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let frames = manifest
            .frames
            .iter()
            .map(|e| load_raster(base.join(&e.path)))
            .collect::<Result<Vec<_>, _>>()?;
        SceneSeries::new(frames, manifest.region_id)
    }
}
