//! Persistence and high-pass predictions for one chip, written as PGM
//! images next to the observed target.
//!
//! cargo run --example highpass_baseline -- [out_dir]

use std::path::PathBuf;

use iceflow::baselines::{highpass, highpass_predict, persistence_predict, HighPassConfig};
use iceflow::chip::{chip_frame, ChipGridSpec};
use iceflow::correlation::{ncc, Patch};
use iceflow::raster::{save_pgm, synth_series, SynthSpec};
use iceflow::Grid;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "highpass_out".into()));
    std::fs::create_dir_all(&dir)?;
    let out = synth_series(&SynthSpec::uniform_flow(5, 128, 4, 1.0, 0.5))?;
    let grid = ChipGridSpec::non_overlapping(64);
    let history: Vec<Patch> = out
        .series
        .frames()
        .iter()
        .enumerate()
        .map(|(t, f)| Ok(Patch::from_chip(&chip_frame(f, t, &grid)?[0])))
        .collect::<Result<_, Box<dyn std::error::Error>>>()?;
    let (context, target) = history.split_at(history.len() - 1);
    let cfg = HighPassConfig::default();

    let persistence = persistence_predict(context)?;
    let filtered = highpass_predict(context, &cfg)?;
    let filtered_target = highpass(&target[0], &cfg)?;
    println!("persistence vs target: {:.3}", ncc(&persistence.values, &target[0].values)?);
    println!("high-pass vs filtered target: {:.3}", ncc(&filtered.values, &filtered_target.values)?);

    let write = |p: &Patch, lo: f64, hi: f64, name: &str| -> Result<(), Box<dyn std::error::Error>> {
        save_pgm(&Grid::new(p.rows, p.cols, p.values.clone())?, lo, hi, dir.join(name))?;
        Ok(())
    };
    write(&target[0], 0.0, 1.0, "target.pgm")?;
    write(&persistence, 0.0, 1.0, "persistence.pgm")?;
    write(&filtered, -0.5, 0.5, "highpass.pgm")?;
    println!("images in {}", dir.display());
    Ok(())
}
