//! Write rasters with nodata to ICEF, read them back, and store a series
//! through a manifest.
//!
//! cargo run --example raster_roundtrip -- [out_dir]

use iceflow::raster::{read_raster, synth_series, write_raster, Manifest, SynthSpec};
use iceflow::Raster;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pixels: Vec<f32> = (0..12).map(|k| k as f32 / 12.0).collect();
    let mut nodata = vec![false; 12];
    nodata[5] = true;
    let r = Raster::new(4, 3, pixels, nodata, 32.0, 10.0)?;
    let mut buf = Vec::new();
    write_raster(&r, &mut buf)?;
    let back = read_raster(buf.as_slice())?;
    println!("{} bytes, nodata at (1, 1): {}, identical: {}", buf.len(), back.is_nodata(1, 1), back == r);

    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "roundtrip_out".into()));
    let series = synth_series(&SynthSpec::uniform_flow(3, 64, 3, 2.0, 0.0))?.series;
    Manifest::write_series(&series, &dir)?.save(dir.join("manifest.json"))?;
    let loaded = Manifest::load_series(dir.join("manifest.json"))?;
    println!("series of {} frames reloaded from {}: identical: {}", loaded.len(), dir.display(), loaded == series);
    Ok(())
}
