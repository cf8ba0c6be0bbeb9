//! ICEF raster container.
//!
//! Little-endian layout:
//!
//! ```text
//! "ICEF" | version u8 = 1 | width u32 | height u32
//! width*height f32 pixels (row-major, NaN under the mask)
//! width*height u8 mask (0 valid, 1 nodata)
//! timestamp f64 | pixel_size_m f32
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Raster, RasterError};

pub const ICEF_MAGIC: &[u8; 4] = b"ICEF";
pub const ICEF_VERSION: u8 = 1;

pub fn write_raster<W: Write>(raster: &Raster, mut w: W) -> io::Result<()> {
    let mut buf = Vec::with_capacity(13 + raster.pixels.len() * 5 + 12);
    buf.extend_from_slice(ICEF_MAGIC);
    buf.push(ICEF_VERSION);
    buf.extend_from_slice(&(raster.width as u32).to_le_bytes());
    buf.extend_from_slice(&(raster.height as u32).to_le_bytes());
    for (&p, &masked) in raster.pixels.iter().zip(&raster.nodata) {
        let v = if masked { f32::NAN } else { p };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(raster.nodata.iter().map(|&m| m as u8));
    buf.extend_from_slice(&raster.timestamp.to_le_bytes());
    buf.extend_from_slice(&raster.pixel_size_m.to_le_bytes());
    w.write_all(&buf)?;
    w.flush()
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), RasterError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => RasterError::Truncated(what),
        _ => RasterError::Io(e),
    })
}

pub fn read_raster<R: Read>(mut r: R) -> Result<Raster, RasterError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != ICEF_MAGIC {
        return Err(RasterError::BadMagic(magic));
    }
    let mut version = [0u8; 1];
    read_exact(&mut r, &mut version, "version")?;
    if version[0] != ICEF_VERSION {
        return Err(RasterError::Version(version[0]));
    }
    let mut dims = [0u8; 8];
    read_exact(&mut r, &mut dims, "dimensions")?;
    let width = u32::from_le_bytes(dims[..4].try_into().expect("4 bytes")) as usize;
    let height = u32::from_le_bytes(dims[4..].try_into().expect("4 bytes")) as usize;
    if width == 0 || height == 0 {
        return Err(RasterError::EmptyDimensions { width, height });
    }
    let n = width
        .checked_mul(height)
        .ok_or(RasterError::EmptyDimensions { width, height })?;

    let mut payload = vec![0u8; n * 4];
    read_exact(&mut r, &mut payload, "pixel payload")?;
    let mut mask_bytes = vec![0u8; n];
    read_exact(&mut r, &mut mask_bytes, "nodata mask")?;
    let mut tail = [0u8; 12];
    read_exact(&mut r, &mut tail, "timestamp and pixel size")?;

    let mut nodata = Vec::with_capacity(n);
    for (index, &b) in mask_bytes.iter().enumerate() {
        match b {
            0 => nodata.push(false),
            1 => nodata.push(true),
            value => return Err(RasterError::MaskByte { index, value }),
        }
    }
    let pixels: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let timestamp = f64::from_le_bytes(tail[..8].try_into().expect("8 bytes"));
    let pixel_size_m = f32::from_le_bytes(tail[8..].try_into().expect("4 bytes"));
    Raster::new(width, height, pixels, nodata, timestamp, pixel_size_m)
}

pub fn save_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let f = File::create(path)?;
    write_raster(raster, BufWriter::new(f))?;
    Ok(())
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster, RasterError> {
    let f = File::open(path)?;
    read_raster(BufReader::new(f))
}
