//! Synthetic glacier-like scene series with known displacement.
//!
//! Frame 0 is a multi-scale value-noise texture plus a planar slope ramp.
//! Frame `t` samples that same field at `(row - dy_t, col - dx_t)` where
//! `(dx_t, dy_t)` is the cumulative displacement, so content moves by
//! `(+dx, +dy)` pixels. Fractional shifts use bilinear sampling of the integer
//! lattice; integer shifts are exact copies. Cloud patches overwrite pixels
//! with smooth bright noise (values in `[0.8, 1]`) and are reported in a side
//! channel rather than in the nodata mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Raster, RasterError, SceneSeries, DEFAULT_PIXEL_SIZE_M};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    /// Per-frame probability of one cloud patch.
    pub probability: f64,
    pub patch_size: usize,
}

impl Default for OcclusionSpec {
    fn default() -> Self {
        Self {
            probability: 0.0,
            patch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// Frames are `size x size`.
    pub size: usize,
    pub n_frames: usize,
    /// Per-step `(dx, dy)` in pixels (x = columns, y = rows). Either one entry
    /// applied to every step or exactly `n_frames - 1` entries.
    pub displacement_field: Vec<(f64, f64)>,
    /// Spatial frequencies in cycles per pixel; each adds one noise octave.
    pub texture_scales: Vec<f64>,
    /// Peak-to-peak reflectance change of the slope ramp across the frame.
    pub slope_amplitude: f64,
    pub occlusion: OcclusionSpec,
    pub frame_interval_days: f64,
    pub start_day: f64,
    pub region_id: String,
}

impl SynthSpec {
    /// Constant flow of `(dx, dy)` pixels per step with default texture and
    /// no clouds.
    pub fn uniform_flow(seed: u64, size: usize, n_frames: usize, dx: f64, dy: f64) -> Self {
        Self {
            seed,
            size,
            n_frames,
            displacement_field: vec![(dx, dy)],
            texture_scales: vec![0.5, 0.2, 0.05],
            slope_amplitude: 0.2,
            occlusion: OcclusionSpec::default(),
            frame_interval_days: 16.0,
            start_day: 0.0,
            region_id: "synthetic".to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        let bad = |m: String| Err(RasterError::Spec(m));
        if self.n_frames < 2 {
            return bad(format!("n_frames must be >= 2, got {}", self.n_frames));
        }
        if self.size == 0 {
            return bad("size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion.probability) {
            return bad(format!(
                "occlusion probability {} outside [0, 1]",
                self.occlusion.probability
            ));
        }
        if self.occlusion.probability > 0.0 && self.occlusion.patch_size == 0 {
            return bad("occlusion patch size must be positive".into());
        }
        let n = self.displacement_field.len();
        if n != 1 && n != self.n_frames - 1 {
            return bad(format!(
                "displacement_field needs 1 or {} entries, got {n}",
                self.n_frames - 1
            ));
        }
        if self
            .displacement_field
            .iter()
            .any(|(dx, dy)| !dx.is_finite() || !dy.is_finite())
        {
            return bad("displacements must be finite".into());
        }
        if self.texture_scales.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return bad("texture scales must be positive".into());
        }
        if !(self.frame_interval_days > 0.0) {
            return bad("frame interval must be positive".into());
        }
        Ok(())
    }

    fn step(&self, k: usize) -> (f64, f64) {
        if self.displacement_field.len() == 1 {
            self.displacement_field[0]
        } else {
            self.displacement_field[k]
        }
    }

    /// Cumulative `(dx, dy)` of every frame relative to frame 0.
    pub fn cumulative(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.n_frames);
        let (mut x, mut y) = (0.0, 0.0);
        out.push((x, y));
        for k in 0..self.n_frames - 1 {
            let (dx, dy) = self.step(k);
            x += dx;
            y += dy;
            out.push((x, y));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub series: SceneSeries,
    /// Nearest-integer cumulative `(drow, dcol)` of each frame relative to frame 0.
    pub truth: Vec<(i64, i64)>,
    /// Per-frame cloud mask.
    pub occluded: Vec<Vec<bool>>,
}

impl SynthOutput {
    /// Ground-truth integer offset of each step `i -> i + 1`.
    pub fn step_truth(&self) -> Vec<(i64, i64)> {
        self.truth
            .windows(2)
            .map(|w| (w[1].0 - w[0].0, w[1].1 - w[0].1))
            .collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic lattice value in `[-1, 1]`.
fn lattice(seed: u64, octave: u64, i: i64, j: i64) -> f64 {
    let h = splitmix(
        seed ^ splitmix(octave.wrapping_add(0x51_7CC1_B727_220A))
            ^ splitmix((i as u64).wrapping_mul(0x9E37_79B9))
            ^ splitmix((j as u64).wrapping_mul(0x85EB_CA6B).wrapping_add(1)),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise with node spacing `spacing` pixels.
fn value_noise(seed: u64, octave: u64, y: f64, x: f64, spacing: f64) -> f64 {
    let (fy, fx) = (y / spacing, x / spacing);
    let (y0, x0) = (fy.floor(), fx.floor());
    let (ty, tx) = (smoothstep(fy - y0), smoothstep(fx - x0));
    let (i, j) = (y0 as i64, x0 as i64);
    let a = lattice(seed, octave, i, j);
    let b = lattice(seed, octave, i, j + 1);
    let c = lattice(seed, octave, i + 1, j);
    let d = lattice(seed, octave, i + 1, j + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

/// The advected field on the integer lattice, covering a margin around the frame.
struct BaseField {
    origin: i64,
    side: usize,
    values: Vec<f64>,
}

impl BaseField {
    fn build(spec: &SynthSpec, margin: i64) -> Self {
        let side = spec.size + 2 * margin as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (sin, cos) = theta.sin_cos();
        let weight = 0.4 / spec.texture_scales.len().max(1) as f64;
        let mut values = Vec::with_capacity(side * side);
        for r in 0..side as i64 {
            for c in 0..side as i64 {
                let (y, x) = ((r - margin) as f64, (c - margin) as f64);
                let mut tex = 0.0;
                for (k, &f) in spec.texture_scales.iter().enumerate() {
                    tex += weight * value_noise(spec.seed, k as u64, y, x, 1.0 / f);
                }
                let ramp = spec.slope_amplitude
                    * ((y * sin + x * cos) / spec.size as f64 - 0.5 * (sin + cos));
                values.push(0.5 + tex + ramp);
            }
        }
        Self {
            origin: -margin,
            side,
            values,
        }
    }

    fn at(&self, r: i64, c: i64) -> f64 {
        let rr = (r - self.origin) as usize;
        let cc = (c - self.origin) as usize;
        self.values[rr * self.side + cc]
    }

    fn sample(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (r, c) = (y0 as i64, x0 as i64);
        if fy == 0.0 && fx == 0.0 {
            return self.at(r, c);
        }
        let top = self.at(r, c) * (1.0 - fx) + self.at(r, c + 1) * fx;
        let bottom = self.at(r + 1, c) * (1.0 - fx) + self.at(r + 1, c + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Generate a series from `spec`. Identical specs give bit-identical output.
pub fn synth_series(spec: &SynthSpec) -> Result<SynthOutput, RasterError> {
    spec.validate()?;
    let cumulative = spec.cumulative();
    let reach = cumulative
        .iter()
        .map(|(x, y)| x.abs().max(y.abs()))
        .fold(0.0, f64::max);
    let margin = reach.ceil() as i64 + 2;
    let field = BaseField::build(spec, margin);

    let n = spec.size;
    let mut cloud_rng = ChaCha8Rng::seed_from_u64(splitmix(spec.seed ^ 0xC10D));
    let mut frames = Vec::with_capacity(spec.n_frames);
    let mut occluded = Vec::with_capacity(spec.n_frames);
    for (t, &(cx, cy)) in cumulative.iter().enumerate() {
        let mut pixels = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let v = field.sample(r as f64 - cy, c as f64 - cx);
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        let mut mask = vec![false; n * n];
        let cloud_draw: f64 = cloud_rng.random();
        let patch = spec.occlusion.patch_size.min(n);
        let row0 = cloud_rng.random_range(0..=n - patch.max(1).min(n));
        let col0 = cloud_rng.random_range(0..=n - patch.max(1).min(n));
        if cloud_draw < spec.occlusion.probability && patch > 0 {
            let spacing = (patch as f64 / 3.0).max(1.0);
            let cloud_seed = splitmix(spec.seed ^ (t as u64 + 1).wrapping_mul(0xC0FFEE));
            for r in row0..row0 + patch {
                for c in col0..col0 + patch {
                    let noise = value_noise(cloud_seed, 0, r as f64, c as f64, spacing);
                    pixels[r * n + c] = (0.9 + 0.1 * noise) as f32;
                    mask[r * n + c] = true;
                }
            }
        }
        let timestamp = spec.start_day + t as f64 * spec.frame_interval_days;
        frames.push(Raster::new(
            n,
            n,
            pixels,
            vec![false; n * n],
            timestamp,
            DEFAULT_PIXEL_SIZE_M,
        )?);
        occluded.push(mask);
    }
    let truth = cumulative
        .iter()
        .map(|&(x, y)| (y.round() as i64, x.round() as i64))
        .collect();
    Ok(SynthOutput {
        series: SceneSeries::new(frames, spec.region_id.clone())?,
        truth,
        occluded,
    })
}

/// Add white Gaussian noise at amplitude signal-to-noise ratio `snr`
/// (frame standard deviation over noise standard deviation), clamping to
/// `[0, 1]`. Nodata pixels are untouched.
pub fn add_gaussian_noise(
    series: &SceneSeries,
    snr: f64,
    seed: u64,
) -> Result<SceneSeries, RasterError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(series.len());
    for f in series.frames() {
        let valid: Vec<f64> = f
            .pixels()
            .iter()
            .zip(f.nodata())
            .filter(|(_, &m)| !m)
            .map(|(&p, _)| p as f64)
            .collect();
        let mean = valid.iter().sum::<f64>() / valid.len().max(1) as f64;
        let var = valid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / valid.len().max(1) as f64;
        let sigma = var.sqrt() / snr;
        let normal = Normal::new(0.0, sigma.max(0.0)).map_err(|e| RasterError::Spec(e.to_string()))?;
        let pixels = f
            .pixels()
            .iter()
            .zip(f.nodata())
            .map(|(&p, &m)| {
                if m {
                    p
                } else {
                    (p as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32
                }
            })
            .collect();
        frames.push(Raster::new(
            f.width(),
            f.height(),
            pixels,
            f.nodata().to_vec(),
            f.timestamp(),
            f.pixel_size_m(),
        )?);
    }
    SceneSeries::new(frames, series.region_id())
}
