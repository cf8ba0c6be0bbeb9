//! Persistence and high-pass comparison models.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::Patch;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("blur sigma must be positive and finite, got {0}")]
    Sigma(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighPassConfig {
    pub blur_sigma: f64,
    pub binarize: bool,
    pub threshold: f64,
}

impl Default for HighPassConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 2.0,
            binarize: true,
            threshold: 0.0,
        }
    }
}

/// The last observed chip, unchanged.
pub fn persistence_predict<T: Clone>(history: &[T]) -> Result<T, BaselineError> {
    history.last().cloned().ok_or(BaselineError::EmptyHistory)
}

/// Normalized Gaussian taps for offsets `-h..=h`, `h = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>, BaselineError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(BaselineError::Sigma(sigma));
    }
    let h = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-h..=h)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// `sum_k w_k (x[i + k] - x[i])` along one axis with edge replication.
fn blur_delta(values: &[f64], rows: usize, cols: usize, kernel: &[f64], along_rows: bool) -> Vec<f64> {
    let h = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            let centre = values[r * cols + c];
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let k = t as i64 - h;
                let (rr, cc) = if along_rows {
                    ((r as i64 + k).clamp(0, rows as i64 - 1) as usize, c)
                } else {
                    (r, (c as i64 + k).clamp(0, cols as i64 - 1) as usize)
                };
                acc += w * (values[rr * cols + cc] - centre);
            }
            out[r * cols + c] = acc;
        }
    }
    out
}

/// Residual `chip - gaussian_blur(chip)`, optionally binarized to
/// `residual > threshold`. Nodata is mean-filled first; the mask is kept.
///
/// The blur is applied as offsets from each pixel so that flat regions give a
/// residual of exactly zero.
pub fn highpass(chip: &Patch, cfg: &HighPassConfig) -> Result<Patch, BaselineError> {
    let kernel = gaussian_kernel(cfg.blur_sigma)?;
    let x = chip.filled();
    let (rows, cols) = chip.shape();
    // blur(x) - x = dy(x) + Gy(dx(x)) for the separable blur G = Gy Gx
    let dx = blur_delta(&x, rows, cols, &kernel, false);
    let dy = blur_delta(&x, rows, cols, &kernel, true);
    let gdx = blur_delta(&dx, rows, cols, &kernel, true);
    let values = (0..x.len())
        .map(|k| {
            let residual = -(dy[k] + dx[k] + gdx[k]);
            if cfg.binarize {
                (residual > cfg.threshold) as u8 as f64
            } else {
                residual
            }
        })
        .collect();
    Ok(Patch {
        rows,
        cols,
        values,
        nodata: chip.nodata.clone(),
    })
}

pub fn highpass_predict(history: &[Patch], cfg: &HighPassConfig) -> Result<Patch, BaselineError> {
    highpass(&persistence_predict(history)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn patch(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Patch {
        Patch::new(rows, cols, (0..rows * cols).map(|k| f(k / cols, k % cols)).collect()).unwrap()
    }

    /// Plain two-pass blur with replicated edges, the textbook form.
    fn oracle_residual(p: &Patch, sigma: f64) -> Vec<f64> {
        let k = gaussian_kernel(sigma).unwrap();
        let h = (k.len() / 2) as i64;
        let (rows, cols) = p.shape();
        let at = |v: &[f64], r: i64, c: i64| {
            v[r.clamp(0, rows as i64 - 1) as usize * cols + c.clamp(0, cols as i64 - 1) as usize]
        };
        let mut tmp = vec![0.0; rows * cols];
        for r in 0..rows as i64 {
            for c in 0..cols as i64 {
                tmp[r as usize * cols + c as usize] =
                    (-h..=h).map(|d| k[(d + h) as usize] * at(&p.values, r, c + d)).sum();
            }
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows as i64 {
            for c in 0..cols as i64 {
                let b: f64 = (-h..=h).map(|d| k[(d + h) as usize] * at(&tmp, r + d, c)).sum();
                out[r as usize * cols + c as usize] = p.values[r as usize * cols + c as usize] - b;
            }
        }
        out
    }

    #[test]
    fn kernel_shape() {
        let k = gaussian_kernel(2.0).unwrap();
        assert_eq!(k.len(), 13);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[12]);
        assert_eq!(gaussian_kernel(0.0), Err(BaselineError::Sigma(0.0)));
    }

    #[test]
    fn persistence_returns_last() {
        assert_eq!(persistence_predict(&["a"]).unwrap(), "a");
        assert_eq!(persistence_predict(&["a", "b", "c"]).unwrap(), "c");
        assert_eq!(persistence_predict::<u8>(&[]), Err(BaselineError::EmptyHistory));
    }

    #[test]
    fn constant_chip_binarizes_to_zero() {
        let out = highpass(&patch(16, 16, |_, _| 0.37), &HighPassConfig::default()).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
        let raw = HighPassConfig {
            binarize: false,
            ..Default::default()
        };
        assert!(highpass(&patch(16, 16, |_, _| 0.37), &raw).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_is_positive() {
        let p = patch(21, 21, |r, c| if (r, c) == (10, 10) { 1.0 } else { 0.0 });
        let out = highpass(&p, &HighPassConfig::default()).unwrap();
        assert_eq!(out.values[10 * 21 + 10], 1.0);
        assert_eq!(out.values.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn matches_textbook_blur() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = patch(24, 19, |_, _| rng.random());
        let cfg = HighPassConfig {
            blur_sigma: 1.5,
            binarize: false,
            threshold: 0.0,
        };
        let got = highpass(&p, &cfg).unwrap();
        for (a, b) in got.values.iter().zip(oracle_residual(&p, 1.5)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stripes_are_recovered() {
        // period-4 vertical crevasse stripes: bright columns 0,1 of every 4
        let p = patch(32, 32, |_, c| if c % 4 < 2 { 0.8 } else { 0.2 });
        let out = highpass(&p, &HighPassConfig::default()).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(out.values[r * 32 + c], if c % 4 < 2 { 1.0 } else { 0.0 }, "({r},{c})");
            }
        }
    }

    #[test]
    fn ramp_interior_residual_vanishes() {
        let p = patch(32, 32, |r, c| 0.2 + 0.01 * r as f64 + 0.005 * c as f64);
        let cfg = HighPassConfig {
            binarize: false,
            ..Default::default()
        };
        let out = highpass(&p, &cfg).unwrap();
        let oracle = oracle_residual(&p, 2.0);
        for r in 6..26 {
            for c in 6..26 {
                assert!(out.values[r * 32 + c].abs() < 1e-12);
                assert!(oracle[r * 32 + c].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nodata_is_mean_filled_and_kept() {
        let mut p = patch(8, 8, |_, _| 0.5);
        p.values[9] = f64::NAN;
        p.nodata[9] = true;
        let out = highpass(&p, &HighPassConfig::default()).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
        assert!(out.nodata[9]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn residual_has_no_dc(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // replicated edges leak DC in proportion to 1/size; 128 is the default chip
            let p = patch(128, 128, |_, _| rng.random());
            let cfg = HighPassConfig { binarize: false, ..Default::default() };
            let out = highpass(&p, &cfg).unwrap();
            let mean = out.values.iter().sum::<f64>() / out.values.len() as f64;
            prop_assert!(mean.abs() < 1e-3, "{}", mean);
        }

        #[test]
        fn binary_output(seed in any::<u64>(), threshold in -0.1f64..0.1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = patch(16, 16, |_, _| rng.random());
            let cfg = HighPassConfig { threshold, ..Default::default() };
            let out = highpass(&p, &cfg).unwrap();
            prop_assert!(out.values.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
