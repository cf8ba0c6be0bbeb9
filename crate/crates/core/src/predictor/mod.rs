//! Stochastic video prediction with a learned prior at toy scale.
//!
//! A strided-convolution encoder embeds each frame; three LSTMs (posterior,
//! learned prior, frame predictor) run over the embeddings; a
//! transposed-convolution decoder with skip connections from the last context
//! frame renders the predicted frame through a sigmoid. The objective is the
//! per-frame l2 reconstruction, an l2 penalty on a box around the target's
//! brightest pixel, and a beta-weighted KL between posterior and prior, all
//! summed over predicted steps.

mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use iceflow_autodiff::{CheckpointError, TensorError};

pub use model::{elbo_step, init_params, Mode, NoiseSource, StepOutput};
pub use train::{log_csv, predict, rollout_many, train, LOG_HEADER, EpochLog, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence {index} has {got} frames, need {need}")]
    SequenceLength { index: usize, got: usize, need: usize },
    #[error("frame has {got} pixels, expected {expected}")]
    FrameSize { got: usize, expected: usize },
    #[error("context has {got} frames, model expects {expected}")]
    ContextLength { got: usize, expected: usize },
    #[error("standard deviations must be positive, got {0}")]
    Sigma(f64),
    #[error("non-finite {term} at epoch {epoch}")]
    Diverged { term: &'static str, epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub chip_size: usize,
    pub z_dim: usize,
    pub g_dim: usize,
    /// Layers of the frame-predictor LSTM.
    pub rnn_layers: usize,
    pub rnn_units: usize,
    /// Layers of the prior and posterior LSTMs.
    pub latent_layers: usize,
    /// Channels of the first encoder stage; doubled at each later stage.
    pub base_channels: usize,
    pub context_len: usize,
    pub horizon: usize,
    pub beta: f64,
    pub lambda_peak: f64,
    pub peak_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            chip_size: 32,
            z_dim: 8,
            g_dim: 32,
            rnn_layers: 2,
            rnn_units: 32,
            latent_layers: 1,
            base_channels: 8,
            context_len: 8,
            horizon: 2,
            beta: 1e-4,
            lambda_peak: 1.0,
            peak_window: 16,
        }
    }

    /// Full size: 128 px chips, 128-d latent, 2 x 128 LSTM.
    pub fn full_scale() -> Self {
        Self {
            chip_size: 128,
            z_dim: 128,
            g_dim: 128,
            rnn_units: 128,
            base_channels: 32,
            ..Self::toy()
        }
    }

    pub fn total_len(&self) -> usize {
        self.context_len + self.horizon
    }

    /// Encoder stages: `chip_size` halves down to 4.
    pub fn stages(&self) -> usize {
        self.chip_size.trailing_zeros() as usize - 2
    }

    pub fn validate(&self) -> Result<(), PredictorError> {
        let bad = |m: String| Err(PredictorError::Config(m));
        if !self.chip_size.is_power_of_two() || self.chip_size < 8 {
            return bad(format!("chip_size must be a power of two >= 8, got {}", self.chip_size));
        }
        if self.context_len < 1 || self.horizon < 1 {
            return bad("context_len and horizon must be >= 1".into());
        }
        if !(self.beta >= 0.0) || !(self.lambda_peak >= 0.0) {
            return bad("beta and lambda_peak must be >= 0".into());
        }
        if self.peak_window == 0 || self.peak_window > self.chip_size {
            return bad(format!(
                "peak_window must be in 1..={}, got {}",
                self.chip_size, self.peak_window
            ));
        }
        if self.z_dim == 0 || self.g_dim == 0 || self.rnn_units == 0 || self.base_channels == 0 {
            return bad("layer sizes must be positive".into());
        }
        if self.rnn_layers == 0 || self.latent_layers == 0 {
            return bad("LSTM depth must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_l2: f64,
    pub peak_l2: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.recon_l2.is_finite() && self.peak_l2.is_finite() && self.kl.is_finite() && self.total.is_finite()
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("recon_l2", self.recon_l2),
            ("peak_l2", self.peak_l2),
            ("kl", self.kl),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Per-step latent statistics of one distribution for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub z: Vec<f64>,
}

/// `KL(N(mu_q, sigma_q) || N(mu_p, sigma_p))` summed over dimensions.
pub fn kl_diag_gaussian(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64, PredictorError> {
    let n = mu_q.len();
    if sigma_q.len() != n || mu_p.len() != n || sigma_p.len() != n {
        return Err(PredictorError::Config("KL arguments must share a length".into()));
    }
    let mut kl = 0.0;
    for d in 0..n {
        let (sq, sp) = (sigma_q[d], sigma_p[d]);
        for s in [sq, sp] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(PredictorError::Sigma(s));
            }
        }
        let dm = mu_q[d] - mu_p[d];
        kl += (sp / sq).ln() + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

/// Top-left corner of the `window x window` box centred on the brightest
/// pixel of `target` (first in row-major order on ties), shifted inside.
pub fn peak_box(target: &[f64], size: usize, window: usize) -> (usize, usize) {
    let mut best = 0;
    for (k, &v) in target.iter().enumerate() {
        if v > target[best] {
            best = k;
        }
    }
    let place = |p: usize| p.saturating_sub(window / 2).min(size - window);
    (place(best / size), place(best % size))
}

/// Mean squared difference over the peak box of `target`.
pub fn peak_penalty(pred: &[f64], target: &[f64], size: usize, window: usize) -> f64 {
    let (r0, c0) = peak_box(target, size, window);
    let mut acc = 0.0;
    for r in r0..r0 + window {
        for c in c0..c0 + window {
            let d = pred[r * size + c] - target[r * size + c];
            acc += d * d;
        }
    }
    acc / (window * window) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_diag_gaussian(&[0.3, -1.0], &[0.5, 2.0], &[0.3, -1.0], &[0.5, 2.0]).unwrap(), 0.0);
        let v = kl_diag_gaussian(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!(matches!(
            kl_diag_gaussian(&[0.0], &[0.0], &[0.0], &[1.0]),
            Err(PredictorError::Sigma(_))
        ));
    }

    #[test]
    fn peak_box_rules() {
        let mut t = vec![0.0; 64];
        assert_eq!(peak_box(&t, 8, 4), (0, 0));
        t[63] = 1.0;
        assert_eq!(peak_box(&t, 8, 4), (4, 4));
        t[3 * 8 + 4] = 2.0;
        assert_eq!(peak_box(&t, 8, 4), (1, 2));
        t[5 * 8 + 5] = 2.0;
        assert_eq!(peak_box(&t, 8, 4), (1, 2));
    }

    #[test]
    fn peak_penalty_values() {
        let t: Vec<f64> = (0..64).map(|k| k as f64 / 64.0).collect();
        assert_eq!(peak_penalty(&t, &t, 8, 4), 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 0.5).collect();
        assert!((peak_penalty(&p, &t, 8, 4) - 0.25).abs() < 1e-15);
        // only pixels inside the clamped corner box count
        let mut q = t.clone();
        q[0] = 9.0;
        assert_eq!(peak_penalty(&q, &t, 8, 4), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::toy().validate().is_ok());
        assert!(ModelConfig::full_scale().validate().is_ok());
        assert_eq!(ModelConfig::toy().stages(), 3);
        assert_eq!(ModelConfig::full_scale().stages(), 5);
        let mut c = ModelConfig::toy();
        c.chip_size = 24;
        assert!(c.validate().is_err());
        c.chip_size = 32;
        c.peak_window = 33;
        assert!(c.validate().is_err());
        c.peak_window = 16;
        c.horizon = 0;
        assert!(c.validate().is_err());
    }
}
