use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use iceflow_autodiff::{Adam, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{elbo_step, init_params, Mode, NoiseSource};
use super::{LossBreakdown, ModelConfig, PredictorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Written after every epoch, and holds the last good parameters if
    /// training diverges.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Mean distance between posterior and prior means.
    pub mu_gap: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
}

pub const LOG_HEADER: &str = "epoch,recon_l2,peak_l2,kl,total";

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.loss.recon_l2, e.loss.peak_l2, e.loss.kl, e.loss.total
        ));
    }
    out
}

fn mix(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn batch_frames(cfg: &ModelConfig, windows: &[&[Vec<f64>]]) -> Result<Vec<Tensor>, PredictorError> {
    let len = windows[0].len();
    let s = cfg.chip_size;
    (0..len)
        .map(|t| {
            let mut data = Vec::with_capacity(windows.len() * s * s);
            for w in windows {
                data.extend_from_slice(&w[t]);
            }
            Ok(Tensor::new(&[windows.len(), 1, s, s], data)?)
        })
        .collect()
}

fn check_dataset(data: &[Vec<Vec<f64>>], cfg: &ModelConfig, need: usize) -> Result<(), PredictorError> {
    if data.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let pixels = cfg.chip_size * cfg.chip_size;
    for (index, seq) in data.iter().enumerate() {
        if seq.len() < need {
            return Err(PredictorError::SequenceLength {
                index,
                got: seq.len(),
                need,
            });
        }
        if let Some(f) = seq.iter().find(|f| f.len() != pixels) {
            return Err(PredictorError::FrameSize {
                got: f.len(),
                expected: pixels,
            });
        }
    }
    Ok(())
}

fn save(params: &ParamStore, path: &Option<PathBuf>) -> Result<(), PredictorError> {
    if let Some(p) = path {
        params.write_checkpoint(BufWriter::new(File::create(p).map_err(iceflow_autodiff::CheckpointError::from)?))?;
    }
    Ok(())
}

/// Fit the model with Adam on random length-`T` windows of each sequence.
/// Deterministic for a fixed seed. `init` resumes from given parameters.
pub fn train(
    data: &[Vec<Vec<f64>>],
    cfg: &ModelConfig,
    opt: &TrainConfig,
    init: Option<ParamStore>,
) -> Result<TrainOutcome, PredictorError> {
    cfg.validate()?;
    let total = cfg.total_len();
    check_dataset(data, cfg, total)?;
    if opt.batch_size == 0 {
        return Err(PredictorError::Config("batch_size must be >= 1".into()));
    }
    let mut params = match init {
        Some(p) => p,
        None => init_params(cfg, opt.seed)?,
    };
    let mut adam = Adam::new(opt.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(opt.seed, 1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(opt.epochs);

    for epoch in 1..=opt.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut gap = 0.0;
        let mut gap_count = 0usize;
        for chunk in order.chunks(opt.batch_size) {
            let windows: Vec<&[Vec<f64>]> = chunk
                .iter()
                .map(|&i| {
                    let start = rng.random_range(0..=data[i].len() - total);
                    &data[i][start..start + total]
                })
                .collect();
            let frames = batch_frames(cfg, &windows)?;
            let noise = NoiseSource::sample(&mut rng, total - 1, chunk.len(), cfg.z_dim);

            let graph = Graph::new();
            let vars = params.bind(&graph);
            let out = elbo_step(&params, &vars, cfg, &frames, Mode::Train, &noise)?;
            let b = out.breakdown;
            if let Some(term) = b.first_non_finite() {
                save(&params, &opt.checkpoint)?;
                return Err(PredictorError::Diverged { term, epoch });
            }
            let loss = out.loss.expect("full sequence");
            let mut grads = graph.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(params.tensors())
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            if grads.iter().any(|g| !g.is_finite()) {
                save(&params, &opt.checkpoint)?;
                return Err(PredictorError::Diverged { term: "gradient", epoch });
            }
            adam.step(&mut params, &grads);

            let w = chunk.len() as f64;
            sums.recon_l2 += w * b.recon_l2;
            sums.peak_l2 += w * b.peak_l2;
            sums.kl += w * b.kl;
            sums.total += w * b.total;
            for (q, p) in out.posterior.iter().zip(&out.prior) {
                for row in 0..chunk.len() {
                    let k = cfg.z_dim;
                    let d: f64 = (0..k)
                        .map(|j| (q.mu[row * k + j] - p.mu[row * k + j]).powi(2))
                        .sum();
                    gap += d.sqrt();
                    gap_count += 1;
                }
            }
        }
        let n = data.len() as f64;
        log.push(EpochLog {
            epoch,
            loss: LossBreakdown {
                recon_l2: sums.recon_l2 / n,
                peak_l2: sums.peak_l2 / n,
                kl: sums.kl / n,
                total: sums.total / n,
            },
            mu_gap: gap / gap_count.max(1) as f64,
        });
        save(&params, &opt.checkpoint)?;
    }
    Ok(TrainOutcome { params, log })
}

/// Roll out one sample per context, sequence `k` drawing its latents from
/// the stream `(seed, k)`. Returns the `horizon` predicted frames of each.
pub fn rollout_many(
    contexts: &[&[Vec<f64>]],
    params: &ParamStore,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>, PredictorError> {
    cfg.validate()?;
    let n = contexts.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    for c in contexts {
        if c.len() != cfg.context_len {
            return Err(PredictorError::ContextLength {
                got: c.len(),
                expected: cfg.context_len,
            });
        }
    }
    let owned: Vec<Vec<Vec<f64>>> = contexts.iter().map(|c| c.to_vec()).collect();
    check_dataset(&owned, cfg, cfg.context_len)?;
    let steps = cfg.total_len() - 1;
    let draws: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, k as u64 + 2));
            (0..steps * cfg.z_dim).map(|_| rng.sample(StandardNormal)).collect()
        })
        .collect();
    let noise = NoiseSource::from_steps(
        (0..steps)
            .map(|t| {
                let data = draws
                    .iter()
                    .flat_map(|d| d[t * cfg.z_dim..(t + 1) * cfg.z_dim].iter().copied())
                    .collect();
                Tensor::new(&[n, cfg.z_dim], data)
            })
            .collect::<Result<_, _>>()?,
    );
    let frames = batch_frames(cfg, contexts)?;
    let graph = Graph::new();
    let vars: Vec<_> = params.tensors().iter().map(|t| graph.constant(t.clone())).collect();
    let out = elbo_step(params, &vars, cfg, &frames, Mode::Rollout, &noise)?;
    let pixels = cfg.chip_size * cfg.chip_size;
    let future: Vec<Tensor> = out.predictions[cfg.context_len - 1..].iter().map(|p| p.value()).collect();
    Ok((0..n)
        .map(|k| {
            future
                .iter()
                .map(|f| f.data()[k * pixels..(k + 1) * pixels].to_vec())
                .collect()
        })
        .collect())
}

/// `n_samples` independent rollouts of one context; sample `k` uses the
/// latent stream `(seed, k)`.
pub fn predict(
    context: &[Vec<f64>],
    params: &ParamStore,
    cfg: &ModelConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<f64>>>, PredictorError> {
    let contexts = vec![context; n_samples];
    rollout_many(&contexts, params, cfg, seed)
}
