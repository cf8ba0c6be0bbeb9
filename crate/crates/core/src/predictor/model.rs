use iceflow_autodiff::{lstm_cell, LstmWeights, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{peak_box, LatentState, LossBreakdown, ModelConfig, PredictorError};

const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Teacher forcing with posterior latents.
    Train,
    /// Posterior latents over the context, prior samples and fed-back
    /// predictions afterwards.
    Rollout,
}

fn channels(cfg: &ModelConfig, stage: usize) -> usize {
    cfg.base_channels << stage
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

fn add_lstm(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, layers: usize, input: usize, units: usize) {
    for l in 0..layers {
        let inp = if l == 0 { input } else { units };
        store.insert(format!("{prefix}.lstm{l}.w_ih"), uniform(rng, &[inp, 4 * units], units));
        store.insert(format!("{prefix}.lstm{l}.w_hh"), uniform(rng, &[units, 4 * units], units));
        store.insert(format!("{prefix}.lstm{l}.b"), Tensor::zeros(&[4 * units]));
    }
}

/// Seeded initial parameters.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, PredictorError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let stages = cfg.stages();
    for l in 0..stages {
        let c_in = if l == 0 { 1 } else { channels(cfg, l - 1) };
        let c_out = channels(cfg, l);
        p.insert(format!("enc.conv{l}.w"), uniform(&mut rng, &[c_out, c_in, 4, 4], c_in * 16));
        p.insert(format!("enc.conv{l}.b"), Tensor::zeros(&[c_out]));
    }
    let flat = channels(cfg, stages - 1) * 16;
    p.insert("enc.fc.w", uniform(&mut rng, &[flat, cfg.g_dim], flat));
    p.insert("enc.fc.b", Tensor::zeros(&[cfg.g_dim]));

    add_lstm(&mut p, &mut rng, "post", cfg.latent_layers, cfg.g_dim, cfg.rnn_units);
    p.insert("post.out.w", uniform(&mut rng, &[cfg.rnn_units, 2 * cfg.z_dim], cfg.rnn_units));
    p.insert("post.out.b", Tensor::zeros(&[2 * cfg.z_dim]));
    add_lstm(&mut p, &mut rng, "prior", cfg.latent_layers, cfg.g_dim, cfg.rnn_units);
    p.insert("prior.out.w", uniform(&mut rng, &[cfg.rnn_units, 2 * cfg.z_dim], cfg.rnn_units));
    p.insert("prior.out.b", Tensor::zeros(&[2 * cfg.z_dim]));
    add_lstm(&mut p, &mut rng, "pred", cfg.rnn_layers, cfg.g_dim + cfg.z_dim, cfg.rnn_units);
    p.insert("pred.out.w", uniform(&mut rng, &[cfg.rnn_units, cfg.g_dim], cfg.rnn_units));
    p.insert("pred.out.b", Tensor::zeros(&[cfg.g_dim]));

    p.insert("dec.fc.w", uniform(&mut rng, &[cfg.g_dim, flat], cfg.g_dim));
    p.insert("dec.fc.b", Tensor::zeros(&[flat]));
    for l in (0..stages).rev() {
        let c_in = 2 * channels(cfg, l);
        let c_out = if l == 0 { 1 } else { channels(cfg, l - 1) };
        p.insert(format!("dec.tconv{l}.w"), uniform(&mut rng, &[c_in, c_out, 4, 4], c_in * 4));
        p.insert(format!("dec.tconv{l}.b"), Tensor::zeros(&[c_out]));
    }
    Ok(p)
}

/// Standard-normal draws for every step `t = 1..T` of a batch, `[N, z]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSource {
    steps: Vec<Tensor>,
}

impl NoiseSource {
    pub fn sample(rng: &mut impl Rng, steps: usize, batch: usize, z_dim: usize) -> Self {
        Self {
            steps: (0..steps)
                .map(|_| Tensor::from_fn(&[batch, z_dim], |_| rng.sample(StandardNormal)))
                .collect(),
        }
    }

    pub fn zeros(steps: usize, batch: usize, z_dim: usize) -> Self {
        Self {
            steps: vec![Tensor::zeros(&[batch, z_dim]); steps],
        }
    }

    pub fn from_steps(steps: Vec<Tensor>) -> Self {
        Self { steps }
    }

    fn get(&self, step: usize) -> &Tensor {
        &self.steps[step]
    }
}

struct Net<'a, 'g> {
    store: &'a ParamStore,
    vars: &'a [Var<'g>],
}

impl<'g> Net<'_, 'g> {
    fn get(&self, name: &str) -> Result<Var<'g>, PredictorError> {
        self.store
            .position(name)
            .and_then(|i| self.vars.get(i).copied())
            .ok_or_else(|| PredictorError::MissingParam(name.to_string()))
    }

    fn linear(&self, x: Var<'g>, prefix: &str) -> Result<Var<'g>, PredictorError> {
        Ok(x.matmul(self.get(&format!("{prefix}.w"))?)?
            .bias_add(self.get(&format!("{prefix}.b"))?)?)
    }

    fn lstm(&self, prefix: &str, x: Var<'g>, state: &mut [(Var<'g>, Var<'g>)]) -> Result<Var<'g>, PredictorError> {
        let mut input = x;
        for (l, (h, c)) in state.iter_mut().enumerate() {
            let w = LstmWeights {
                w_ih: self.get(&format!("{prefix}.lstm{l}.w_ih"))?,
                w_hh: self.get(&format!("{prefix}.lstm{l}.w_hh"))?,
                bias: self.get(&format!("{prefix}.lstm{l}.b"))?,
            };
            let (h2, c2) = lstm_cell(input, *h, *c, &w)?;
            *h = h2;
            *c = c2;
            input = h2;
        }
        Ok(input)
    }

    /// `[M, 1, S, S]` frames to `[M, g]` embeddings plus per-stage features.
    fn encode(&self, cfg: &ModelConfig, x: Var<'g>) -> Result<(Var<'g>, Vec<Var<'g>>), PredictorError> {
        let mut h = x;
        let mut feats = Vec::with_capacity(cfg.stages());
        for l in 0..cfg.stages() {
            h = h
                .conv2d(self.get(&format!("enc.conv{l}.w"))?, 2, 1)?
                .bias_add(self.get(&format!("enc.conv{l}.b"))?)?
                .leaky_relu(LEAK);
            feats.push(h);
        }
        let m = h.shape()[0];
        let flat = h.reshape(&[m, channels(cfg, cfg.stages() - 1) * 16])?;
        Ok((self.linear(flat, "enc.fc")?.tanh(), feats))
    }

    fn decode(&self, cfg: &ModelConfig, g: Var<'g>, skips: &[Var<'g>]) -> Result<Var<'g>, PredictorError> {
        let stages = cfg.stages();
        let m = g.shape()[0];
        let mut h = self
            .linear(g, "dec.fc")?
            .leaky_relu(LEAK)
            .reshape(&[m, channels(cfg, stages - 1), 4, 4])?;
        for l in (0..stages).rev() {
            h = Var::concat(&[h, skips[l]], 1)?
                .conv_transpose2d(self.get(&format!("dec.tconv{l}.w"))?, 2, 1)?
                .bias_add(self.get(&format!("dec.tconv{l}.b"))?)?;
            h = if l == 0 { h.sigmoid() } else { h.leaky_relu(LEAK) };
        }
        Ok(h)
    }

    /// `(mu, log_sigma)` head of a latent LSTM.
    fn gaussian(&self, prefix: &str, h: Var<'g>, z: usize) -> Result<(Var<'g>, Var<'g>), PredictorError> {
        let out = self.linear(h, &format!("{prefix}.out"))?;
        Ok((out.slice(1, 0, z)?, out.slice(1, z, 2 * z)?))
    }
}

/// Batched KL between diagonal Gaussians given log standard deviations,
/// summed over dimensions and averaged over the batch.
fn kl_term<'g>(mu_q: Var<'g>, lq: Var<'g>, mu_p: Var<'g>, lp: Var<'g>) -> Result<Var<'g>, PredictorError> {
    let n = mu_q.shape()[0] as f64;
    let ratio = lq.sub(lp)?.scale(2.0).exp().scale(0.5);
    let shift = mu_q.sub(mu_p)?.square().mul(lp.scale(-2.0).exp())?.scale(0.5);
    Ok(lp.sub(lq)?.add(ratio)?.add(shift)?.add_scalar(-0.5).sum().scale(1.0 / n))
}

fn latent(mu: Var<'_>, log_sigma: Var<'_>, z: Var<'_>) -> LatentState {
    LatentState {
        mu: mu.value().into_data(),
        log_sigma: log_sigma.value().into_data(),
        z: z.value().into_data(),
    }
}

pub struct StepOutput<'g> {
    /// Predicted frames for `t = 1..T`, each `[N, 1, S, S]`.
    pub predictions: Vec<Var<'g>>,
    /// Total loss; `None` when no future frames were supplied.
    pub loss: Option<Var<'g>>,
    pub breakdown: LossBreakdown,
    /// Posterior and prior statistics at the steps where both exist.
    pub posterior: Vec<LatentState>,
    pub prior: Vec<LatentState>,
}

pub(crate) fn check_frames(cfg: &ModelConfig, frames: &[Tensor]) -> Result<usize, PredictorError> {
    let first = frames.first().ok_or(PredictorError::ContextLength {
        got: 0,
        expected: cfg.context_len,
    })?;
    let n = first.shape().first().copied().unwrap_or(0);
    let expected = [n, 1, cfg.chip_size, cfg.chip_size];
    for f in frames {
        if f.shape() != expected {
            return Err(PredictorError::FrameSize {
                got: f.len(),
                expected: n * cfg.chip_size * cfg.chip_size,
            });
        }
    }
    Ok(n)
}

/// One pass over a batch of sequences.
///
/// `frames` holds `[N, 1, S, S]` tensors. With all `context_len + horizon`
/// frames the loss is computed over `t = 1..T`; in rollout mode `frames` may
/// hold only the context, and the output carries the predictions alone.
/// `noise` supplies the reparameterization draws.
pub fn elbo_step<'g>(
    store: &ParamStore,
    vars: &[Var<'g>],
    cfg: &ModelConfig,
    frames: &[Tensor],
    mode: Mode,
    noise: &NoiseSource,
) -> Result<StepOutput<'g>, PredictorError> {
    cfg.validate()?;
    let total = cfg.total_len();
    let full = frames.len() == total;
    if !(full || (mode == Mode::Rollout && frames.len() == cfg.context_len)) {
        return Err(PredictorError::SequenceLength {
            index: 0,
            got: frames.len(),
            need: total,
        });
    }
    let n = check_frames(cfg, frames)?;
    let graph = vars.first().ok_or_else(|| PredictorError::MissingParam("(none)".into()))?.graph();
    let net = Net { store, vars };
    let s = cfg.chip_size;

    // ground-truth frames encoded together, t-major
    let stacked: Vec<f64> = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    let x_all = graph.constant(Tensor::new(&[frames.len() * n, 1, s, s], stacked)?);
    let (g_all, feats_all) = net.encode(cfg, x_all)?;
    let g_true = |t: usize| g_all.slice(0, t * n, (t + 1) * n);
    let skip = |t: usize| -> Result<Vec<Var<'g>>, PredictorError> {
        let src = (t - 1).min(cfg.context_len - 1);
        Ok(feats_all
            .iter()
            .map(|f| f.slice(0, src * n, (src + 1) * n))
            .collect::<Result<_, _>>()?)
    };

    let zeros = |units: usize| graph.constant(Tensor::zeros(&[n, units]));
    let init = |layers: usize| -> Vec<(Var<'g>, Var<'g>)> {
        (0..layers).map(|_| (zeros(cfg.rnn_units), zeros(cfg.rnn_units))).collect()
    };
    let mut post_state = init(cfg.latent_layers);
    let mut prior_state = init(cfg.latent_layers);
    let mut pred_state = init(cfg.rnn_layers);

    let mut kl: Option<Var<'g>> = None;
    let mut posterior = Vec::new();
    let mut prior = Vec::new();
    let mut embeddings = Vec::with_capacity(total - 1);
    let mut predictions: Vec<Var<'g>> = Vec::with_capacity(total - 1);
    for t in 1..total {
        let feed_back = mode == Mode::Rollout && t > cfg.context_len;
        let g_in = if feed_back {
            net.encode(cfg, predictions[t - 2])?.0
        } else {
            g_true(t - 1)?
        };
        let hp = net.lstm("prior", g_in, &mut prior_state)?;
        let (mu_p, lp) = net.gaussian("prior", hp, cfg.z_dim)?;
        let eps = graph.constant(noise.get(t - 1).clone());

        let post = if t < frames.len() {
            let hq = net.lstm("post", g_true(t)?, &mut post_state)?;
            Some(net.gaussian("post", hq, cfg.z_dim)?)
        } else {
            None
        };
        let use_prior = mode == Mode::Rollout && t >= cfg.context_len;
        let z = match post {
            Some((mu_q, lq)) if !use_prior => mu_q.add(lq.exp().mul(eps)?)?,
            _ => mu_p.add(lp.exp().mul(eps)?)?,
        };
        if let Some((mu_q, lq)) = post {
            let term = kl_term(mu_q, lq, mu_p, lp)?;
            kl = Some(match kl {
                Some(acc) => acc.add(term)?,
                None => term,
            });
            posterior.push(latent(mu_q, lq, z));
            prior.push(latent(mu_p, lp, z));
        }

        let h = net.lstm("pred", Var::concat(&[g_in, z], 1)?, &mut pred_state)?;
        let g_hat = net.linear(h, "pred.out")?.tanh();
        if mode == Mode::Train {
            embeddings.push(g_hat);
        } else {
            predictions.push(net.decode(cfg, g_hat, &skip(t)?)?);
        }
    }
    if mode == Mode::Train {
        let skips: Vec<Vec<Var<'g>>> = (1..total).map(skip).collect::<Result<_, _>>()?;
        let per_stage: Vec<Var<'g>> = (0..cfg.stages())
            .map(|l| Var::concat(&skips.iter().map(|s| s[l]).collect::<Vec<_>>(), 0))
            .collect::<Result<_, _>>()?;
        let decoded = net.decode(cfg, Var::concat(&embeddings, 0)?, &per_stage)?;
        predictions = (0..total - 1)
            .map(|k| decoded.slice(0, k * n, (k + 1) * n))
            .collect::<Result<_, _>>()?;
    }

    if !full {
        return Ok(StepOutput {
            predictions,
            loss: None,
            breakdown: LossBreakdown::default(),
            posterior,
            prior,
        });
    }

    let steps = (total - 1) as f64;
    let target = x_all.slice(0, n, total * n)?;
    let pred_all = Var::concat(&predictions, 0)?;
    let sq = pred_all.sub(target)?.square();
    let recon = sq.mean().scale(steps);

    let w = cfg.peak_window;
    let frame_len = s * s;
    let mut mask = vec![0.0; (total - 1) * n * frame_len];
    let weight = 1.0 / ((w * w) as f64 * n as f64);
    for (k, f) in frames[1..].iter().enumerate() {
        for b in 0..n {
            let img = &f.data()[b * frame_len..(b + 1) * frame_len];
            let (r0, c0) = peak_box(img, s, w);
            let base = (k * n + b) * frame_len;
            for r in r0..r0 + w {
                for c in c0..c0 + w {
                    mask[base + r * s + c] = weight;
                }
            }
        }
    }
    let peak = sq
        .mul(graph.constant(Tensor::new(&[(total - 1) * n, 1, s, s], mask)?))?
        .sum();
    let kl = kl.ok_or(PredictorError::ContextLength {
        got: frames.len(),
        expected: total,
    })?;
    let loss = recon.add(peak.scale(cfg.lambda_peak))?.add(kl.scale(cfg.beta))?;
    let breakdown = LossBreakdown {
        recon_l2: recon.item(),
        peak_l2: peak.item(),
        kl: kl.item(),
        total: loss.item(),
    };
    Ok(StepOutput {
        predictions,
        loss: Some(loss),
        breakdown,
        posterior,
        prior,
    })
}
