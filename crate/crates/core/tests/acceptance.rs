//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! straight to stdout, so the lines show up even when output is captured.
//! They run one after another in a single test so that the wall-clock
//! budgets are measured without competing test threads.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use iceflow::baselines::HighPassConfig;
use iceflow::chip::ChipGridSpec;
use iceflow::correlation::{ncc, ncc_surface, Backend, CorrelationError, Patch};
use iceflow::evaluation::{eulerian_benchmark, evaluate_benchmark, BenchmarkSpec, ModelKind};
use iceflow::predictor::{
    elbo_step, init_params, kl_diag_gaussian, train, Mode, ModelConfig, NoiseSource, TrainConfig,
};
use iceflow::raster::{add_gaussian_noise, read_raster, synth_series, write_raster, SynthSpec};
use iceflow::tracking::{track_series, SearchConfig};
use iceflow::Raster;
use iceflow_autodiff::{check_gradients, lstm_cell, Coords, LstmWeights, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(budget: Duration, start: Instant) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    if start.elapsed() <= budget {
        Ok(secs)
    } else {
        Err(format!("took {secs:.1} s, budget {} s", budget.as_secs()))
    }
}

// ---------------------------------------------------------------- backends

/// Either white noise or a smooth field built from a few random waves.
fn random_image(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    if rng.random_bool(0.5) {
        return (0..rows * cols).map(|_| rng.random()).collect();
    }
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.random_range(0.0..0.3), rng.random_range(0.0..0.3), rng.random_range(0.0..6.3)))
        .collect();
    (0..rows * cols)
        .map(|k| {
            let (r, c) = ((k / cols) as f64, (k % cols) as f64);
            0.5 + waves.iter().map(|&(a, b, p)| 0.1 * (a * r + b * c + p).sin()).sum::<f64>()
        })
        .collect()
}

fn backend_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for _ in 0..200 {
        let search = rng.random_range(16..=160usize);
        let tsize = rng.random_range(4..=(search / 2).max(4));
        let s_vals = random_image(&mut rng, search, search);
        let t_vals = random_image(&mut rng, tsize, tsize);
        let mut s = Patch::new(search, search, s_vals).unwrap();
        let t = Patch::new(tsize, tsize, t_vals).unwrap();
        if rng.random_bool(0.2) {
            let (r, c) = (rng.random_range(0..search), rng.random_range(0..search));
            s.nodata[r * search + c] = true;
            s.values[r * search + c] = f64::NAN;
        }
        let a = ncc_surface(&t, &s, Backend::Direct).map_err(|e| e.to_string())?;
        let b = ncc_surface(&t, &s, Backend::Fft).map_err(|e| e.to_string())?;
        if a.valid != b.valid {
            return Err("validity masks differ between backends".into());
        }
        for (x, y) in a.scores.iter().zip(&b.scores).filter(|(x, _)| x.is_finite()) {
            worst = worst.max((x - y).abs());
            compared += 1;
        }
    }
    let secs = within(Duration::from_secs(60), start)?;
    ensure(
        worst < 1e-6,
        format!("max |direct - fft| = {worst:.2e} over {compared} offsets of 200 pairs in {secs:.1} s"),
    )
}

// ------------------------------------------------------------- correlation

fn correlation_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut affine, mut selfc) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(2..=400usize);
        let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let ab = ncc(&a, &b).map_err(|e| e.to_string())?;
        let ba = ncc(&b, &a).map_err(|e| e.to_string())?;
        if ab.to_bits() != ba.to_bits() {
            return Err(format!("asymmetric: {ab} vs {ba}"));
        }
        let scale = rng.random_range(0.01..100.0);
        let shift = rng.random_range(-50.0..50.0);
        let scaled: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
        affine = affine.max((ncc(&scaled, &b).map_err(|e| e.to_string())? - ab).abs());
        selfc = selfc.max((ncc(&a, &a).map_err(|e| e.to_string())? - 1.0).abs());
        let flat = vec![rng.random::<f64>(); n];
        if !matches!(ncc(&flat, &b), Err(CorrelationError::ZeroVariance(_))) {
            return Err("constant input did not raise ZeroVariance".into());
        }
    }
    ensure(
        affine < 1e-9 && selfc < 1e-12,
        format!("1000 chips: symmetric bit-exact, affine dev {affine:.1e}, self dev {selfc:.1e}, zero variance rejected"),
    )
}

// ---------------------------------------------------------------- tracking

/// Offsets of chips whose whole true path stays inside the frame, paired
/// with the truth.
fn tracked_offsets(out: &iceflow::raster::SynthOutput, series: &iceflow::SceneSeries) -> Vec<((i64, i64), (i64, i64))> {
    let grid = ChipGridSpec::non_overlapping(128);
    let records = track_series(series, &grid, &SearchConfig::default()).unwrap();
    let step_truth = out.step_truth();
    let max = (series.width() - 128) as i64;
    let mut pairs = Vec::new();
    for rec in records {
        let (r0, c0) = (rec.initial_origin.0 as i64, rec.initial_origin.1 as i64);
        let inside = out
            .truth
            .iter()
            .all(|&(dr, dc)| (0..=max).contains(&(r0 + dr)) && (0..=max).contains(&(c0 + dc)));
        if !inside {
            continue;
        }
        for (step, &truth) in rec.steps.iter().zip(&step_truth) {
            pairs.push((step.offset, truth));
        }
    }
    pairs
}

fn tracking_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    let (mut exact, mut total) = (0usize, 0usize);
    let (mut close, mut noisy_total) = (0usize, 0usize);
    for series_seed in 0..4u64 {
        // small bounded steps with random signs keep most chips inside the frame
        let field: Vec<(f64, f64)> = (0..11)
            .map(|_| {
                let mut d = || rng.random_range(-16..=16i64) as f64 / if rng.random_bool(0.7) { 4.0 } else { 1.0 };
                (d().round(), d().round())
            })
            .collect();
        let mut spec = SynthSpec::uniform_flow(series_seed, 512, 12, 0.0, 0.0);
        spec.displacement_field = field;
        let out = synth_series(&spec).map_err(|e| e.to_string())?;
        for (got, truth) in tracked_offsets(&out, &out.series) {
            total += 1;
            exact += (got == truth) as usize;
        }
        let noisy = add_gaussian_noise(&out.series, 10.0, 99 + series_seed).map_err(|e| e.to_string())?;
        for (got, truth) in tracked_offsets(&out, &noisy) {
            noisy_total += 1;
            close += ((got.0 - truth.0).abs() <= 1 && (got.1 - truth.1).abs() <= 1) as usize;
        }
    }
    let noisy_rate = close as f64 / noisy_total as f64;
    ensure(
        total > 0 && exact == total && noisy_rate >= 0.95,
        format!(
            "noise-free {exact}/{total} exact; SNR 10 {close}/{noisy_total} = {:.1}% within 1 px",
            100.0 * noisy_rate
        ),
    )
}

// --------------------------------------------------------------- gradients

const OP_TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn weighted<'g>(y: Var<'g>) -> Result<Var<'g>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(y.shape().iter().product::<usize>() as u64);
    let w = y.graph().constant(random(&mut rng, &y.shape(), -1.0, 1.0));
    Ok(y.mul(w)?.sum())
}

type OpFn = Box<dyn for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>, TensorError> + Sync>;

fn operator_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let x = random(rng, &[3, 4], -2.0, 2.0);
    let y = random(rng, &[3, 4], -2.0, 2.0);
    let pos = random(rng, &[3, 4], 0.2, 3.0);
    let img = random(rng, &[2, 2, 6, 7], -1.0, 1.0);
    let n = 2;
    vec![
        ("add", Box::new(|v: &[Var]| weighted(v[0].add(v[1])?)), vec![x.clone(), y.clone()]),
        ("sub", Box::new(|v: &[Var]| weighted(v[0].sub(v[1])?)), vec![x.clone(), y.clone()]),
        ("mul", Box::new(|v: &[Var]| weighted(v[0].mul(v[1])?)), vec![x.clone(), y.clone()]),
        ("scale", Box::new(|v: &[Var]| weighted(v[0].scale(-1.3))), vec![x.clone()]),
        ("add_scalar", Box::new(|v: &[Var]| weighted(v[0].add_scalar(0.4).square())), vec![x.clone()]),
        ("sigmoid", Box::new(|v: &[Var]| weighted(v[0].sigmoid())), vec![x.clone()]),
        ("tanh", Box::new(|v: &[Var]| weighted(v[0].tanh())), vec![x.clone()]),
        ("leaky_relu", Box::new(|v: &[Var]| weighted(v[0].leaky_relu(0.2))), vec![x.clone()]),
        ("relu", Box::new(|v: &[Var]| weighted(v[0].relu())), vec![x.clone()]),
        ("exp", Box::new(|v: &[Var]| weighted(v[0].exp())), vec![x.clone()]),
        ("log", Box::new(|v: &[Var]| weighted(v[0].log())), vec![pos]),
        ("square", Box::new(|v: &[Var]| weighted(v[0].square())), vec![x.clone()]),
        ("sum", Box::new(|v: &[Var]| Ok(v[0].sum())), vec![x.clone()]),
        ("mean", Box::new(|v: &[Var]| Ok(v[0].square().mean())), vec![x.clone()]),
        ("reshape", Box::new(|v: &[Var]| weighted(v[0].reshape(&[2, 6])?)), vec![x.clone()]),
        ("matmul", Box::new(|v: &[Var]| weighted(v[0].matmul(v[1])?)), vec![x.clone(), random(rng, &[4, 5], -1.0, 1.0)]),
        ("bias_add", Box::new(|v: &[Var]| weighted(v[0].bias_add(v[1])?)), vec![img.clone(), random(rng, &[2], -1.0, 1.0)]),
        ("conv2d", Box::new(|v: &[Var]| weighted(v[0].conv2d(v[1], 2, 1)?)), vec![img.clone(), random(rng, &[3, 2, 4, 4], -1.0, 1.0)]),
        (
            "conv_transpose2d",
            Box::new(|v: &[Var]| weighted(v[0].conv_transpose2d(v[1], 2, 1)?)),
            vec![img.clone(), random(rng, &[2, 3, 4, 4], -1.0, 1.0)],
        ),
        ("slice", Box::new(|v: &[Var]| weighted(v[0].slice(3, 1, 5)?)), vec![img.clone()]),
        ("concat", Box::new(|v: &[Var]| weighted(Var::concat(&[v[0], v[1]], 1)?)), vec![img.clone(), img.clone()]),
        (
            "lstm_cell",
            Box::new(|v: &[Var]| {
                let w = LstmWeights { w_ih: v[3], w_hh: v[4], bias: v[5] };
                let (h, c) = lstm_cell(v[0], v[1], v[2], &w)?;
                weighted(h.add(c)?)
            }),
            vec![
                random(rng, &[n, 3], -1.0, 1.0),
                random(rng, &[n, 4], -1.0, 1.0),
                random(rng, &[n, 4], -1.0, 1.0),
                random(rng, &[3, 16], -0.5, 0.5),
                random(rng, &[4, 16], -0.5, 0.5),
                random(rng, &[16], -0.5, 0.5),
            ],
        ),
    ]
}

fn gradient_toy_config() -> ModelConfig {
    ModelConfig {
        chip_size: 32,
        z_dim: 8,
        g_dim: 16,
        rnn_units: 16,
        base_channels: 4,
        context_len: 4,
        horizon: 2,
        ..ModelConfig::toy()
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut op_worst = (0.0f64, "");
    for (name, f, inputs) in operator_cases(&mut rng) {
        let r = check_gradients(f, &inputs, EPS, Coords::All).map_err(|e| format!("{name}: {e}"))?;
        if r.max_rel_error > op_worst.0 || op_worst.1.is_empty() {
            op_worst = (r.max_rel_error, name);
        }
    }

    let mut model_worst = 0.0f64;
    let (mut checked, mut kinks, mut unresolved) = (0, 0, 0);
    for beta in [1e-4, 1.0] {
        let cfg = ModelConfig { beta, ..gradient_toy_config() };
        let store = init_params(&cfg, 8).map_err(|e| e.to_string())?;
        let frames: Vec<Tensor> = (0..cfg.total_len()).map(|_| random(&mut rng, &[2, 1, 32, 32], 0.0, 1.0)).collect();
        let noise = NoiseSource::sample(&mut rng, cfg.total_len() - 1, 2, cfg.z_dim);
        let r = check_gradients(
            |v| {
                let out = elbo_step(&store, v, &cfg, &frames, Mode::Train, &noise).expect("toy forward pass");
                Ok(out.loss.expect("full sequence"))
            },
            store.tensors(),
            EPS,
            Coords::Sample { per_tensor: 8, seed: 3 },
        )
        .map_err(|e| e.to_string())?;
        model_worst = model_worst.max(r.max_rel_error);
        checked += r.checked;
        kinks += r.excluded.len();
        unresolved += r.unresolved.len();
    }
    let secs = within(Duration::from_secs(300), start)?;
    ensure(
        op_worst.0 < OP_TOL && model_worst < 1e-4,
        format!(
            "22 operators max rel err {:.1e} ({}); toy predictor {:.1e} over {checked} coords ({kinks} on kinks, {unresolved} below rounding floor); {secs:.1} s",
            op_worst.0, op_worst.1, model_worst
        ),
    )
}

// ---------------------------------------------------------------------- KL

fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    -0.5 * ((x - mu) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Composite Simpson over +-12 sigma_q of `q log(q / p)`.
fn kl_quadrature(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let (a, b) = (mq - 12.0 * sq, mq + 12.0 * sq);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let lq = log_normal(x, mq, sq);
        lq.exp() * (lq - log_normal(x, mp, sp))
    };
    let mut acc = f(a) + f(b);
    for k in 1..n {
        acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

fn kl_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (mq, mp) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (sq, sp) = (rng.random_range(0.3..2.0), rng.random_range(0.3..2.0));
        let closed = kl_diag_gaussian(&[mq], &[sq], &[mp], &[sp]).map_err(|e| e.to_string())?;
        worst = worst.max((closed - kl_quadrature(mq, sq, mp, sp)).abs());
    }
    let mut negatives = 0;
    let mut min = f64::INFINITY;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=8usize);
        let mut draw = |lo: f64, hi: f64| (0..d).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let (mq, mp, sq, sp) = (draw(-3.0, 3.0), draw(-3.0, 3.0), draw(0.05, 3.0), draw(0.05, 3.0));
        let kl = kl_diag_gaussian(&mq, &sq, &mp, &sp).map_err(|e| e.to_string())?;
        min = min.min(kl);
        negatives += (kl < 0.0) as usize;
    }
    ensure(
        worst < 1e-6 && negatives == 0,
        format!("50 pairs vs quadrature max dev {worst:.1e}; 10^4 pairs min {min:.2e}, {negatives} negative"),
    )
}

// ---------------------------------------------------------------- training

fn sanity_config() -> ModelConfig {
    ModelConfig {
        chip_size: 32,
        z_dim: 4,
        g_dim: 16,
        rnn_units: 16,
        base_channels: 4,
        context_len: 2,
        horizon: 1,
        ..ModelConfig::toy()
    }
}

fn training_sanity() -> Outcome {
    let start = Instant::now();
    let bench = eulerian_benchmark(&BenchmarkSpec {
        seed: 61,
        n_scenes: 8,
        context_len: 2,
        horizon: 1,
        occluded_fraction: 0.0,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let data: Vec<_> = bench.sequences.into_iter().take(64).collect();
    let cfg = sanity_config();
    let opt = TrainConfig {
        epochs: 200,
        seed: 17,
        ..Default::default()
    };
    let a = train(&data, &cfg, &opt, None).map_err(|e| e.to_string())?;
    let b = train(&data, &cfg, &opt, None).map_err(|e| e.to_string())?;
    let secs = within(Duration::from_secs(1200), start)?;
    let first = a.log[0].loss.recon_l2;
    let last = a.log.last().unwrap().loss.recon_l2;
    let identical = a.log.len() == b.log.len()
        && a.log.iter().zip(&b.log).all(|(x, y)| {
            [x.loss.recon_l2, x.loss.peak_l2, x.loss.kl, x.loss.total].map(f64::to_bits)
                == [y.loss.recon_l2, y.loss.peak_l2, y.loss.kl, y.loss.total].map(f64::to_bits)
        });
    ensure(
        data.len() == 64 && last < 0.5 * first && identical,
        format!(
            "64 sequences x 200 epochs: recon {first:.5} -> {last:.5} ({:.2}x); rerun logs identical: {identical}; {secs:.0} s for both runs",
            last / first
        ),
    )
}

// ------------------------------------------------------------- comparison

fn directional_comparison() -> Outcome {
    let train_set = eulerian_benchmark(&BenchmarkSpec {
        seed: 1,
        n_scenes: 8,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let test_set = eulerian_benchmark(&BenchmarkSpec {
        seed: 2,
        n_scenes: 8,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let occluded = test_set.occluded.iter().filter(|&&o| o).count();
    let cfg = ModelConfig {
        context_len: 4,
        horizon: 2,
        ..ModelConfig::toy()
    };
    let opt = TrainConfig {
        epochs: 60,
        seed: 3,
        ..Default::default()
    };
    let out = train(&train_set.sequences, &cfg, &opt, None).map_err(|e| e.to_string())?;
    let rows = evaluate_benchmark(
        &test_set,
        &[ModelKind::Persistence, ModelKind::Highpass, ModelKind::Ml],
        &HighPassConfig::default(),
        Some((&out.params, &cfg)),
        4,
    )
    .map_err(|e| e.to_string())?;
    let sums_ok = rows.iter().all(|(s, _)| (s.fraction_sum() - 1.0).abs() <= 1e-12);
    let same_n = rows.iter().all(|(s, _)| s.n_valid == rows[0].0.n_valid);
    let means: Vec<String> = rows.iter().map(|(s, _)| format!("{} {:.3}", s.model, s.mean_correlation)).collect();
    let (persist, ml) = (rows[0].0.mean_correlation, rows[2].0.mean_correlation);
    ensure(
        ml > persist && sums_ok && same_n,
        format!(
            "{} held-out chips ({occluded} occluded): {}; fractions sum to 1: {sums_ok}",
            rows[0].0.n_valid,
            means.join(", ")
        ),
    )
}

// ------------------------------------------------------------ determinism

fn random_raster(rng: &mut ChaCha8Rng) -> Raster {
    let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
    let mask: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.1)).collect();
    let pixels = mask
        .iter()
        .map(|&m| if m && rng.random_bool(0.5) { f32::NAN } else { rng.random::<f32>() })
        .collect();
    Raster::new(w, h, pixels, mask, rng.random_range(-1e4..1e4), rng.random_range(1.0..100.0)).unwrap()
}

fn same_raster(a: &Raster, b: &Raster) -> bool {
    a.width() == b.width()
        && a.height() == b.height()
        && a.nodata() == b.nodata()
        && a.timestamp().to_bits() == b.timestamp().to_bits()
        && a.pixel_size_m().to_bits() == b.pixel_size_m().to_bits()
        && a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn iceflow(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_iceflow"))
        .args(args)
        .env("ICEFLOW_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("iceflow {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Result<(), String> {
    for n in names {
        let (x, y) = (std::fs::read(a.join(n)), std::fs::read(b.join(n)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            _ => return Err(format!("{n} differs after replay")),
        }
    }
    Ok(())
}

fn roundtrip_and_replay() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for k in 0..100 {
        let r = random_raster(&mut rng);
        let mut buf = Vec::new();
        write_raster(&r, &mut buf).map_err(|e| e.to_string())?;
        let back = read_raster(buf.as_slice()).map_err(|e| e.to_string())?;
        if !same_raster(&r, &back) {
            return Err(format!("raster {k} changed in a round trip"));
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    iceflow(&["synth", "--seed", "7", "--frames", "6", "--size", "256", "--dx", "3", "--dy", "-2", "--out", &p("scene")])?;
    iceflow(&["track", "--input", &p("scene"), "--chip-size", "64", "--out", &p("track")])?;
    iceflow(&["--config", &p("track/run.json"), "track", "--out", &p("track2")])?;
    same_files(&dir.path().join("track"), &dir.path().join("track2"), &["tracks.jsonl", "velocity.csv"])?;

    let small = [
        "--chip-size", "16", "--z-dim", "2", "--g-dim", "8", "--rnn-units", "8", "--base-channels", "2",
        "--context-len", "2", "--horizon", "1", "--peak-window", "8",
    ];
    let mut train_args = vec!["train", "--seed", "3", "--epochs", "2", "--out"];
    let train_dir = p("model");
    train_args.push(&train_dir);
    train_args.extend(small);
    iceflow(&train_args)?;
    let ckpt = p("model/model.icew");
    iceflow(&[
        "eval", "--input", &p("scene"), "--models", "persistence,highpass,ml", "--checkpoint", &ckpt, "--out", &p("eval"),
    ])?;
    iceflow(&["--config", &p("eval/run.json"), "eval", "--out", &p("eval2")])?;
    same_files(
        &dir.path().join("eval"),
        &dir.path().join("eval2"),
        &["summary.csv", "per_chip.jsonl", "map_persistence.pgm", "map_highpass.pgm", "map_ml.pgm"],
    )?;
    Ok("100 ICEF round trips bit-exact; track and eval replayed from run.json byte-identical".into())
}

#[test]
fn acceptance_suite() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("backend equivalence", backend_equivalence),
        ("correlation properties", correlation_properties),
        ("tracking oracle", tracking_oracle),
        ("gradient correctness", gradient_correctness),
        ("KL oracle", kl_oracle),
        ("training sanity", training_sanity),
        ("directional model comparison", directional_comparison),
        ("round trip and replay", roundtrip_and_replay),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let line = match &outcome {
            Ok(detail) => format!("PASS {name}: {detail}\n"),
            Err(detail) => {
                failed.push(name);
                format!("FAIL {name}: {detail}\n")
            }
        };
        let mut out = std::io::stdout().lock();
        let _ = out.write_all(line.as_bytes());
        let _ = out.flush();
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
