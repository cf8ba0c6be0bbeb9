//! Train the toy predictor on a seeded Eulerian benchmark and compare it
//! with the persistence and high-pass models on held-out scenes.
//!
//! cargo run --release --example train_predictor -- [epochs]

use std::time::Instant;

use iceflow::baselines::HighPassConfig;
use iceflow::evaluation::{eulerian_benchmark, evaluate_benchmark, render_table, BenchmarkSpec, ModelKind};
use iceflow::predictor::{train, ModelConfig, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(30);
    let train_set = eulerian_benchmark(&BenchmarkSpec {
        seed: 1,
        n_scenes: 8,
        ..Default::default()
    })?;
    let test_set = eulerian_benchmark(&BenchmarkSpec {
        seed: 2,
        n_scenes: 8,
        ..Default::default()
    })?;
    let cfg = ModelConfig {
        context_len: 4,
        horizon: 2,
        ..ModelConfig::toy()
    };
    let opt = TrainConfig {
        epochs,
        seed: 3,
        ..Default::default()
    };
    let start = Instant::now();
    let out = train(&train_set.sequences, &cfg, &opt, None)?;
    for e in &out.log {
        println!(
            "epoch {:>3} recon {:.5} peak {:.5} kl {:.4} ({:.1}s)",
            e.epoch,
            e.loss.recon_l2,
            e.loss.peak_l2,
            e.loss.kl,
            start.elapsed().as_secs_f64()
        );
    }
    let rows = evaluate_benchmark(
        &test_set,
        &[ModelKind::Persistence, ModelKind::Highpass, ModelKind::Ml],
        &HighPassConfig::default(),
        Some((&out.params, &cfg)),
        4,
    )?;
    let summaries: Vec<_> = rows.into_iter().map(|(s, _)| s).collect();
    print!("{}", render_table(&summaries));
    Ok(())
}
