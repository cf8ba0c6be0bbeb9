//! Score persistence and high-pass models on a seeded benchmark with
//! cloud-occluded context frames and print the correlation table.
//!
//! cargo run --release --example compare_models -- [seed]

use iceflow::baselines::HighPassConfig;
use iceflow::evaluation::{eulerian_benchmark, evaluate_benchmark, render_table, BenchmarkSpec, ModelKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let bench = eulerian_benchmark(&BenchmarkSpec { seed, ..Default::default() })?;
    let occluded = bench.occluded.iter().filter(|&&o| o).count();
    println!("{} chips, {occluded} with a cloud on the last context frame", bench.sequences.len());
    let rows = evaluate_benchmark(
        &bench,
        &[ModelKind::Persistence, ModelKind::Highpass],
        &HighPassConfig::default(),
        None,
        seed,
    )?;
    let summaries: Vec<_> = rows.into_iter().map(|(s, _)| s).collect();
    print!("{}", render_table(&summaries));
    Ok(())
}
