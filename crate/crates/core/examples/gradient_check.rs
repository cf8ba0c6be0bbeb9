//! Finite-difference check of reverse-mode gradients: a small composite
//! function, then the full predictor loss on a tiny model.
//!
//! cargo run --release --example gradient_check

use iceflow::predictor::{elbo_step, init_params, Mode, ModelConfig, NoiseSource};
use iceflow_autodiff::{check_gradients, Coords, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[4, 2], |_| rng.random_range(-1.0..1.0));
    let r = check_gradients(|v| Ok(v[0].matmul(v[1])?.tanh().square().sum()), &[x, w], 1e-5, Coords::All)?;
    println!("tanh(x w)^2: max rel err {:.2e} over {} coords", r.max_rel_error, r.checked);

    let cfg = ModelConfig {
        chip_size: 16,
        z_dim: 4,
        g_dim: 8,
        rnn_units: 8,
        base_channels: 2,
        context_len: 2,
        horizon: 1,
        ..ModelConfig::toy()
    };
    let store = init_params(&cfg, 2)?;
    let n = cfg.chip_size;
    let frames: Vec<Tensor> = (0..cfg.total_len())
        .map(|_| Tensor::from_fn(&[2, 1, n, n], |_| rng.random_range(0.0..1.0)))
        .collect();
    let noise = NoiseSource::sample(&mut rng, cfg.total_len() - 1, 2, cfg.z_dim);
    let r = check_gradients(
        |v| {
            let out = elbo_step(&store, v, &cfg, &frames, Mode::Train, &noise).expect("forward pass");
            Ok(out.loss.expect("full sequence"))
        },
        store.tensors(),
        1e-5,
        Coords::Sample { per_tensor: 4, seed: 0 },
    )?;
    println!(
        "predictor loss: max rel err {:.2e} over {} coords ({} on kinks, {} below rounding)",
        r.max_rel_error,
        r.checked,
        r.excluded.len(),
        r.unresolved.len()
    );
    Ok(())
}
