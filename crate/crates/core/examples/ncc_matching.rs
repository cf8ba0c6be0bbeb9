//! Locate a template inside a search window with both correlation backends.
//!
//! cargo run --example ncc_matching

use iceflow::correlation::{best_match, ncc, ncc_surface, Backend, Patch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("ncc([1,2,3,4], [2,4,6,8]) = {}", ncc(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0])?);
    println!("ncc([1,2,3,4], [4,3,2,1]) = {}", ncc(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0])?);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (search_n, tpl_n, at) = (96, 32, (41, 17));
    let search = Patch::new(search_n, search_n, (0..search_n * search_n).map(|_| rng.random()).collect())?;
    let tpl: Vec<f64> = (0..tpl_n * tpl_n)
        .map(|k| search.values[(at.0 + k / tpl_n) * search_n + at.1 + k % tpl_n])
        .collect();
    let template = Patch::new(tpl_n, tpl_n, tpl)?;

    for backend in [Backend::Direct, Backend::Fft] {
        let surface = ncc_surface(&template, &search, backend)?;
        let m = best_match(&surface)?;
        println!(
            "{backend:?}: {} offsets, best at {:?} score {:.6} runner-up {:.3}",
            surface.n_valid(),
            m.index,
            m.score,
            m.runner_up.unwrap_or(f64::NAN)
        );
        assert_eq!(m.index, at);
    }
    Ok(())
}
