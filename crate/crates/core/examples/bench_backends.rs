//! Wall-clock comparison of the direct and FFT correlation backends.
//!
//! cargo run --release --example bench_backends

use iceflow::correlation::time_backends;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("{:>5} {:>6} {:>10} {:>10} {:>10}", "size", "search", "direct ms", "fft ms", "max diff");
    for size in [16, 32, 64, 128] {
        let search = size * 3 / 2;
        let t = time_backends(size, search, 3, 0)?;
        println!(
            "{:>5} {:>6} {:>10.2} {:>10.2} {:>10.1e}",
            t.size, t.search, t.direct_ms, t.fft_ms, t.max_abs_diff
        );
    }
    Ok(())
}
