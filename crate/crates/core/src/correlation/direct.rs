use rayon::prelude::*;

use super::{clean_windows, is_constant, Patch, Template};

/// Correlation evaluated independently at every offset with two-pass means.
pub(super) fn surface(t: &Template, search: &Patch, rows: usize, cols: usize) -> (Vec<f64>, Vec<bool>) {
    let clean = clean_windows(search, t.rows, t.cols, rows, cols);
    let row_results: Vec<Vec<(f64, bool)>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let mut window = vec![0.0; t.rows * t.cols];
            (0..cols)
                .map(|c| {
                    if !clean[r * cols + c] {
                        return (f64::NAN, false);
                    }
                    for m in 0..t.rows {
                        let src = (r + m) * search.cols + c;
                        window[m * t.cols..(m + 1) * t.cols]
                            .copy_from_slice(&search.values[src..src + t.cols]);
                    }
                    match score(t, &window) {
                        Some(s) => (s, true),
                        None => (f64::NAN, false),
                    }
                })
                .collect()
        })
        .collect();
    row_results.into_iter().flatten().unzip()
}

/// Score of one window against the template; `None` for a zero-variance window.
pub(super) fn score(t: &Template, window: &[f64]) -> Option<f64> {
    if is_constant(window) {
        return None;
    }
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    let (mut num, mut ss) = (0.0, 0.0);
    for (&d, &v) in t.dev.iter().zip(window) {
        let dv = v - mean;
        num += d * dv;
        ss += dv * dv;
    }
    if ss == 0.0 {
        return None;
    }
    Some((num / (t.norm * ss.sqrt())).clamp(-1.0, 1.0))
}
