use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{clean_windows, direct, Patch, Template};

/// Windows whose per-pixel variance falls below this fraction of the search
/// region's mean square are rescored directly; cancellation in the
/// summed-area variance is too coarse there.
const FALLBACK_RATIO: f64 = 1e-6;

fn transform(buf: &mut [Complex<f64>], rows: usize, cols: usize, row_fft: &dyn Fft<f64>, col_fft: &dyn Fft<f64>) {
    row_fft.process(buf);
    let mut t = vec![Complex::new(0.0, 0.0); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = buf[r * cols + c];
        }
    }
    col_fft.process(&mut t);
    for c in 0..cols {
        for r in 0..rows {
            buf[r * cols + c] = t[c * rows + r];
        }
    }
}

/// Frequency-domain cross-correlation of the mean-removed template with the
/// mean-shifted search region, normalized by summed-area window variances.
pub(super) fn surface(t: &Template, search: &Patch, rows: usize, cols: usize) -> (Vec<f64>, Vec<bool>) {
    let (sh, sw) = (search.rows, search.cols);
    let clean = clean_windows(search, t.rows, t.cols, rows, cols);

    let valid_count = search.nodata.iter().filter(|&&m| !m).count().max(1);
    let shift = search
        .values
        .iter()
        .zip(&search.nodata)
        .filter(|(_, &m)| !m)
        .map(|(&v, _)| v)
        .sum::<f64>()
        / valid_count as f64;
    let shifted: Vec<f64> = search
        .values
        .iter()
        .zip(&search.nodata)
        .map(|(&v, &m)| if m { 0.0 } else { v - shift })
        .collect();
    let mean_square = shifted.iter().map(|v| v * v).sum::<f64>() / valid_count as f64;

    let (pr, pc) = (sh.next_power_of_two(), sw.next_power_of_two());
    let mut planner = FftPlanner::<f64>::new();
    let row_fwd = planner.plan_fft_forward(pc);
    let col_fwd = planner.plan_fft_forward(pr);
    let row_inv = planner.plan_fft_inverse(pc);
    let col_inv = planner.plan_fft_inverse(pr);

    let zero = Complex::new(0.0, 0.0);
    let mut fs = vec![zero; pr * pc];
    for r in 0..sh {
        for c in 0..sw {
            fs[r * pc + c].re = shifted[r * sw + c];
        }
    }
    let mut ft = vec![zero; pr * pc];
    for r in 0..t.rows {
        for c in 0..t.cols {
            ft[r * pc + c].re = t.dev[r * t.cols + c];
        }
    }
    transform(&mut fs, pr, pc, row_fwd.as_ref(), col_fwd.as_ref());
    transform(&mut ft, pr, pc, row_fwd.as_ref(), col_fwd.as_ref());
    for (s, k) in fs.iter_mut().zip(&ft) {
        *s *= k.conj();
    }
    transform(&mut fs, pr, pc, row_inv.as_ref(), col_inv.as_ref());
    let scale = 1.0 / (pr * pc) as f64;

    // summed-area tables of the shifted values and their squares
    let w = sw + 1;
    let mut s1 = vec![0.0; (sh + 1) * w];
    let mut s2 = vec![0.0; (sh + 1) * w];
    for r in 0..sh {
        for c in 0..sw {
            let v = shifted[r * sw + c];
            s1[(r + 1) * w + c + 1] = v + s1[r * w + c + 1] + s1[(r + 1) * w + c] - s1[r * w + c];
            s2[(r + 1) * w + c + 1] = v * v + s2[r * w + c + 1] + s2[(r + 1) * w + c] - s2[r * w + c];
        }
    }
    let box_sum = |tab: &[f64], r: usize, c: usize| {
        tab[(r + t.rows) * w + c + t.cols] + tab[r * w + c] - tab[r * w + c + t.cols] - tab[(r + t.rows) * w + c]
    };

    let n = (t.rows * t.cols) as f64;
    let mut scores = Vec::with_capacity(rows * cols);
    let mut valid = Vec::with_capacity(rows * cols);
    let mut window = vec![0.0; t.rows * t.cols];
    for r in 0..rows {
        for c in 0..cols {
            if !clean[r * cols + c] {
                scores.push(f64::NAN);
                valid.push(false);
                continue;
            }
            let sum = box_sum(&s1, r, c);
            let var_sum = box_sum(&s2, r, c) - sum * sum / n;
            if !(var_sum > FALLBACK_RATIO * mean_square * n) {
                for m in 0..t.rows {
                    let src = (r + m) * sw + c;
                    window[m * t.cols..(m + 1) * t.cols].copy_from_slice(&search.values[src..src + t.cols]);
                }
                match direct::score(t, &window) {
                    Some(s) => {
                        scores.push(s);
                        valid.push(true);
                    }
                    None => {
                        scores.push(f64::NAN);
                        valid.push(false);
                    }
                }
                continue;
            }
            let num = fs[r * pc + c].re * scale;
            scores.push((num / (t.norm * var_sum.sqrt())).clamp(-1.0, 1.0));
            valid.push(true);
        }
    }
    (scores, valid)
}
