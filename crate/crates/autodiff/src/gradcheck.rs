//! Central-difference gradient oracle.

use rayon::prelude::*;

use crate::{Graph, Tensor, TensorError, Var};

/// One-sided slopes that disagree by more than this (relative to
/// `max(1, |slope|)`) mark a non-differentiable point; such coordinates are
/// excluded from the error statistic and listed in the report.
pub const KINK_TOLERANCE: f64 = 0.05;

/// Largest relative gap between the central differences at `eps` and
/// `eps / 2`, beyond rounding, before a coordinate counts as non-smooth.
pub const STENCIL_TOLERANCE: f64 = 1e-6;

/// Rounding error of one central difference, in units of
/// `EPSILON * |f| / eps`.
pub const ROUNDING_ULPS: f64 = 4.0;

/// A gradient smaller than `MIN_SIGNAL` times the rounding error of its own
/// finite difference cannot be measured; it is listed as unresolved.
pub const MIN_SIGNAL: f64 = 1e5;

#[derive(Clone, Copy)]
enum Status {
    Checked,
    Kink,
    Unresolved,
}

/// Which coordinates of each input get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most `per_tensor` coordinates per input, chosen by a seeded stream.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because they sit on a kink.
    pub excluded: Vec<(usize, usize)>,
    /// Coordinates whose gradient is below the finite-difference resolution.
    pub unresolved: Vec<(usize, usize)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Gradient check of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>, TensorError> + Sync,
{
    check_gradients(|vars| f(vars[0]), std::slice::from_ref(x), eps, Coords::All)
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pick_coords(inputs: &[Tensor], coords: Coords) -> Vec<(usize, usize)> {
    let mut picks = Vec::new();
    for (t, x) in inputs.iter().enumerate() {
        match coords {
            Coords::All => picks.extend((0..x.len()).map(|i| (t, i))),
            Coords::Sample { per_tensor, seed } => {
                if x.len() <= per_tensor {
                    picks.extend((0..x.len()).map(|i| (t, i)));
                    continue;
                }
                // partial Fisher-Yates over the index range
                let mut state = seed ^ (t as u64).wrapping_mul(0xA24B_AED4_963E_E407);
                let mut idx: Vec<usize> = (0..x.len()).collect();
                for k in 0..per_tensor {
                    let r = k + (splitmix(&mut state) % (x.len() - k) as u64) as usize;
                    idx.swap(k, r);
                }
                let mut chosen = idx[..per_tensor].to_vec();
                chosen.sort_unstable();
                picks.extend(chosen.into_iter().map(|i| (t, i)));
            }
        }
    }
    picks
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64, TensorError>
where
    F: for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>, TensorError>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| graph.constant(x.clone())).collect();
    let out = f(&vars)?;
    let v = out.value();
    v.item().ok_or_else(|| TensorError::NotScalar(v.shape().to_vec()))
}

/// Compare backward gradients of `f` at `inputs` against central differences
/// `(f(x + eps e) - f(x - eps e)) / 2 eps`. Coordinates near a kink or below
/// the rounding floor are listed in the report instead of scored.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    coords: Coords,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>, TensorError> + Sync,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::BadStep(eps));
    }
    let analytic: Vec<Tensor> = {
        let graph = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| graph.param(x.clone())).collect();
        let out = f(&vars)?;
        if !out.item().is_finite() {
            return Err(TensorError::NonFinite { index: 0 });
        }
        let grads = graph.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(x.shape()))
            })
            .collect()
    };
    let center = eval(&f, inputs)?;

    let picks = pick_coords(inputs, coords);
    let results: Vec<Result<(usize, usize, f64, Status), TensorError>> = picks
        .par_iter()
        .map(|&(t, i)| {
            let mut shifted = inputs.to_vec();
            let x0 = inputs[t].data()[i];
            let mut at = |d: f64| -> Result<f64, TensorError> {
                shifted[t].data_mut()[i] = x0 + d;
                let v = eval(&f, &shifted)?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(TensorError::NonFinite { index: i })
                }
            };
            let (p, m, ph, mh) = (at(eps)?, at(-eps)?, at(0.5 * eps)?, at(-0.5 * eps)?);
            let fwd = (p - center) / eps;
            let bwd = (center - m) / eps;
            let one_sided = (fwd - bwd).abs() > KINK_TOLERANCE * fwd.abs().max(bwd.abs()).max(1.0);
            let numeric = (p - m) / (2.0 * eps);
            let half = (ph - mh) / eps;
            let rounding = ROUNDING_ULPS * f64::EPSILON * center.abs().max(p.abs()).max(m.abs()) / eps;
            // a kink inside [x - eps, x + eps] but outside the half step splits the two estimates
            let crossed = (numeric - half).abs() > STENCIL_TOLERANCE * numeric.abs().max(half.abs()) + 3.0 * rounding;
            let a = analytic[t].data()[i];
            if !a.is_finite() {
                return Err(TensorError::NonFinite { index: i });
            }
            let status = if one_sided || crossed {
                Status::Kink
            } else if a.abs().max(numeric.abs()) < MIN_SIGNAL * rounding {
                Status::Unresolved
            } else {
                Status::Checked
            };
            Ok((t, i, relative_error(a, numeric), status))
        })
        .collect();

    let mut report = GradCheckReport::default();
    for r in results {
        let (t, i, err, status) = r?;
        match status {
            Status::Kink => {
                report.excluded.push((t, i));
                continue;
            }
            Status::Unresolved => {
                report.unresolved.push((t, i));
                continue;
            }
            Status::Checked => {}
        }
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((t, i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.5, 0.01]).unwrap();
        let r = grad_check(|x| Ok(x.square().sum()), &x, 1e-5).unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = grad_check(|x| Ok(x.relu().sum()), &x, 1e-5).unwrap();
        assert_eq!(r.excluded, vec![(0, 1)]);
        // the flat side has no signal above rounding
        assert_eq!(r.unresolved, vec![(0, 0)]);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn rejects_out_of_range_step() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(
            grad_check(|x| Ok(x.square()), &x, 0.1),
            Err(TensorError::BadStep(_))
        ));
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            grad_check(|x| Ok(x.log().sum()), &x, 1e-5),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let x = vec![Tensor::zeros(&[100]), Tensor::zeros(&[3])];
        let a = pick_coords(&x, Coords::Sample { per_tensor: 5, seed: 9 });
        let b = pick_coords(&x, Coords::Sample { per_tensor: 5, seed: 9 });
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert!(a.iter().filter(|(t, _)| *t == 0).all(|(_, i)| *i < 100));
    }
}
