use iceflow_autodiff::{
    check_gradients, grad_check, lstm_cell, Coords, Graph, LstmWeights, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random weights so that reducing with a plain sum does not hide
/// permutation bugs in the backward pass.
fn weighted_sum<'g>(y: Var<'g>, seed: u64) -> Result<Var<'g>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &y.shape(), -1.0, 1.0);
    let w = y.graph().constant(w);
    Ok(y.mul(w)?.sum())
}

fn assert_passes(name: &str, report: iceflow_autodiff::GradCheckReport) {
    assert!(
        report.max_rel_error < TOL,
        "{name}: max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
    assert!(report.checked > 0, "{name}: nothing checked");
}

#[test]
fn matmul_identity() {
    let g = Graph::new();
    let a = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let eye = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    assert_eq!(a.matmul(eye).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn sum_of_squares_gradient() {
    let g = Graph::new();
    let x = g.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let grads = g.backward(x.square().sum()).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn one_by_one_conv_is_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let map = random(&mut rng, &[1, 1, 5, 4], -1.0, 1.0);
    let up = random(&mut rng, &[1, 1, 5, 4], -1.0, 1.0);
    let g = Graph::new();
    let x = g.constant(map.clone());
    let k = g.param(Tensor::new(&[1, 1, 1, 1], vec![0.7]).unwrap());
    let y = x.conv2d(k, 1, 0).unwrap();
    for (a, b) in y.value().data().iter().zip(map.data()) {
        assert!((a - 0.7 * b).abs() < 1e-15);
    }
    let loss = y.mul(g.constant(up.clone())).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    let expected: f64 = map.data().iter().zip(up.data()).map(|(m, u)| m * u).sum();
    assert!((grads.get(k).unwrap().data()[0] - expected).abs() < 1e-12);
}

#[test]
fn shape_errors_name_both_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    let msg = a.matmul(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    assert!(a.add(b).is_err());
    assert!(a.slice(1, 2, 5).is_err());
    assert!(Var::concat(&[a, g.constant(Tensor::zeros(&[3, 3]))], 1).is_err());
}

#[test]
fn elementwise_operators_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..5u64 {
        let shape = [rng.random_range(1..4), rng.random_range(1..6)];
        let x = random(&mut rng, &shape, -2.0, 2.0);
        let pos = random(&mut rng, &shape, 0.2, 3.0);
        let y = random(&mut rng, &shape, -2.0, 2.0);

        let cases: Vec<(&str, Tensor)> = vec![("x", x.clone()), ("pos", pos.clone())];
        for (label, input) in &cases {
            let r = grad_check(|v| weighted_sum(v.sigmoid(), trial), input, EPS).unwrap();
            assert_passes(&format!("sigmoid {label}"), r);
            let r = grad_check(|v| weighted_sum(v.tanh(), trial), input, EPS).unwrap();
            assert_passes(&format!("tanh {label}"), r);
            let r = grad_check(|v| weighted_sum(v.exp(), trial), input, EPS).unwrap();
            assert_passes(&format!("exp {label}"), r);
            let r = grad_check(|v| weighted_sum(v.square(), trial), input, EPS).unwrap();
            assert_passes(&format!("square {label}"), r);
            let r = grad_check(|v| weighted_sum(v.leaky_relu(0.2), trial), input, EPS).unwrap();
            assert_passes(&format!("leaky_relu {label}"), r);
            let r = grad_check(|v| Ok(v.scale(-1.7).add_scalar(0.3).mean()), input, EPS).unwrap();
            assert_passes(&format!("scale/mean {label}"), r);
        }
        let r = grad_check(|v| weighted_sum(v.log(), trial), &pos, EPS).unwrap();
        assert_passes("log", r);

        let pair = [x.clone(), y.clone()];
        for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
            let r = check_gradients(
                |v| {
                    let out = match op {
                        0 => v[0].add(v[1])?,
                        1 => v[0].sub(v[1])?,
                        _ => v[0].mul(v[1])?,
                    };
                    weighted_sum(out, trial)
                },
                &pair,
                EPS,
                Coords::All,
            )
            .unwrap();
            assert_passes(name, r);
        }
    }
}

#[test]
fn structural_operators_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..5u64 {
        let (m, k, n) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..5),
        );
        let a = random(&mut rng, &[m, k], -1.0, 1.0);
        let b = random(&mut rng, &[k, n], -1.0, 1.0);
        let r = check_gradients(
            |v| weighted_sum(v[0].matmul(v[1])?, trial),
            &[a.clone(), b],
            EPS,
            Coords::All,
        )
        .unwrap();
        assert_passes("matmul", r);

        let x = random(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let bias = random(&mut rng, &[3], -1.0, 1.0);
        let r = check_gradients(
            |v| weighted_sum(v[0].bias_add(v[1])?, trial),
            &[x.clone(), bias],
            EPS,
            Coords::All,
        )
        .unwrap();
        assert_passes("bias_add", r);

        let r = grad_check(|v| weighted_sum(v.reshape(&[6, 4])?, trial), &x, EPS).unwrap();
        assert_passes("reshape", r);

        for axis in 0..4 {
            let len = x.shape()[axis];
            if len < 2 {
                continue;
            }
            let r = grad_check(|v| weighted_sum(v.slice(axis, 1, len)?, trial), &x, EPS).unwrap();
            assert_passes("slice", r);
        }

        let c = random(&mut rng, &[2, 1, 2, 2], -1.0, 1.0);
        let r = check_gradients(
            |v| weighted_sum(Var::concat(&[v[0], v[1], v[0]], 1)?, trial),
            &[x.clone(), c],
            EPS,
            Coords::All,
        )
        .unwrap();
        assert_passes("concat", r);
        let r = grad_check(|v| Ok(v.sum()), &a, EPS).unwrap();
        assert_passes("sum", r);
    }
}

#[test]
fn convolutions_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (trial, &(h, k, s, p)) in [(6, 3, 1, 1), (8, 4, 2, 1), (7, 3, 2, 0), (4, 4, 2, 1)]
        .iter()
        .enumerate()
    {
        let x = random(&mut rng, &[2, 2, h, h + 1], -1.0, 1.0);
        let w = random(&mut rng, &[3, 2, k, k], -1.0, 1.0);
        let r = check_gradients(
            |v| weighted_sum(v[0].conv2d(v[1], s, p)?, trial as u64),
            &[x.clone(), w],
            EPS,
            Coords::All,
        )
        .unwrap();
        assert_passes("conv2d", r);

        let wt = random(&mut rng, &[2, 3, k, k], -1.0, 1.0);
        let r = check_gradients(
            |v| weighted_sum(v[0].conv_transpose2d(v[1], s, p)?, trial as u64),
            &[x, wt],
            EPS,
            Coords::All,
        )
        .unwrap();
        assert_passes("conv_transpose2d", r);
    }
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    // <conv(x, w), y> == <x, conv_t(y, w)> with matching stride/padding.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[1, 2, 8, 8], -1.0, 1.0);
    let w = random(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
    let y = random(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
    let g = Graph::new();
    let cx = g
        .constant(x.clone())
        .conv2d(g.constant(w.clone()), 2, 1)
        .unwrap();
    let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let ty = g
        .constant(y)
        .conv_transpose2d(g.constant(w), 2, 1)
        .unwrap();
    assert_eq!(ty.shape(), vec![1, 2, 8, 8]);
    let rhs: f64 = ty.value().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

fn lstm_inputs(rng: &mut ChaCha8Rng, n: usize, input: usize, units: usize) -> Vec<Tensor> {
    vec![
        random(rng, &[n, input], -1.0, 1.0),
        random(rng, &[n, units], -1.0, 1.0),
        random(rng, &[n, units], -1.0, 1.0),
        random(rng, &[input, 4 * units], -0.5, 0.5),
        random(rng, &[units, 4 * units], -0.5, 0.5),
        random(rng, &[4 * units], -0.5, 0.5),
    ]
}

#[test]
fn lstm_zero_weights_and_state_give_zero_output() {
    let g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 2], vec![0.4, -0.9]).unwrap());
    let h = g.constant(Tensor::zeros(&[1, 3]));
    let c = g.constant(Tensor::zeros(&[1, 3]));
    let w = LstmWeights {
        w_ih: g.constant(Tensor::zeros(&[2, 12])),
        w_hh: g.constant(Tensor::zeros(&[3, 12])),
        bias: g.constant(Tensor::zeros(&[12])),
    };
    let (h1, c1) = lstm_cell(x, h, c, &w).unwrap();
    assert!(h1.value().data().iter().all(|&v| v == 0.0));
    assert!(c1.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn lstm_saturated_forget_gate_keeps_cell() {
    let units = 2;
    let mut bias = vec![0.0; 4 * units];
    bias[..units].fill(-60.0); // input gate -> 0
    bias[units..2 * units].fill(60.0); // forget gate -> 1
    let g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 1], vec![0.0]).unwrap());
    let h = g.constant(Tensor::zeros(&[1, units]));
    let c = g.constant(Tensor::new(&[1, units], vec![0.37, -1.25]).unwrap());
    let w = LstmWeights {
        w_ih: g.constant(Tensor::zeros(&[1, 4 * units])),
        w_hh: g.constant(Tensor::zeros(&[units, 4 * units])),
        bias: g.constant(Tensor::new(&[4 * units], bias).unwrap()),
    };
    let (_, c1) = lstm_cell(x, h, c, &w).unwrap();
    let got = c1.value();
    assert!((got.data()[0] - 0.37).abs() < 1e-15);
    assert!((got.data()[1] + 1.25).abs() < 1e-15);
}

#[test]
fn lstm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = lstm_inputs(&mut rng, 2, 3, 4);
    let r = check_gradients(
        |v| {
            let w = LstmWeights {
                w_ih: v[3],
                w_hh: v[4],
                bias: v[5],
            };
            let (h, _) = lstm_cell(v[0], v[1], v[2], &w)?;
            Ok(h.sum())
        },
        &inputs,
        EPS,
        Coords::All,
    )
    .unwrap();
    assert_passes("lstm", r);
}

fn tanh_sum(v: Var<'_>) -> Var<'_> {
    v.tanh().sum()
}

fn exp_square_mean(v: Var<'_>) -> Var<'_> {
    v.square().exp().mean()
}

fn combined(v: Var<'_>) -> Var<'_> {
    tanh_sum(v)
        .scale(1.5)
        .add(exp_square_mean(v).scale(-0.25))
        .expect("scalar shapes agree")
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&mut rng, &[2, 5], -1.0, 1.0);
    let grad_of = |f: for<'g> fn(Var<'g>) -> Var<'g>| {
        let g = Graph::new();
        let v = g.param(x.clone());
        let grads = g.backward(f(v)).unwrap();
        grads.get(v).unwrap().clone()
    };
    let both = grad_of(combined);
    let gf = grad_of(tanh_sum);
    let gh = grad_of(exp_square_mean);
    for i in 0..x.len() {
        let expected = 1.5 * gf.data()[i] - 0.25 * gh.data()[i];
        assert!((both.data()[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = random(&mut rng, &[2, 1, 8, 8], 0.0, 1.0);
        let w = random(&mut rng, &[4, 1, 4, 4], -0.3, 0.3);
        let g = Graph::new();
        let wv = g.param(w);
        let y = g.constant(x).conv2d(wv, 2, 1).unwrap().leaky_relu(0.2);
        let loss = y.square().mean();
        let grads = g.backward(loss).unwrap();
        (loss.value(), grads.get(wv).unwrap().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert!(l1.bit_eq(&l2));
    assert!(g1.bit_eq(&g2));
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let c = g.constant(Tensor::scalar(2.0));
    let p = g.param(Tensor::scalar(3.0));
    let grads = g.backward(c.mul(p).unwrap()).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[2.0]);
}
