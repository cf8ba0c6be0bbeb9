use iceflow_autodiff::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;

fn tensor(max_len: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, 1..max_len).prop_map(|v| Tensor::new(&[v.len()], v).unwrap())
}

fn tanh_sum(v: Var<'_>) -> Var<'_> {
    v.tanh().sum()
}

fn exp_square_mean(v: Var<'_>) -> Var<'_> {
    v.square().exp().mean()
}

fn sigmoid_energy(v: Var<'_>) -> Var<'_> {
    v.sigmoid().square().sum()
}

fn grad(x: &Tensor, f: impl for<'g> Fn(Var<'g>) -> Var<'g>) -> Tensor {
    let g = Graph::new();
    let v = g.param(x.clone());
    g.backward(f(v)).unwrap().get(v).unwrap().clone()
}

proptest! {
    #[test]
    fn backward_is_linear(x in tensor(32), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let both = grad(&x, |v| tanh_sum(v).scale(a).add(exp_square_mean(v).scale(b)).unwrap());
        let (gf, gh) = (grad(&x, tanh_sum), grad(&x, exp_square_mean));
        for i in 0..x.len() {
            let expected = a * gf.data()[i] + b * gh.data()[i];
            prop_assert!((both.data()[i] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn backward_is_bit_reproducible(x in tensor(64)) {
        prop_assert!(grad(&x, sigmoid_energy).bit_eq(&grad(&x, sigmoid_energy)));
    }

    #[test]
    fn checkpoint_round_trip(tensors in prop::collection::vec(tensor(16), 1..6)) {
        let mut store = ParamStore::new();
        for (k, t) in tensors.into_iter().enumerate() {
            store.insert(format!("p{k}"), t);
        }
        let mut bytes = Vec::new();
        store.write_checkpoint(&mut bytes).unwrap();
        prop_assert!(ParamStore::read_checkpoint(bytes.as_slice()).unwrap().bit_eq(&store));
    }
}
