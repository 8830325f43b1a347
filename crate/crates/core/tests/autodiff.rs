use daae::gradcheck::check_gradients;
use daae::{Graph, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

/// (x, K, y) with conv2d(x, K) shaped like y.
fn conv_case() -> impl Strategy<Value = (Tensor, Tensor, Tensor, usize, usize)> {
    (
        1usize..3,
        1usize..3,
        1usize..4,
        1usize..4,
        1usize..3,
        0usize..2,
        4usize..8,
    )
        .prop_flat_map(|(n, c, f, k, stride, pad, size)| {
            let out = (size + 2 * pad - k) / stride + 1;
            (
                tensor(vec![n, c, size, size]),
                tensor(vec![f, c, k, k]),
                tensor(vec![n, f, out, out]),
                Just(stride),
                Just(pad),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_transpose_is_the_adjoint_of_conv((x, k, y, stride, pad) in conv_case()) {
        let mut g = Graph::new();
        let (xv, kv) = (g.constant(&x), g.constant(&k));
        let fwd = g.conv2d(xv, kv, None, stride, pad).unwrap();
        let lhs = g.tensor(fwd).dot(&y).unwrap();

        // The adjoint, read off as the gradient of <conv(x), y> with respect to x.
        let mut g = Graph::new();
        let (xv, kv, yv) = (g.param(&x), g.constant(&k), g.constant(&y));
        let fwd = g.conv2d(xv, kv, None, stride, pad).unwrap();
        let prod = g.mul(fwd, yv).unwrap();
        let s = g.sum(prod).unwrap();
        g.backward(s).unwrap();
        let adj = Tensor::new(x.shape().to_vec(), g.grad(xv).unwrap().to_vec()).unwrap();
        let rhs = x.dot(&adj).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn matmul_matches_naive_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let val = |i: usize| ((seed.wrapping_add(i as u64) % 1000) as f64 / 250.0) - 2.0;
        let a: Vec<f64> = (0..m * k).map(|i| val(i * 7)).collect();
        let b: Vec<f64> = (0..k * n).map(|i| val(i * 13 + 1)).collect();
        let mut g = Graph::new();
        let av = g.constant(&Tensor::new(vec![m, k], a.clone()).unwrap());
        let bv = g.constant(&Tensor::new(vec![k, n], b.clone()).unwrap());
        let c = g.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                prop_assert!((g.values(c)[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smooth_chain_passes_gradient_check(x in tensor(vec![3, 4]), w in tensor(vec![4, 2])) {
        let report = check_gradients(
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.sigmoid(h)?;
                let h = g.square(h)?;
                g.mean(h)
            },
            &[x, w],
            1e-5,
            None,
        )
        .unwrap();
        prop_assert!(report.max_relative_error < 1e-4, "{}", report.max_relative_error);
    }
}

#[test]
fn sum_of_tanh_gradient() {
    let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.3, -2.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.param(&x);
    let t = g.tanh(xv).unwrap();
    let s = g.sum(t).unwrap();
    g.backward(s).unwrap();
    for (gr, v) in g.grad(xv).unwrap().iter().zip(x.values()) {
        assert!((gr - (1.0 - v.tanh().powi(2))).abs() < 1e-15);
    }
}
