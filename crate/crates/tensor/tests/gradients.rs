use nlos_tensor::{check_gradients, Array, Conv2dSpec, Graph, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn<T: Scalar>(shape: &[usize], seed: u64) -> Array<T> {
    Array::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Fixed random projection so every output element matters to the loss.
fn weighted_sum<'g, T: Scalar>(x: Var<'g, T>, seed: u64) -> Var<'g, T> {
    let w = x.graph().constant(randn(&x.shape(), seed));
    x.mul(w).sum()
}

fn check_all<T: Scalar>(h: f64, tol: f64) {
    type Case<T> = (
        &'static str,
        Vec<Array<T>>,
        Box<dyn for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Var<'g, T>>,
    );
    let cases: Vec<Case<T>> = vec![
        (
            "conv2d stride 1",
            vec![randn(&[2, 3, 5, 5], 1), randn(&[4, 3, 3, 3], 2), randn(&[4], 3)],
            Box::new(|_, v| weighted_sum(v[0].conv2d(v[1], Some(v[2]), Conv2dSpec::same(3)), 9)),
        ),
        (
            "conv2d stride 2",
            vec![randn(&[2, 2, 6, 6], 4), randn(&[3, 2, 3, 3], 5)],
            Box::new(|_, v| weighted_sum(v[0].conv2d(v[1], None, Conv2dSpec::new(2, 1)), 9)),
        ),
        (
            "upsample2",
            vec![randn(&[1, 2, 3, 3], 6)],
            Box::new(|_, v| weighted_sum(v[0].upsample2(), 9)),
        ),
        (
            "resize_nearest",
            vec![randn(&[1, 2, 4, 6], 7)],
            Box::new(|_, v| weighted_sum(v[0].resize_nearest(3, 4), 9)),
        ),
        (
            "avg_pool2",
            vec![randn(&[2, 1, 4, 4], 8)],
            Box::new(|_, v| weighted_sum(v[0].avg_pool2(), 9)),
        ),
        (
            "instance_standardize",
            vec![randn(&[2, 3, 3, 3], 10)],
            Box::new(|_, v| weighted_sum(v[0].instance_standardize(T::lit(1e-5)), 9)),
        ),
        (
            "channel_affine",
            vec![randn(&[2, 3, 2, 2], 11), randn(&[2, 3], 12), randn(&[2, 3], 13)],
            Box::new(|_, v| weighted_sum(v[0].channel_affine(v[1], v[2]), 9)),
        ),
        (
            "l2_normalize_rows",
            vec![randn(&[3, 4], 14)],
            Box::new(|_, v| weighted_sum(v[0].l2_normalize_rows(), 9)),
        ),
        (
            "matmul / matmul_t / bias",
            vec![randn(&[3, 4], 15), randn(&[4, 2], 16), randn(&[5, 4], 17), randn(&[2], 18)],
            Box::new(|_, v| {
                weighted_sum(v[0].matmul(v[1]).add_row_bias(v[3]), 9)
                    .add(weighted_sum(v[0].matmul_t(v[2]), 8))
            }),
        ),
        (
            "gather_rows + cross_entropy",
            vec![randn(&[3, 4], 19), randn(&[2, 4], 20)],
            Box::new(|_, v| {
                let picked = v[0].gather_rows(&[2, 0, 2]);
                let logits = v[1].matmul_t(picked);
                logits.cross_entropy(&[1, 0]).mean().add(weighted_sum(picked, 7))
            }),
        ),
        (
            "smooth activations",
            vec![randn(&[2, 5], 21)],
            Box::new(|_, v| {
                weighted_sum(v[0].sigmoid(), 1)
                    .add(weighted_sum(v[0].tanh(), 2))
                    .add(weighted_sum(v[0].square(), 3))
            }),
        ),
        (
            "concat / narrow / spatial mean",
            vec![randn(&[2, 2, 3, 3], 22), randn(&[2, 1, 3, 3], 23)],
            Box::new(|_, v| {
                let c = Var::concat(&[v[0], v[1]]);
                weighted_sum(c.narrow(1, 2).mean_spatial(), 4).add(weighted_sum(c.mean_per_sample(), 5))
            }),
        ),
    ];
    for (name, inputs, f) in cases {
        let report = check_gradients(&inputs, h, |g, v| f(g, v));
        assert!(
            report.max_relative() <= tol,
            "{name} ({}): relative error {:e} > {tol:e}",
            T::DTYPE,
            report.max_relative()
        );
    }
}

#[test]
fn ops_match_central_differences_f64() {
    check_all::<f64>(1e-5, 1e-5);
}

#[test]
fn ops_match_central_differences_f32() {
    check_all::<f32>(1e-2, 1e-3);
}

#[test]
fn piecewise_linear_ops_away_from_kinks() {
    // Inputs bounded away from zero so the step never crosses a kink.
    let x: Array<f64> = Array::from_vec(&[2, 3], vec![0.5, -0.7, 1.2, -2.0, 0.3, -0.4]).unwrap();
    let report = check_gradients(&[x], 1e-6, |_, v| {
        weighted_sum(v[0].relu(), 1)
            .add(weighted_sum(v[0].leaky_relu(0.2), 2))
            .add(weighted_sum(v[0].abs(), 3))
    });
    assert!(report.max_relative() < 1e-8);
}
