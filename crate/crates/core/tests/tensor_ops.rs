use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tprnn::tensor::{grad_check, Axis, Graph, PoolMode, Tensor, TensorError, Var};

type OpResult = Result<Var, TensorError>;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;
const INSTANCES: usize = 20;

fn t(shape: &[usize], values: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(
        shape,
        &(0..n)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect::<Vec<_>>(),
    )
}

/// Values in ±[0.2, 2], away from the kink of `abs`.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|v| {
        if v.abs() < 0.2 {
            v.signum() * 0.2 + v
        } else {
            v
        }
    })
}

/// A permutation of well-separated values, so pooling windows have no ties.
fn random_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    t(shape, &vals)
}

fn extent(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=6)
}

fn check<F>(name: &str, f: F, inputs: &[Tensor])
where
    F: Fn(&mut Graph, &[Var]) -> OpResult,
{
    let err = grad_check(f, inputs, EPS).unwrap();
    assert!(
        err < TOL,
        "{name}: relative gradient error {err:e} on {inputs:?}"
    );
}

fn forward(f: impl Fn(&mut Graph, &[Var]) -> OpResult, inputs: &[Tensor]) -> Tensor {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).clone()
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

#[test]
fn matmul_examples() {
    let id = Tensor::identity(2);
    let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(forward(|g, v| g.matmul(v[0], v[1]), &[id, m.clone()]), m);
    let out = forward(
        |g, v| g.matmul(v[0], v[1]),
        &[t(&[1, 2], &[1.0, 2.0]), t(&[2, 1], &[3.0, 4.0])],
    );
    assert_eq!(out.values(), &[11.0]);

    let mut g = Graph::new();
    let a = g.param(Tensor::identity(2));
    let b = g.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
    let p = g.matmul(a, b).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap().values(), &[5.0, 9.0, 5.0, 9.0]);
}

#[test]
fn matmul_rejects_mismatched_inner_extents() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..INSTANCES {
        let (m, k, n) = (extent(&mut rng), extent(&mut rng), extent(&mut rng));
        let inputs = [random(&mut rng, &[m, k]), random(&mut rng, &[k, n])];
        check("matmul", |g, v| g.matmul(v[0], v[1]), &inputs);
    }
}

#[test]
fn grad_check_oracle_self_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[3, 4]);
    // A linear map has no truncation error, so a large step isolates roundoff.
    let err = grad_check(
        |_: &mut Graph, v: &[Var]| -> OpResult { Ok(v[0]) },
        &[x],
        0.25,
    )
    .unwrap();
    assert!(err < 1e-12, "{err}");

    let inputs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[3, 3])).collect();
    let err = grad_check(
        |g: &mut Graph, v: &[Var]| -> OpResult {
            let ab = g.matmul(v[0], v[1])?;
            g.matmul(ab, v[2])
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");

    let x = t(&[4, 1], &[0.1, 1.5, -0.3, 0.7]);
    let err = grad_check(
        |g: &mut Graph, v: &[Var]| g.pool1d(PoolMode::Max, v[0], 2, 2),
        &[x],
        EPS,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

#[test]
fn elementwise_examples() {
    let out = forward(
        |g, v| g.add(v[0], v[1]),
        &[Tensor::vector(vec![1.0, 2.0]), Tensor::zeros(&[2])],
    );
    assert_eq!(out.values(), &[1.0, 2.0]);
    let out = forward(
        |g, v| g.mul(v[0], v[1]),
        &[
            Tensor::vector(vec![1.0, 2.0, 3.0]),
            Tensor::vector(vec![2.0; 3]),
        ],
    );
    assert_eq!(out.values(), &[2.0, 4.0, 6.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let z = g.constant(Tensor::zeros(&[3]));
    let y = g.mul(x, z).unwrap();
    assert_eq!(g.value(y).values(), &[0.0; 3]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().values(), &[0.0; 3]);
}

#[test]
fn elementwise_shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, b), Err(TensorError::Shape { .. })));
    assert!(matches!(g.mul(a, b), Err(TensorError::Shape { .. })));
    assert!(matches!(g.sub(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let shape = [extent(&mut rng), extent(&mut rng)];
        let inputs = [random(&mut rng, &shape), random(&mut rng, &shape)];
        check("add", |g, v| g.add(v[0], v[1]), &inputs);
        check("sub", |g, v| g.sub(v[0], v[1]), &inputs);
        check("mul", |g, v| g.mul(v[0], v[1]), &inputs);
        check(
            "scale_shift",
            |g, v| Ok(g.scale_shift(v[0], -1.7, 0.3)),
            &inputs[..1],
        );
        let off = [random_off_zero(&mut rng, &shape)];
        check("abs", |g, v| Ok(g.abs(v[0])), &off);
    }
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

#[test]
fn activation_examples() {
    let out = forward(
        |g, v| Ok(g.sigmoid(v[0])),
        &[Tensor::vector(vec![0.0, -50.0, 50.0, -800.0])],
    );
    assert_eq!(out.values()[0], 0.5);
    assert!(out.values()[1] < 1e-20 && out.values()[1] > 0.0);
    assert!(out.is_finite());
    assert_eq!(out.values()[3], 0.0);
    let out = forward(|g, v| Ok(g.tanh(v[0])), &[Tensor::vector(vec![0.0])]);
    assert_eq!(out.values(), &[0.0]);
}

#[test]
fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let shape = [extent(&mut rng), extent(&mut rng)];
        let x = [random(&mut rng, &shape)];
        check("sigmoid", |g, v| Ok(g.sigmoid(v[0])), &x);
        check("tanh", |g, v| Ok(g.tanh(v[0])), &x);
    }
}

// ---------------------------------------------------------------------------
// affine
// ---------------------------------------------------------------------------

#[test]
fn affine_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[5, 3]);
    let out = forward(
        |g, v| g.affine(v[0], v[1], None, Axis::Time),
        &[x.clone(), Tensor::identity(5)],
    );
    assert_eq!(out, x);

    let out = forward(
        |g, v| g.affine(v[0], v[1], Some(v[2]), Axis::Feature),
        &[
            Tensor::full(&[2, 2], 1.0),
            t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]),
            Tensor::vector(vec![1.0, 1.0]),
        ],
    );
    assert_eq!(out.values(), &[2.0, 3.0, 2.0, 3.0]);
}

#[test]
fn affine_weight_gradient_matches_finite_differences_closely() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random(&mut rng, &[4, 3]), random(&mut rng, &[3, 5])];
    let err = grad_check(
        |g: &mut Graph, v: &[Var]| g.affine(v[0], v[1], None, Axis::Feature),
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn affine_rejects_wrong_extent() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[4, 3]));
    let w = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.affine(x, w, None, Axis::Time).is_err());
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(g.affine(x, w, Some(b), Axis::Feature).is_err());
}

#[test]
fn affine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..INSTANCES {
        let (l, d, o) = (extent(&mut rng), extent(&mut rng), extent(&mut rng));
        let feat = [
            random(&mut rng, &[l, d]),
            random(&mut rng, &[d, o]),
            random(&mut rng, &[o]),
        ];
        check(
            "affine feature",
            |g, v| g.affine(v[0], v[1], Some(v[2]), Axis::Feature),
            &feat,
        );
        check(
            "affine feature no bias",
            |g, v| g.affine(v[0], v[1], None, Axis::Feature),
            &feat[..2],
        );
        let time = [
            random(&mut rng, &[l, d]),
            random(&mut rng, &[l, o]),
            random(&mut rng, &[o]),
        ];
        check(
            "affine time",
            |g, v| g.affine(v[0], v[1], Some(v[2]), Axis::Time),
            &time,
        );
        check(
            "affine time no bias",
            |g, v| g.affine(v[0], v[1], None, Axis::Time),
            &time[..2],
        );
    }
}

// ---------------------------------------------------------------------------
// conv / pool / pad
// ---------------------------------------------------------------------------

#[test]
fn conv1d_examples() {
    let x = t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]);
    let out = forward(
        |g, v| g.conv1d(v[0], v[1], 2),
        &[x.clone(), t(&[2, 1], &[1.0, 1.0])],
    );
    assert_eq!(out.values(), &[3.0, 7.0]);
    let out = forward(
        |g, v| g.conv1d(v[0], v[1], 1),
        &[x.clone(), t(&[2, 1], &[1.0, 0.0])],
    );
    assert_eq!(out.values(), &[1.0, 2.0, 3.0]);
    let c = Tensor::full(&[6, 2], 1.25);
    let out = forward(
        |g, v| g.conv1d(v[0], v[1], 2),
        &[c, t(&[2, 2], &[0.25, 0.5, 0.75, 0.5])],
    );
    assert!(out.values().iter().all(|v| (v - 1.25).abs() < 1e-15));
    let mut g = Graph::new();
    let short = g.constant(Tensor::zeros(&[1, 1]));
    let k = g.constant(Tensor::zeros(&[2, 1]));
    assert!(g.conv1d(short, k, 1).is_err());
}

#[test]
fn conv1d_is_depthwise() {
    let x = t(&[2, 2], &[1.0, 10.0, 2.0, 20.0]);
    let out = forward(
        |g, v| g.conv1d(v[0], v[1], 1),
        &[x, t(&[2, 2], &[1.0, 0.0, 1.0, 0.0])],
    );
    assert_eq!(out.values(), &[3.0, 0.0]);
}

#[test]
fn pool1d_examples() {
    let x = t(&[4, 1], &[1.0, 3.0, 2.0, 5.0]);
    assert_eq!(
        forward(|g, v| g.pool1d(PoolMode::Max, v[0], 2, 2), &[x]).values(),
        &[3.0, 5.0]
    );
    let c = Tensor::full(&[6, 3], -0.5);
    let out = forward(|g, v| g.pool1d(PoolMode::Avg, v[0], 2, 2), &[c]);
    assert!(out.values().iter().all(|&v| v == -0.5));

    let mut g = Graph::new();
    let x = g.param(t(&[2, 1], &[4.0, 4.0]));
    let y = g.pool1d(PoolMode::Min, x, 2, 2).unwrap();
    assert_eq!(g.value(y).values(), &[4.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().values(), &[1.0, 0.0]);

    let mut g = Graph::new();
    let short = g.constant(Tensor::zeros(&[1, 1]));
    assert!(g.pool1d(PoolMode::Max, short, 2, 2).is_err());
}

#[test]
fn window_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..INSTANCES {
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=3);
        let l = rng.random_range(k..=6);
        let d = extent(&mut rng);
        let conv = [random(&mut rng, &[l, d]), random(&mut rng, &[k, d])];
        check("conv1d", |g, v| g.conv1d(v[0], v[1], stride), &conv);
        let x = [random_distinct(&mut rng, &[l, d])];
        for mode in [PoolMode::Max, PoolMode::Min, PoolMode::Avg] {
            check("pool1d", |g, v| g.pool1d(mode, v[0], k, stride), &x);
        }
        let extra = rng.random_range(1..=3);
        check("pad_replicate", |g, v| g.pad_replicate(v[0], extra), &x);
    }
}

#[test]
fn pad_replicate_repeats_the_last_row() {
    let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let out = forward(|g, v| g.pad_replicate(v[0], 2), &[x]);
    assert_eq!(out.shape(), &[4, 2]);
    assert_eq!(out.values(), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
}

// ---------------------------------------------------------------------------
// shape operations
// ---------------------------------------------------------------------------

#[test]
fn stack_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, &[3, 2]);
    let b = random(&mut rng, &[3, 2]);
    let one = forward(|g, v| g.stack(&v[..1], 0), std::slice::from_ref(&a));
    assert_eq!(one.shape(), &[1, 3, 2]);
    assert_eq!(one.values(), a.values());

    let back = forward(
        |g, v| {
            let s = g.stack(&[v[0], v[1]], 0)?;
            g.select(s, 0, 0)
        },
        &[a.clone(), b.clone()],
    );
    assert_eq!(back, a);

    let four: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[48, 7])).collect();
    let out = forward(|g, v| g.stack(v, 1), &four);
    assert_eq!(out.shape(), &[48, 4, 7]);

    let mut g = Graph::new();
    assert!(g.stack(&[], 0).is_err());
    let x = g.constant(Tensor::zeros(&[2]));
    let y = g.constant(Tensor::zeros(&[3]));
    assert!(g.stack(&[x, y], 0).is_err());
}

#[test]
fn shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..INSTANCES {
        let (l, d) = (extent(&mut rng), extent(&mut rng));
        let xs = [
            random(&mut rng, &[l, d]),
            random(&mut rng, &[l, d]),
            random(&mut rng, &[l, d]),
        ];
        let axis = rng.random_range(0..=2);
        check("stack", |g, v| g.stack(v, axis), &xs);
        let cat_axis = rng.random_range(0..=1);
        check("concat", |g, v| g.concat(v, cat_axis), &xs);
        let start = rng.random_range(0..l);
        let len = rng.random_range(1..=l - start);
        check("narrow", |g, v| g.narrow(v[0], 0, start, len), &xs[..1]);
        let col = rng.random_range(0..d);
        check("select", |g, v| g.select(v[0], 1, col), &xs[..1]);
        check("reshape", |g, v| g.reshape(v[0], &[d * l]), &xs[..1]);
        check("sum", |g, v| Ok(g.sum(v[0])), &xs[..1]);
        check("mean", |g, v| Ok(g.mean(v[0])), &xs[..1]);
    }
}

#[test]
fn weighted_sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..INSTANCES {
        let (l, b, d) = (extent(&mut rng), extent(&mut rng), extent(&mut rng));
        let inputs = [
            random(&mut rng, &[l, b, d]),
            random(&mut rng, &[b]),
            random(&mut rng, &[1]),
        ];
        check(
            "weighted_sum",
            |g, v| g.weighted_sum(v[0], 1, v[1], Some(v[2])),
            &inputs,
        );
        check(
            "weighted_sum no bias",
            |g, v| g.weighted_sum(v[0], 1, v[1], None),
            &inputs[..2],
        );
        let wide = [random(&mut rng, &[b, l, d]), random(&mut rng, &[b, l])];
        check(
            "weighted_sum prefix",
            |g, v| g.weighted_sum(v[0], 0, v[1], None),
            &wide,
        );
    }
}

#[test]
fn weighted_sum_hand_computation() {
    let a = Tensor::full(&[2, 3], 1.0);
    let b = Tensor::full(&[2, 3], 2.0);
    let c = Tensor::full(&[2, 3], 4.0);
    let out = forward(
        |g, v| {
            let s = g.stack(&v[..3], 0)?;
            g.weighted_sum(s, 0, v[3], None)
        },
        &[a, b, c, Tensor::vector(vec![1.0, 1.0, 1.0])],
    );
    assert_eq!(out.values(), &[7.0; 6]);
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

#[test]
fn dropout_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[5, 4]);
    for (p, training) in [(0.0, true), (0.0, false), (0.5, false)] {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.dropout_with(v, p, training, &mut rng).unwrap();
        assert_eq!(g.value(y), &x);
    }
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    for p in [-0.1, 1.0, 1.5] {
        assert!(matches!(
            g.dropout_with(v, p, true, &mut rng),
            Err(TensorError::Config(_))
        ));
    }
}

#[test]
fn dropout_zero_fraction_matches_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[100_000], 1.0));
    let y = g.dropout_with(x, 0.5, true, &mut rng).unwrap();
    let vals = g.value(y).values();
    let zeros = vals.iter().filter(|&&v| v == 0.0).count() as f64 / vals.len() as f64;
    assert!((zeros - 0.5).abs() < 0.01, "zero fraction {zeros}");
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn dropout_backward_reuses_the_mask() {
    let mut g = Graph::training(14);
    let x = g.param(Tensor::full(&[1000], 1.0));
    let y = g.dropout(x, 0.3).unwrap();
    let s = g.sum(y);
    let out = g.value(y).clone();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &out);
}

// ---------------------------------------------------------------------------
// backward contract
// ---------------------------------------------------------------------------

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 3, 2]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &Tensor::full(&[2, 3, 2], 1.0));

    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[4]));
    let y = g.sigmoid(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().values(), &[0.25; 4]);
}

#[test]
fn unreachable_parameters_get_zero_gradients() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[3], 2.0));
    let unused = g.param(Tensor::full(&[2, 2], 5.0));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &Tensor::zeros(&[2, 2]));
}

#[test]
fn backward_rejects_non_scalar_losses() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[3]));
    let y = g.tanh(x);
    assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn second_backward_requires_a_reset() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[2], 1.0));
    let y = g.mul(x, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(matches!(
        g.backward(s),
        Err(TensorError::BackwardAlreadyRun)
    ));
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().values(), &[2.0, 2.0]);
}

#[test]
fn graph_records_inputs_before_outputs() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::identity(2));
    let c = g.matmul(a, b).unwrap();
    let d = g.tanh(c);
    for v in [c, d] {
        assert!(g.inputs(v).iter().all(|i| i.index() < v.index()));
    }
}
