use approx::assert_abs_diff_eq;
use patchformer::tensor::{grad_check, grad_check_many, matmul, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                c[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_and_projector() {
    let i2 = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(matmul(&i2, &m).unwrap().data(), m.data());

    let p = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
    let q = Tensor::<f64>::from_f64(vec![2, 2], &[5.0, 6.0, 7.0, 8.0]).unwrap();
    assert_eq!(matmul(&p, &q).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::<f32>::zeros(vec![2, 3]);
    let b = Tensor::<f32>::zeros(vec![4, 5]);
    let msg = matmul(&a, &b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_random_4x3_by_3x5_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[4, 3]);
    let b = random_tensor(&mut rng, &[3, 5]);
    let c = matmul(&a, &b).unwrap();
    let oracle = triple_loop(a.data(), b.data(), 4, 3, 5);
    for (x, y) in c.data().iter().zip(&oracle) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-6);
    }
}

#[test]
fn matmul_large_rows_use_chunked_path() {
    // More rows than one parallel chunk.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, &[600, 7]);
    let b = random_tensor(&mut rng, &[7, 5]);
    let mut g = Graph::new();
    let (va, vb) = (g.leaf(&a), g.leaf(&b));
    let c = g.matmul(va, vb).unwrap();
    let oracle = triple_loop(a.data(), b.data(), 600, 7, 5);
    for (x, y) in g.value(c).iter().zip(&oracle) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }
}

proptest! {
    #[test]
    fn matmul_agrees_with_triple_loop(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        let c = matmul(&a, &b).unwrap();
        let oracle = triple_loop(a.data(), b.data(), m, k, n);
        for (x, y) in c.data().iter().zip(&oracle) {
            prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_positive(rows in 1usize..6, cols in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::from_fn(vec![rows, cols], |_| rng.random_range(-20.0..20.0));
        let mut g = Graph::new();
        let v = g.leaf(&x);
        let y = g.softmax(v, 1).unwrap();
        for row in g.value(y).chunks(cols) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn composite_backward_matches_finite_differences(n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[n, 4]);
        let w = random_tensor(&mut rng, &[4, 3]);
        let gamma = random_tensor(&mut rng, &[3]);
        let beta = random_tensor(&mut rng, &[3]);
        let report = grad_check_many(
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.layer_norm(h, v[2], v[3], 1e-6)?;
                let h = g.gelu(h);
                let p = g.softmax(h, 1)?;
                let q = g.mul(p, h)?;
                Ok(g.sum(q))
            },
            &[x, w, gamma, beta],
            1e-5,
        )
        .unwrap();
        prop_assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let zero = g.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let y = g.softmax(zero, 1).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let base = g.constant(vec![1, 2], vec![0.3, -1.2]).unwrap();
    let shifted = g.constant(vec![1, 2], vec![0.3 + 40.0, -1.2 + 40.0]).unwrap();
    let (a, b) = (g.softmax(base, 1).unwrap(), g.softmax(shifted, 1).unwrap());
    for (x, y) in g.value(a).iter().zip(g.value(b)) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }

    let x = g.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let direct: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
    // Frozen from the direct formula.
    let frozen = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
    for ((p, d), f) in g.value(y).iter().zip(&direct).zip(&frozen) {
        assert_abs_diff_eq!(p, d, epsilon = 1e-9);
        assert_abs_diff_eq!(p, f, epsilon = 1e-9);
    }
}

#[test]
fn softmax_over_leading_axis() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert!(g.value(y).iter().all(|&p| (p - 0.5).abs() < 1e-12));
}

#[test]
fn softmax_is_monotone() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![4], vec![-1.0, 0.5, 0.25, 3.0]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    let p = g.value(y);
    assert!(p[0] < p[2] && p[2] < p[1] && p[1] < p[3]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(vec![4], vec![1.0; 4]).unwrap();
    let zeros = g.constant(vec![4], vec![0.0; 4]).unwrap();
    let constant = g.constant(vec![1, 4], vec![2.5; 4]).unwrap();
    let y = g.layer_norm(constant, ones, zeros, 1e-6).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
    let x = g.constant(vec![1, 8], data.clone()).unwrap();
    let gamma0 = g.constant(vec![8], vec![0.0; 8]).unwrap();
    let beta = g.constant(vec![8], vec![0.75; 8]).unwrap();
    let y = g.layer_norm(x, gamma0, beta, 1e-6).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.75));

    let ones8 = g.constant(vec![8], vec![1.0; 8]).unwrap();
    let zeros8 = g.constant(vec![8], vec![0.0; 8]).unwrap();
    let y = g.layer_norm(x, ones8, zeros8, 1e-6).unwrap();
    // Two-pass statistics of the normalised output.
    let out = g.value(y);
    let mean = out.iter().sum::<f64>() / 8.0;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-5);
    assert_abs_diff_eq!(var, 1.0, epsilon = 1e-5);
    // And against a direct normalisation of the input.
    let mu = data.iter().sum::<f64>() / 8.0;
    let sd = (data.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0 + 1e-6).sqrt();
    for (o, x) in out.iter().zip(&data) {
        assert_abs_diff_eq!(*o, (x - mu) / sd, epsilon = 1e-9);
    }
}

#[test]
fn gelu_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![3], vec![0.0, 10.0, 1.0]).unwrap();
    let y = g.gelu(x);
    let v = g.value(y);
    assert_eq!(v[0], 0.0);
    assert_abs_diff_eq!(v[1], 10.0, epsilon = 1e-6);
    // Phi(1) = 0.5 * (1 + erf(1 / sqrt 2)) = 0.8413447460685429.
    assert_abs_diff_eq!(v[2], 0.841_344_746_068_542_9, epsilon = 1e-12);
}

#[test]
fn gelu_monotone_on_grid() {
    // Exact GELU has its minimum near x = -0.7518; it is nondecreasing above.
    let grid: Vec<f64> = (0..200).map(|i| -0.75 + i as f64 * 0.05).collect();
    let mut g = Graph::<f64>::new();
    let x = g.constant(vec![grid.len()], grid).unwrap();
    let y = g.gelu(x);
    assert!(g.value(y).windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn backward_square_and_constant() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);

    // Accumulates without reset.
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());

    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
    let c = g.constant(vec![3], vec![4.0; 3]).unwrap();
    let zero = g.scale(x, 0.0);
    let y = g.add(zero, c).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let x = g.variable(Tensor::zeros(vec![2]));
    assert!(matches!(
        g.backward(x),
        Err(patchformer::Error::NonScalarLoss(_))
    ));
}

#[test]
fn two_layer_mlp_gradients_match_finite_differences_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mk = |rng: &mut ChaCha8Rng, s: &[usize]| {
        Tensor::<f32>::from_fn(s.to_vec(), |_| rng.random_range(-0.5f32..0.5))
    };
    let inputs = [
        mk(&mut rng, &[5, 6]),
        mk(&mut rng, &[6, 8]),
        mk(&mut rng, &[8]),
        mk(&mut rng, &[8, 3]),
        mk(&mut rng, &[3]),
    ];
    let targets: Vec<f32> = (0..5).flat_map(|i| (0..3).map(move |k| if i % 3 == k { 1.0 } else { 0.0 })).collect();
    let report = grad_check_many(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_rows(h, v[2])?;
            let h = g.gelu(h);
            let o = g.matmul(h, v[3])?;
            let o = g.add_rows(o, v[4])?;
            g.cross_entropy_soft(o, &targets)
        },
        &inputs,
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn grad_check_linear_is_exact() {
    let x = Tensor::<f64>::from_f64(vec![4], &[0.1, -2.0, 3.5, 0.0]).unwrap();
    let err = grad_check(
        |g, v| {
            let s = g.scale(v, 2.5);
            Ok(g.sum(s))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-7, "{err}");
}

#[test]
fn grad_check_softmax_cross_entropy_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f32>::from_fn(vec![4, 5], |_| rng.random_range(-2.0f32..2.0));
    let targets: Vec<f32> = (0..20).map(|i| if i % 5 == 1 { 0.7 } else if i % 5 == 3 { 0.3 } else { 0.0 }).collect();
    let err = grad_check(|g, v| g.cross_entropy_soft(v, &targets), &x, 1e-3).unwrap();
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn grad_check_gelu_chain_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::<f32>::from_fn(vec![12], |_| rng.random_range(-3.0f32..3.0));
    let err = grad_check(
        |g, v| {
            let a = g.gelu(v);
            let b = g.scale(a, 1.7);
            let c = g.gelu(b);
            Ok(g.mean(c))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn structural_ops_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[2, 4]);
    let c = random_tensor(&mut rng, &[5, 2]);
    let report = grad_check_many(
        |g, v| {
            let rows = g.concat_rows(&[v[0], v[1]])?; // 5x4
            let cols = g.concat_cols(&[rows, v[2]])?; // 5x6
            let t = g.transpose(cols)?; // 6x5
            let sel = g.select_rows(t, &[0, 5, 5, 2])?; // 4x5
            let r = g.reshape(sel, vec![2, 10])?;
            let sq = g.mul(r, r)?;
            let d = g.sub(sq, r)?;
            Ok(g.sum(d))
        },
        &[a, b, c],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn fused_attention_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let qkv = random_tensor(&mut rng, &[2 * 3, 3 * 4]);
    let w = random_tensor(&mut rng, &[4, 2]);
    let report = grad_check_many(
        |g, v| {
            let o = g.multi_head_attention(v[0], 2, 3, 2, 1.3)?;
            let p = g.matmul(o, v[1])?;
            let q = g.mul(p, p)?;
            Ok(g.sum(q))
        },
        &[qkv, w],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-7, "{report:?}");
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = Tensor::<f32>::from_fn(vec![300, 24], |_| rng.random_range(-1.0f32..1.0));
    let w = Tensor::<f32>::from_fn(vec![24, 24], |_| rng.random_range(-1.0f32..1.0));
    let run = || {
        let mut g = Graph::new();
        let (a, b) = (g.leaf(&x), g.leaf(&w));
        let h = g.matmul(a, b).unwrap();
        let o = g.multi_head_attention(h, 100, 3, 2, 2.0).unwrap();
        g.value(o).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
