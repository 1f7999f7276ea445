//! Operation-level tests: spec'd example values plus finite-difference
//! gradient checks at f64 precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{central_diff, max_rel_err};
use super::{Graph, TensorError, TensorId};

const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

/// Analytic gradient of `build`'s loss w.r.t. its designated input, plus
/// the central-difference estimate of the same thing.
fn grad_and_fd<F>(build: F, x0: &[f64], h: f64) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(&mut Graph<f64>, Vec<f64>) -> (TensorId, TensorId),
{
    let mut g: Graph<f64> = Graph::new();
    let (xid, loss) = build(&mut g, x0.to_vec());
    g.backward(loss).unwrap();
    let analytic = g.grad(xid).expect("input gradient populated").to_vec();
    let fd = central_diff(
        |x| {
            let mut g: Graph<f64> = Graph::new();
            let (_, loss) = build(&mut g, x.to_vec());
            g.value(loss)
        },
        x0,
        h,
    );
    (analytic, fd)
}

fn assert_grad_close(analytic: &[f64], fd: &[f64], tol: f64) {
    let err = max_rel_err(analytic, fd, FLOOR);
    assert!(err <= tol, "max relative gradient error {err} > {tol}");
}

fn randv(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

// ─── conv3d ─────────────────────────────────────────────────────────────

#[test]
fn conv_all_ones_center_is_27() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(&[1, 1, 4, 4, 4], vec![1.0; 64], false).unwrap();
    let w = g.leaf(&[1, 1, 3, 3, 3], vec![1.0; 27], false).unwrap();
    let b = g.leaf(&[1], vec![0.0], false).unwrap();
    let y = g.conv3d(x, w, Some(b), 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 4, 4, 4]);
    // interior voxels see the full 3x3x3 window of ones
    for z in 1..3 {
        for yy in 1..3 {
            for xx in 1..3 {
                assert_eq!(g.data(y)[(z * 4 + yy) * 4 + xx], 27.0);
            }
        }
    }
    // a corner sees a 2x2x2 window
    assert_eq!(g.data(y)[0], 8.0);
}

#[test]
fn conv_stride2_halves_32_to_16_with_16_maps() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.leaf(&[1, 1, 32, 32, 32], vec![0.5; 32 * 32 * 32], false).unwrap();
    let w = g.leaf(&[16, 1, 3, 3, 3], vec![0.01; 16 * 27], false).unwrap();
    let y = g.conv3d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 16, 16, 16, 16]);
}

#[test]
fn conv_shape_formula_odd_dims() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.leaf(&[1, 1, 7, 5, 9], vec![0.0; 7 * 5 * 9], false).unwrap();
    let w = g.leaf(&[2, 1, 3, 3, 3], vec![0.0; 2 * 27], false).unwrap();
    let y = g.conv3d(x, w, None, 2, 1).unwrap();
    // floor((dim + 2 - 3)/2) + 1
    assert_eq!(g.shape(y), &[1, 2, 4, 3, 5]);
}

#[test]
fn conv_rejects_channel_mismatch_and_empty_output() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.leaf(&[1, 2, 4, 4, 4], vec![0.0; 128], false).unwrap();
    let w = g.leaf(&[1, 3, 3, 3, 3], vec![0.0; 81], false).unwrap();
    assert!(matches!(
        g.conv3d(x, w, None, 1, 1),
        Err(TensorError::ChannelMismatch { .. })
    ));
    let tiny = g.leaf(&[1, 1, 2, 2, 2], vec![0.0; 8], false).unwrap();
    let w5 = g.leaf(&[1, 1, 5, 5, 5], vec![0.0; 125], false).unwrap();
    assert!(matches!(
        g.conv3d(tiny, w5, None, 1, 0),
        Err(TensorError::NonPositiveExtent { .. })
    ));
    let w3 = g.leaf(&[1, 2, 3, 3, 3], vec![0.0; 54], false).unwrap();
    assert!(matches!(
        g.conv3d(x, w3, None, 3, 1),
        Err(TensorError::BadStride { stride: 3, .. })
    ));
}

#[test]
fn conv_gradcheck_input_weight_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(stride, padding, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
        let (c, ko) = (2, 2);
        let n_in = c * 5 * 5 * 5;
        let n_w = ko * c * k * k * k;
        let x0 = randv(&mut rng, n_in, -1.0, 1.0);
        let w0 = randv(&mut rng, n_w, -0.5, 0.5);
        let b0 = randv(&mut rng, ko, -0.2, 0.2);

        // gradient w.r.t. input
        let (a, f) = grad_and_fd(
            |g, xv| {
                let x = g.leaf(&[1, c, 5, 5, 5], xv, true).unwrap();
                let w = g.leaf(&[ko, c, k, k, k], w0.clone(), false).unwrap();
                let b = g.leaf(&[ko], b0.clone(), false).unwrap();
                let y = g.conv3d(x, w, Some(b), stride, padding).unwrap();
                let loss = g.mse_to_const(y, 0.3);
                (x, loss)
            },
            &x0,
            1e-4,
        );
        assert_grad_close(&a, &f, TOL);

        // gradient w.r.t. weight and bias
        let (a, f) = grad_and_fd(
            |g, wv| {
                let x = g.leaf(&[1, c, 5, 5, 5], x0.clone(), false).unwrap();
                let w = g.leaf(&[ko, c, k, k, k], wv, true).unwrap();
                let b = g.leaf(&[ko], b0.clone(), false).unwrap();
                let y = g.conv3d(x, w, Some(b), stride, padding).unwrap();
                let loss = g.mse_to_const(y, -0.1);
                (w, loss)
            },
            &w0,
            1e-4,
        );
        assert_grad_close(&a, &f, TOL);

        let (a, f) = grad_and_fd(
            |g, bv| {
                let x = g.leaf(&[1, c, 5, 5, 5], x0.clone(), false).unwrap();
                let w = g.leaf(&[ko, c, k, k, k], w0.clone(), false).unwrap();
                let b = g.leaf(&[ko], bv, true).unwrap();
                let y = g.conv3d(x, w, Some(b), stride, padding).unwrap();
                let loss = g.mse_to_const(y, 0.0);
                (b, loss)
            },
            &b0,
            1e-4,
        );
        assert_grad_close(&a, &f, TOL);
    }
}

// ─── batch norm ─────────────────────────────────────────────────────────

#[test]
fn bn_constant_channel_normalizes_to_zero() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.leaf(&[1, 2, 2, 2, 2], vec![5.0; 16], false).unwrap();
    let gamma = g.leaf(&[2], vec![1.0, 1.0], false).unwrap();
    let beta = g.leaf(&[2], vec![0.0, 0.0], false).unwrap();
    let (y, mean, _var) = g.batchnorm3d_train(x, gamma, beta, 1e-5).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));
    assert_eq!(mean, vec![5.0, 5.0]);
}

#[test]
fn bn_zero_affine_collapses_output() {
    let mut g: Graph<f32> = Graph::new();
    let x = g
        .leaf(&[1, 1, 2, 2, 2], (0..8).map(|i| i as f32).collect(), false)
        .unwrap();
    let gamma = g.leaf(&[1], vec![0.0], false).unwrap();
    let beta = g.leaf(&[1], vec![0.0], false).unwrap();
    let (y, _, _) = g.batchnorm3d_train(x, gamma, beta, 1e-5).unwrap();
    assert!(g.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn bn_eval_with_fresh_stats_is_identity_affine() {
    // mean 0, var 1 running stats: y = gamma * x / sqrt(1+eps) + beta
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(&[1, 1, 1, 1, 3], vec![1.0, -2.0, 0.5], false).unwrap();
    let gamma = g.leaf(&[1], vec![2.0], false).unwrap();
    let beta = g.leaf(&[1], vec![0.25], false).unwrap();
    let y = g
        .batchnorm3d_eval(x, gamma, beta, 1e-5, &[0.0], &[1.0])
        .unwrap();
    let inv = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (o, v) in g.data(y).iter().zip([1.0, -2.0, 0.5]) {
        assert!((o - (2.0 * v * inv + 0.25)).abs() < 1e-12);
    }
}

#[test]
fn bn_rejects_single_value_per_channel() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.leaf(&[1, 2, 1, 1, 1], vec![1.0, 2.0], false).unwrap();
    let gamma = g.leaf(&[2], vec![1.0; 2], false).unwrap();
    let beta = g.leaf(&[2], vec![0.0; 2], false).unwrap();
    assert!(matches!(
        g.batchnorm3d_train(x, gamma, beta, 1e-5),
        Err(TensorError::BatchTooSmall { per_channel: 1 })
    ));
}

#[test]
fn bn_gradcheck_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (c, sp) = (2usize, 3usize);
    let n_in = 2 * c * sp * sp * sp;
    let x0 = randv(&mut rng, n_in, -1.0, 1.0);
    let g0 = randv(&mut rng, c, 0.5, 1.5);
    let b0 = randv(&mut rng, c, -0.5, 0.5);

    for train in [true, false] {
        let build = |g: &mut Graph<f64>, xv: Vec<f64>| {
            let x = g.leaf(&[2, c, sp, sp, sp], xv, true).unwrap();
            let gamma = g.leaf(&[c], g0.clone(), false).unwrap();
            let beta = g.leaf(&[c], b0.clone(), false).unwrap();
            let y = if train {
                g.batchnorm3d_train(x, gamma, beta, 1e-5).unwrap().0
            } else {
                g.batchnorm3d_eval(x, gamma, beta, 1e-5, &[0.1, -0.2], &[0.9, 1.4])
                    .unwrap()
            };
            let loss = g.mse_to_const(y, 0.2);
            (x, loss)
        };
        let (a, f) = grad_and_fd(build, &x0, 1e-5);
        assert_grad_close(&a, &f, TOL);
    }

    // affine parameters, train mode
    let (a, f) = grad_and_fd(
        |g, gv| {
            let x = g.leaf(&[2, c, sp, sp, sp], x0.clone(), false).unwrap();
            let gamma = g.leaf(&[c], gv, true).unwrap();
            let beta = g.leaf(&[c], b0.clone(), false).unwrap();
            let (y, _, _) = g.batchnorm3d_train(x, gamma, beta, 1e-5).unwrap();
            let loss = g.mse_to_const(y, 0.2);
            (gamma, loss)
        },
        &g0,
        1e-5,
    );
    assert_grad_close(&a, &f, TOL);
}

// ─── elementwise, broadcast, shapes ─────────────────────────────────────

#[test]
fn add_broadcasts_single_channel_like_explicit_replication() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let xs = randv(&mut rng, 16 * 64, -1.0, 1.0);
    let zs = randv(&mut rng, 64, -1.0, 1.0);
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(&[1, 16, 4, 4, 4], xs.clone(), false).unwrap();
    let z = g.leaf(&[1, 1, 4, 4, 4], zs.clone(), false).unwrap();
    let sum = g.add(x, z).unwrap();
    assert_eq!(g.shape(sum), &[1, 16, 4, 4, 4]);
    // explicit replication oracle
    for c in 0..16 {
        for i in 0..64 {
            let expect = xs[c * 64 + i] + zs[i];
            assert_eq!(g.data(sum)[c * 64 + i], expect);
        }
    }
    // product too
    let prod = g.mul(z, x).unwrap();
    for c in 0..16 {
        for i in 0..64 {
            assert_eq!(g.data(prod)[c * 64 + i], xs[c * 64 + i] * zs[i]);
        }
    }
}

#[test]
fn broadcast_never_applies_to_spatial_axes() {
    let mut g: Graph<f32> = Graph::new();
    let a = g.leaf(&[1, 2, 4, 4, 4], vec![0.0; 128], false).unwrap();
    let b = g.leaf(&[1, 2, 2, 4, 4], vec![0.0; 64], false).unwrap();
    assert!(matches!(
        g.add(a, b),
        Err(TensorError::ShapeMismatch { .. })
    ));
    let c = g.leaf(&[1, 1, 2, 4, 4], vec![0.0; 32], false).unwrap();
    assert!(g.mul(a, c).is_err());
}

#[test]
fn elementwise_gradchecks_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let full0 = randv(&mut rng, 3 * 8, -1.0, 1.0);
    let single0 = randv(&mut rng, 8, -1.0, 1.0);

    for is_add in [true, false] {
        // gradient w.r.t. the broadcast (single-channel) operand
        let (a, f) = grad_and_fd(
            |g, sv| {
                let full = g.leaf(&[1, 3, 2, 2, 2], full0.clone(), true).unwrap();
                let single = g.leaf(&[1, 1, 2, 2, 2], sv, true).unwrap();
                let y = if is_add {
                    g.add(full, single).unwrap()
                } else {
                    g.mul(full, single).unwrap()
                };
                let loss = g.mse_to_const(y, 0.1);
                (single, loss)
            },
            &single0,
            1e-5,
        );
        assert_grad_close(&a, &f, TOL);

        // gradient w.r.t. the full operand
        let (a, f) = grad_and_fd(
            |g, fv| {
                let full = g.leaf(&[1, 3, 2, 2, 2], fv, true).unwrap();
                let single = g.leaf(&[1, 1, 2, 2, 2], single0.clone(), false).unwrap();
                let y = if is_add {
                    g.add(single, full).unwrap()
                } else {
                    g.mul(single, full).unwrap()
                };
                let loss = g.mse_to_const(y, -0.3);
                (full, loss)
            },
            &full0,
            1e-5,
        );
        assert_grad_close(&a, &f, TOL);
    }
}

#[test]
fn relu_sigmoid_scale_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    // keep relu inputs away from the kink
    let x0: Vec<f64> = (0..24)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let (a, f) = grad_and_fd(
        |g, xv| {
            let x = g.leaf(&[1, 2, 2, 2, 3], xv, true).unwrap();
            let y = g.relu(x);
            let loss = g.mse_to_const(y, 0.4);
            (x, loss)
        },
        &x0,
        1e-5,
    );
    assert_grad_close(&a, &f, TOL);

    let (a, f) = grad_and_fd(
        |g, xv| {
            let x = g.leaf(&[1, 2, 2, 2, 3], xv, true).unwrap();
            let y = g.sigmoid(x);
            let loss = g.mse_to_const(y, 0.5);
            (x, loss)
        },
        &x0,
        1e-5,
    );
    assert_grad_close(&a, &f, TOL);

    let (a, f) = grad_and_fd(
        |g, xv| {
            let x = g.leaf(&[1, 2, 2, 2, 3], xv, true).unwrap();
            let y = g.scale(x, -1.7);
            let loss = g.mse_to_const(y, 0.0);
            (x, loss)
        },
        &x0,
        1e-5,
    );
    assert_grad_close(&a, &f, TOL);
}

#[test]
fn concat_and_upsample_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let a0 = randv(&mut rng, 2 * 8, -1.0, 1.0);
    let b0 = randv(&mut rng, 3 * 8, -1.0, 1.0);
    let (a, f) = grad_and_fd(
        |g, av| {
            let x = g.leaf(&[1, 2, 2, 2, 2], av, true).unwrap();
            let y = g.leaf(&[1, 3, 2, 2, 2], b0.clone(), false).unwrap();
            let cat = g.concat_channels(x, y).unwrap();
            let loss = g.mse_to_const(cat, 0.2);
            (x, loss)
        },
        &a0,
        1e-5,
    );
    assert_grad_close(&a, &f, TOL);

    let (an, f) = grad_and_fd(
        |g, av| {
            let x = g.leaf(&[1, 2, 2, 2, 2], av, true).unwrap();
            let y = g.upsample2x(x).unwrap();
            let loss = g.mse_to_const(y, -0.1);
            (x, loss)
        },
        &a0,
        1e-5,
    );
    assert_grad_close(&an, &f, TOL);

    // concat layout
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(&[1, 2, 2, 2, 2], a0.clone(), false).unwrap();
    let y = g.leaf(&[1, 3, 2, 2, 2], b0.clone(), false).unwrap();
    let cat = g.concat_channels(x, y).unwrap();
    assert_eq!(g.shape(cat), &[1, 5, 2, 2, 2]);
    assert_eq!(&g.data(cat)[..16], &a0[..]);
    assert_eq!(&g.data(cat)[16..], &b0[..]);
}

#[test]
fn upsample_repeats_nearest_neighbour() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.leaf(&[1, 1, 1, 1, 2], vec![3.0, 7.0], false).unwrap();
    let y = g.upsample2x(x).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2, 4]);
    assert_eq!(g.data(y), &[3.0, 3.0, 7.0, 7.0].repeat(4)[..]);
}

// ─── pooling, linear, softmax ───────────────────────────────────────────

#[test]
fn gap_of_constant_volume_is_constant_per_channel() {
    let mut g: Graph<f32> = Graph::new();
    let mut data = vec![0.25f32; 27];
    data.extend(vec![0.75f32; 27]);
    let x = g.leaf(&[1, 2, 3, 3, 3], data, false).unwrap();
    let y = g.global_avg_pool3d(x).unwrap();
    assert_eq!(g.shape(y), &[1, 2]);
    assert!((g.data(y)[0] - 0.25).abs() < 1e-6);
    assert!((g.data(y)[1] - 0.75).abs() < 1e-6);
}

#[test]
fn gap_linear_softmax_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let x0 = randv(&mut rng, 2 * 8, -1.0, 1.0);
    let (a, f) = grad_and_fd(
        |g, xv| {
            let x = g.leaf(&[1, 2, 2, 2, 2], xv, true).unwrap();
            let y = g.global_avg_pool3d(x).unwrap();
            let loss = g.mse_to_const(y, 0.1);
            (x, loss)
        },
        &x0,
        1e-5,
    );
    assert_grad_close(&a, &f, TOL);

    let w0 = randv(&mut rng, 3 * 4, -0.7, 0.7);
    let xi = randv(&mut rng, 2 * 4, -1.0, 1.0);
    let b0 = randv(&mut rng, 3, -0.2, 0.2);
    for target in ["x", "w", "b"] {
        let (a, f) = grad_and_fd(
            |g, v| {
                let (xv, wv, bv) = match target {
                    "x" => (v.clone(), w0.clone(), b0.clone()),
                    "w" => (xi.clone(), v.clone(), b0.clone()),
                    _ => (xi.clone(), w0.clone(), v.clone()),
                };
                let x = g.leaf(&[2, 4], xv, target == "x").unwrap();
                let w = g.leaf(&[3, 4], wv, target == "w").unwrap();
                let b = g.leaf(&[3], bv, target == "b").unwrap();
                let y = g.linear(x, w, Some(b)).unwrap();
                let s = g.softmax(y).unwrap();
                let loss = g.mse_to_const(s, 0.3);
                let id = match target {
                    "x" => x,
                    "w" => w,
                    _ => b,
                };
                (id, loss)
            },
            match target {
                "x" => &xi,
                "w" => &w0,
                _ => &b0,
            },
            1e-5,
        );
        assert_grad_close(&a, &f, TOL);
    }
}

#[test]
fn softmax_of_zeros_is_uniform_and_rows_sum_to_one() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.leaf(&[1, 2], vec![0.0, 0.0], false).unwrap();
    let y = g.softmax(x).unwrap();
    assert_eq!(g.data(y), &[0.5, 0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let xr = randv(&mut rng, 6 * 4, -30.0, 30.0);
    let x = g.leaf(&[6, 4], xr, false).unwrap();
    let y = g.softmax(x).unwrap();
    for row in g.data(y).chunks(4) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

// ─── losses ─────────────────────────────────────────────────────────────

#[test]
fn wce_confident_correct_is_near_zero() {
    let mut g: Graph<f64> = Graph::new();
    let logits = g.leaf(&[1, 2], vec![50.0, 0.0], false).unwrap();
    let loss = g
        .weighted_cross_entropy(logits, &[0], &[1.0, 3.0])
        .unwrap();
    assert!(g.value(loss) < 1e-12);
}

#[test]
fn wce_uniform_prediction_is_ln2() {
    let mut g: Graph<f64> = Graph::new();
    let logits = g.leaf(&[1, 2], vec![0.0, 0.0], false).unwrap();
    let loss = g
        .weighted_cross_entropy(logits, &[0], &[1.0, 1.0])
        .unwrap();
    assert!((g.value(loss) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn wce_weight_normalization_keeps_ln2_for_uniform_logits() {
    // weights [1,3], one sample per class, both uniform: the weighted mean
    // of two ln2 terms is still ln2.
    let mut g: Graph<f64> = Graph::new();
    let logits = g.leaf(&[2, 2], vec![0.0, 0.0, 0.0, 0.0], false).unwrap();
    let loss = g
        .weighted_cross_entropy(logits, &[0, 1], &[1.0, 3.0])
        .unwrap();
    assert!((g.value(loss) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn wce_rejects_bad_arguments() {
    let mut g: Graph<f64> = Graph::new();
    let logits = g.leaf(&[1, 2], vec![0.0, 0.0], false).unwrap();
    assert!(g.weighted_cross_entropy(logits, &[2], &[1.0, 1.0]).is_err());
    assert!(g.weighted_cross_entropy(logits, &[0], &[1.0]).is_err());
    assert!(g
        .weighted_cross_entropy(logits, &[0], &[1.0, 0.0])
        .is_err());
    assert!(g.weighted_cross_entropy(logits, &[0, 1], &[1.0, 1.0]).is_err());
}

#[test]
fn loss_gradchecks() {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let x0 = randv(&mut rng, 4 * 3, -2.0, 2.0);
    let (a, f) = grad_and_fd(
        |g, xv| {
            let x = g.leaf(&[4, 3], xv, true).unwrap();
            let loss = g
                .weighted_cross_entropy(x, &[0, 2, 1, 0], &[1.0, 2.5, 0.7])
                .unwrap();
            (x, loss)
        },
        &x0,
        1e-5,
    );
    assert_grad_close(&a, &f, TOL);

    // L1 against a fixed target; keep differences away from zero.
    let t0 = randv(&mut rng, 12, 2.0, 3.0);
    let (a, f) = grad_and_fd(
        |g, xv| {
            let x = g.leaf(&[12], xv, true).unwrap();
            let t = g.leaf(&[12], t0.clone(), false).unwrap();
            let loss = g.l1_loss(x, t).unwrap();
            (x, loss)
        },
        &x0,
        1e-5,
    );
    assert_grad_close(&a, &f, TOL);

    let (a, f) = grad_and_fd(
        |g, xv| {
            let x = g.leaf(&[12], xv, true).unwrap();
            let loss = g.mse_to_const(x, 0.7);
            (x, loss)
        },
        &x0,
        1e-5,
    );
    assert_grad_close(&a, &f, TOL);
}

// ─── determinism ────────────────────────────────────────────────────────

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let x0: Vec<f32> = (0..2 * 3 * 6 * 6 * 6)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let w0: Vec<f32> = (0..4 * 3 * 27).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let run = || {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(&[2, 3, 6, 6, 6], x0.clone(), true).unwrap();
        let w = g.leaf(&[4, 3, 3, 3, 3], w0.clone(), true).unwrap();
        let y = g.conv3d(x, w, None, 1, 1).unwrap();
        let r = g.relu(y);
        let loss = g.mse_to_const(r, 0.2);
        g.backward(loss).unwrap();
        (
            g.data(y).to_vec(),
            g.grad(x).unwrap().to_vec(),
            g.grad(w).unwrap().to_vec(),
        )
    };
    let (y1, gx1, gw1) = run();
    let (y2, gx2, gw2) = run();
    assert_eq!(y1, y2);
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}
