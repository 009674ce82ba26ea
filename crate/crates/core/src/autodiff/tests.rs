use proptest::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{fd_gradient, max_relative_error};
use super::*;

fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn conv_identity_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![1, 1, 4, 4], rand_vec(16, &mut rng)).unwrap();

    // 1x1 kernel of value 1, zero bias.
    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(x.clone());
    let w = g.constant(Tensor::ones(vec![1, 1, 1, 1]));
    let b = g.constant(Tensor::zeros(vec![1]));
    let y = g.conv2d(xi, w, b, Pad::Same).unwrap();
    assert_eq!(g.value(y), &x);

    // 3x3 centered delta.
    let mut delta = Tensor::zeros(vec![1, 1, 3, 3]);
    delta.data_mut()[4] = 1.0;
    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(x.clone());
    let w = g.constant(delta);
    let b = g.constant(Tensor::zeros(vec![1]));
    let y = g.conv2d(xi, w, b, Pad::Same).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn conv_all_ones_on_single_pixel() {
    // Only the center tap overlaps a 1x1 input under zero padding.
    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(Tensor::ones(vec![1, 1, 1, 1]));
    let w = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let b = g.constant(Tensor::zeros(vec![1]));
    let y = g.conv2d(xi, w, b, Pad::Same).unwrap();
    assert_eq!(g.value(y).data(), &[1.0]);
}

#[test]
fn conv_channel_mismatch_is_error() {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(vec![1]));
    assert!(g.conv2d(xi, w, b, Pad::Same).is_err());
}

#[test]
fn batchnorm_train_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, c, h, w) = (4, 3, 2, 2);
    let x = Tensor::new(vec![n, c, h, w], rand_vec(n * c * h * w, &mut rng)).unwrap();
    let mut g = Graph::new(Mode::Train);
    let xi = g.constant(x);
    let gamma = g.constant(Tensor::ones(vec![c]));
    let beta = g.constant(Tensor::zeros(vec![c]));
    let y = g
        .batchnorm(xi, gamma, beta, &[0.0; 3], &[1.0; 3], 1e-5, "bn")
        .unwrap();
    let yv = g.value(y).data();
    for ch in 0..c {
        let mut mean = 0.0;
        let mut var = 0.0;
        let m = (n * h * w) as f64;
        for b in 0..n {
            for s in 0..h * w {
                mean += yv[(b * c + ch) * h * w + s];
            }
        }
        mean /= m;
        for b in 0..n {
            for s in 0..h * w {
                let d = yv[(b * c + ch) * h * w + s] - mean;
                var += d * d;
            }
        }
        var /= m;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3); // eps shifts variance slightly below 1
    }
    assert_eq!(g.take_bn_updates().len(), 1);
}

#[test]
fn batchnorm_constant_channel_floors_to_zero() {
    let mut g = Graph::new(Mode::Train);
    let xi = g.constant(Tensor::new(vec![2, 1, 1, 1], vec![3.5, 3.5]).unwrap());
    let gamma = g.constant(Tensor::ones(vec![1]));
    let beta = g.constant(Tensor::zeros(vec![1]));
    let y = g
        .batchnorm(xi, gamma, beta, &[0.0], &[1.0], 1e-5, "bn")
        .unwrap();
    for v in g.value(y).data() {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn batchnorm_eval_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(vec![2, 2, 2, 2], rand_vec(16, &mut rng)).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(x.clone());
    let gamma = g.constant(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap());
    let beta = g.constant(Tensor::new(vec![2], vec![0.5, 1.5]).unwrap());
    let eps = 1e-5;
    let y = g
        .batchnorm(xi, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], eps, "bn")
        .unwrap();
    let scale = 1.0 / (1.0f64 + eps).sqrt();
    for b in 0..2 {
        for c in 0..2 {
            for s in 0..4 {
                let i = (b * 2 + c) * 4 + s;
                let expected = [2.0, -1.0][c] * x.data()[i] * scale + [0.5, 1.5][c];
                assert!((g.value(y).data()[i] - expected).abs() < 1e-12);
            }
        }
    }
    assert!(g.take_bn_updates().is_empty());
}

#[test]
fn leaky_relu_values() {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(Tensor::new(vec![1, 3], vec![-1.0, 2.0, 0.0]).unwrap());
    let y = g.leaky_relu(xi, 0.01);
    assert_eq!(g.value(y).data(), &[-0.01, 2.0, 0.0]);
    let z = g.leaky_relu(xi, 1.0);
    assert_eq!(g.value(z).data(), g.value(xi).data());
}

#[test]
fn maxpool_values_and_shape_checks() {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2x2(xi).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let c = g.constant(Tensor::new(vec![1, 1, 4, 4], vec![0.3; 16]).unwrap());
    let yc = g.maxpool2x2(c).unwrap();
    assert_eq!(g.value(yc).shape(), &[1, 1, 2, 2]);
    assert!(g.value(yc).data().iter().all(|&v| v == 0.3));

    let odd = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
    assert!(g.maxpool2x2(odd).is_err());
}

#[test]
fn dense_values() {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap());
    let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let zero_b = g.constant(Tensor::zeros(vec![2]));
    let y = g.dense(xi, eye, zero_b).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, -2.0]);

    let zero_w = g.constant(Tensor::zeros(vec![2, 2]));
    let bias = g.constant(Tensor::new(vec![2], vec![0.25, -0.5]).unwrap());
    let yb = g.dense(xi, zero_w, bias).unwrap();
    assert_eq!(g.value(yb).data(), &[0.25, -0.5]);

    let x1 = g.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
    let w1 = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let b1 = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
    let y1 = g.dense(x1, w1, b1).unwrap();
    assert_eq!(g.value(y1).data(), &[7.0]);
}

#[test]
fn softmax_values() {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let y = g.softmax(xi).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let logs = g.constant(Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]).unwrap());
    let yl = g.softmax(logs).unwrap();
    assert!((g.value(yl).data()[0] - 0.25).abs() < 1e-12);
    assert!((g.value(yl).data()[1] - 0.75).abs() < 1e-12);

    // Shift invariance.
    let shifted = g.constant(Tensor::new(vec![1, 2], vec![10.0, 10.0 + 3.0f64.ln()]).unwrap());
    let ys = g.softmax(shifted).unwrap();
    for (a, b) in g.value(ys).data().iter().zip(g.value(yl).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn backward_of_sum_and_l2() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::new(vec![2, 3], rand_vec(6, &mut rng)).unwrap();

    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(x.clone());
    let loss = g.sum(xi);
    g.backward(loss).unwrap();
    assert!(g.grad_of(xi).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(x.clone());
    let loss = g.l2_half(xi);
    g.backward(loss).unwrap();
    for (a, b) in g.grad_of(xi).unwrap().data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new(Mode::Eval);
    let xi = g.constant(Tensor::zeros(vec![2, 2]));
    assert!(g.backward(xi).is_err());
}

#[test]
fn backward_visits_each_node_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new(Mode::Train);
    let xi = g.constant(Tensor::new(vec![1, 1, 4, 4], rand_vec(16, &mut rng)).unwrap());
    let w = g.constant(Tensor::new(vec![2, 1, 3, 3], rand_vec(18, &mut rng)).unwrap());
    let b = g.constant(Tensor::new(vec![2], rand_vec(2, &mut rng)).unwrap());
    let conv = g.conv2d(xi, w, b, Pad::Same).unwrap();
    let act = g.leaky_relu(conv, 0.01);
    let pooled = g.maxpool2x2(act).unwrap();
    let flat = g.reshape(pooled, vec![1, 8]).unwrap();
    let target = g.constant(Tensor::new(vec![1, 8], rand_vec(8, &mut rng)).unwrap());
    let loss = g.mse_loss(flat, target).unwrap();
    g.backward(loss).unwrap();
    let visits = g.backward_visits();
    assert!(visits.iter().all(|&v| v <= 1));
    // Every node participates in this chain.
    assert!(visits.iter().all(|&v| v == 1));
}

#[test]
fn cross_entropy_hand_values() {
    // Prediction equal to the target: loss is the target entropy.
    let t: Vec<f64> = vec![0.1, 0.2, 0.3, 0.4];
    let logits: Vec<f64> = t.iter().map(|p| f64::ln(*p)).collect();
    let mut g = Graph::new(Mode::Eval);
    let zi = g.constant(Tensor::new(vec![1, 4], logits).unwrap());
    let ti = g.constant(Tensor::new(vec![1, 4], t.clone()).unwrap());
    let loss = g.cross_entropy_with_logits(zi, ti).unwrap();
    let entropy: f64 = -t.iter().map(|p| p * p.ln()).sum::<f64>();
    assert!((g.value(loss).item().unwrap() - entropy).abs() < 1e-12);

    // One-hot target with prediction mass 0.5 on that line: loss = ln 2.
    let mut g = Graph::new(Mode::Eval);
    let zi = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let ti = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let loss = g.cross_entropy_with_logits(zi, ti).unwrap();
    assert!((g.value(loss).item().unwrap() - 2.0f64.ln()).abs() < 1e-12);
}

/// Finite-difference check of one op: perturb a flat buffer that feeds the
/// first `parts` constants of the graph, with an MSE head against a fixed
/// target as the scalar projection.
fn fd_check<F>(len: usize, parts: usize, seed: u64, build: F, tolerance: f64)
where
    F: Fn(&mut Graph, &[f64]) -> NodeId,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = rand_vec(len, &mut rng);

    let eval = |x: &[f64]| -> f64 {
        let mut g = Graph::new(Mode::Train);
        let loss = build(&mut g, x);
        g.value(loss).item().unwrap()
    };
    let fd = fd_gradient(&x0, 1e-5, eval);

    let mut g = Graph::new(Mode::Train);
    let loss = build(&mut g, &x0);
    g.backward(loss).unwrap();
    let mut analytic = Vec::with_capacity(len);
    for id in 0..parts {
        analytic.extend_from_slice(g.grad_of(id).expect("input reached by backward").data());
    }
    let err = max_relative_error(&analytic, &fd, 1e-3);
    assert!(err <= tolerance, "max relative error {err}");
}

#[test]
fn fd_conv2d_same_and_none() {
    for pad in [Pad::Same, Pad::None] {
        // Buffer layout: x(1,2,4,4)=32 | w(3,2,3,3)=54 | b(3)=3
        fd_check(
            32 + 54 + 3,
            3,
            10,
            move |g, buf| {
                let x = g.constant(Tensor::new(vec![1, 2, 4, 4], buf[..32].to_vec()).unwrap());
                let w =
                    g.constant(Tensor::new(vec![3, 2, 3, 3], buf[32..86].to_vec()).unwrap());
                let b = g.constant(Tensor::new(vec![3], buf[86..].to_vec()).unwrap());
                let y = g.conv2d(x, w, b, pad).unwrap();
                let n = g.value(y).numel();
                let target = g.constant(Tensor::new(
                    g.value(y).shape().to_vec(),
                    (0..n).map(|i| (i as f64 * 0.37).sin()).collect(),
                )
                .unwrap());
                g.mse_loss(y, target).unwrap()
            },
            1e-6,
        );
    }
}

#[test]
fn fd_conv2d_weight_and_bias() {
    // Same graph, but check gradients w.r.t. weight and bias nodes too.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let buf = rand_vec(32 + 54 + 3, &mut rng);
    let build = |g: &mut Graph, b: &[f64]| {
        let x = g.constant(Tensor::new(vec![1, 2, 4, 4], b[..32].to_vec()).unwrap());
        let w = g.constant(Tensor::new(vec![3, 2, 3, 3], b[32..86].to_vec()).unwrap());
        let bias = g.constant(Tensor::new(vec![3], b[86..].to_vec()).unwrap());
        let y = g.conv2d(x, w, bias, Pad::Same).unwrap();
        let target = g.constant(Tensor::new(
            vec![1, 3, 4, 4],
            (0..48).map(|i| (i as f64 * 0.11).cos()).collect(),
        )
        .unwrap());
        (g.mse_loss(y, target).unwrap(), w, bias)
    };
    let eval = |x: &[f64]| {
        let mut g = Graph::new(Mode::Eval);
        let (loss, _, _) = build(&mut g, x);
        g.value(loss).item().unwrap()
    };
    let fd = fd_gradient(&buf, 1e-5, eval);
    let mut g = Graph::new(Mode::Eval);
    let (loss, w, bias) = build(&mut g, &buf);
    g.backward(loss).unwrap();
    let dw = g.grad_of(w).unwrap().data();
    let db = g.grad_of(bias).unwrap().data();
    assert!(max_relative_error(dw, &fd[32..86], 1e-3) <= 1e-6);
    assert!(max_relative_error(db, &fd[86..], 1e-3) <= 1e-6);
}

#[test]
fn fd_batchnorm_train_and_eval() {
    // Buffer: x(3,2,2,2)=24 | gamma(2) | beta(2)
    for mode in [Mode::Train, Mode::Eval] {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let buf = rand_vec(28, &mut rng);
        let build = |g: &mut Graph, b: &[f64]| {
            let x = g.constant(Tensor::new(vec![3, 2, 2, 2], b[..24].to_vec()).unwrap());
            let gamma = g.constant(Tensor::new(vec![2], b[24..26].to_vec()).unwrap());
            let beta = g.constant(Tensor::new(vec![2], b[26..].to_vec()).unwrap());
            let y = g
                .batchnorm(x, gamma, beta, &[0.1, -0.2], &[0.9, 1.3], 1e-5, "bn")
                .unwrap();
            let target = g.constant(Tensor::new(
                vec![3, 2, 2, 2],
                (0..24).map(|i| (i as f64 * 0.21).sin()).collect(),
            )
            .unwrap());
            (g.mse_loss(y, target).unwrap(), x, gamma, beta)
        };
        let eval = |x: &[f64]| {
            let mut g = Graph::new(mode);
            let (loss, _, _, _) = build(&mut g, x);
            g.value(loss).item().unwrap()
        };
        let fd = fd_gradient(&buf, 1e-5, eval);
        let mut g = Graph::new(mode);
        let (loss, x, gamma, beta) = build(&mut g, &buf);
        g.backward(loss).unwrap();
        let mut analytic = g.grad_of(x).unwrap().data().to_vec();
        analytic.extend_from_slice(g.grad_of(gamma).unwrap().data());
        analytic.extend_from_slice(g.grad_of(beta).unwrap().data());
        let err = max_relative_error(&analytic, &fd, 1e-3);
        assert!(err <= 1e-6, "mode {mode:?}: max relative error {err}");
    }
}

#[test]
fn fd_leaky_relu_dense_softmax_chain() {
    // Buffer: x(2,6)=12 | w(4,6)=24 | b(4)=4
    fd_check(
        40,
        3,
        13,
        |g, buf| {
            let x = g.constant(Tensor::new(vec![2, 6], buf[..12].to_vec()).unwrap());
            let w = g.constant(Tensor::new(vec![4, 6], buf[12..36].to_vec()).unwrap());
            let b = g.constant(Tensor::new(vec![4], buf[36..].to_vec()).unwrap());
            let a = g.leaky_relu(x, 0.01);
            let d = g.dense(a, w, b).unwrap();
            let s = g.softmax(d).unwrap();
            let target = g.constant(Tensor::new(
                vec![2, 4],
                vec![0.4, 0.3, 0.2, 0.1, 0.25, 0.25, 0.25, 0.25],
            )
            .unwrap());
            g.mse_loss(s, target).unwrap()
        },
        1e-6,
    );
}

#[test]
fn fd_maxpool_routes_to_argmax() {
    fd_check(
        16,
        1,
        14,
        |g, buf| {
            let x = g.constant(Tensor::new(vec![1, 1, 4, 4], buf.to_vec()).unwrap());
            let y = g.maxpool2x2(x).unwrap();
            let target = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.2, -0.1, 0.4, 0.9]).unwrap());
            g.mse_loss(y, target).unwrap()
        },
        1e-6,
    );
}

#[test]
fn fd_cross_entropy_with_logits() {
    // Buffer: logits(2,5)=10 | target rows normalized separately below.
    fd_check(
        10,
        1,
        15,
        |g, buf| {
            let z = g.constant(Tensor::new(vec![2, 5], buf.to_vec()).unwrap());
            let t = g.constant(Tensor::new(
                vec![2, 5],
                vec![0.1, 0.2, 0.3, 0.25, 0.15, 0.5, 0.1, 0.1, 0.1, 0.2],
            )
            .unwrap());
            g.cross_entropy_with_logits(z, t).unwrap()
        },
        1e-6,
    );
}

#[test]
fn fd_residual_composite() {
    // conv -> bn -> lrelu -> add skip -> mse, all in one chain.
    fd_check(
        16 + 9 + 1,
        3,
        16,
        |g, buf| {
            let x = g.constant(Tensor::new(vec![1, 1, 4, 4], buf[..16].to_vec()).unwrap());
            let w = g.constant(Tensor::new(vec![1, 1, 3, 3], buf[16..25].to_vec()).unwrap());
            let b = g.constant(Tensor::new(vec![1], buf[25..].to_vec()).unwrap());
            let gamma = g.constant(Tensor::ones(vec![1]));
            let beta = g.constant(Tensor::zeros(vec![1]));
            let conv = g.conv2d(x, w, b, Pad::Same).unwrap();
            let bn = g
                .batchnorm(conv, gamma, beta, &[0.0], &[1.0], 1e-5, "bn")
                .unwrap();
            let act = g.leaky_relu(bn, 0.01);
            let res = g.add(x, act).unwrap();
            let target = g.constant(Tensor::new(
                vec![1, 1, 4, 4],
                (0..16).map(|i| (i as f64 * 0.5).sin()).collect(),
            )
            .unwrap());
            g.mse_loss(res, target).unwrap()
        },
        1e-6,
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_positive(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut g = Graph::new(Mode::Eval);
        let xi = g.constant(Tensor::new(vec![3, 4], logits).unwrap());
        let y = g.softmax(xi).unwrap();
        for row in g.value(y).data().chunks(4) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn cross_entropy_bounded_below_by_entropy(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let target: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let entropy: f64 = -target.iter().map(|p| p * p.ln()).sum::<f64>();

        let mut g = Graph::new(Mode::Eval);
        let zi = g.constant(Tensor::new(vec![1, 6], logits).unwrap());
        let ti = g.constant(Tensor::new(vec![1, 6], target.clone()).unwrap());
        let loss = g.cross_entropy_with_logits(zi, ti).unwrap();
        prop_assert!(g.value(loss).item().unwrap() >= entropy - 1e-9);

        // Equality iff the prediction matches the target.
        let mut g = Graph::new(Mode::Eval);
        let match_logits: Vec<f64> = target.iter().map(|p| p.ln()).collect();
        let zi = g.constant(Tensor::new(vec![1, 6], match_logits).unwrap());
        let ti = g.constant(Tensor::new(vec![1, 6], target).unwrap());
        let loss = g.cross_entropy_with_logits(zi, ti).unwrap();
        prop_assert!((g.value(loss).item().unwrap() - entropy).abs() < 1e-9);
    }
}
