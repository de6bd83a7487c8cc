//! Engine invariants: gradient exactness, BatchNorm normalization, purity of
//! eval-mode forwards, and the upsample/pool and reshape identities.

use mfcl_core::check::{self, randn};
use mfcl_core::layers::{BatchNorm, Layer, Mode};
use mfcl_core::net::{backward, forward, forward_update};
use mfcl_core::rng::stream;
use mfcl_core::tensor::Tensor;
use proptest::prelude::*;

#[test]
fn every_layer_kind_matches_finite_differences() {
    let seeds: Vec<u64> = (0..20).collect();
    for case in check::layer_gradient_suite(&seeds).unwrap() {
        assert!(
            case.max_rel_error < 1e-4,
            "{}: relative error {}",
            case.name,
            case.max_rel_error
        );
    }
}

fn plain_batchnorm(channels: usize) -> Layer<f64> {
    Layer::BatchNorm(BatchNorm {
        gamma: Tensor::full(&[channels], 1.0),
        beta: Tensor::zeros(&[channels]),
        running_mean: Tensor::zeros(&[channels]),
        running_var: Tensor::full(&[channels], 1.0),
        momentum: 0.1,
        eps: 1e-5,
    })
}

#[test]
fn batchnorm_normalizes_hand_built_batch() {
    // 4-sample single-channel batch with mean 5, biased variance 4.
    let net = vec![plain_batchnorm(1)];
    let x = Tensor::new(vec![4, 1], vec![3.0, 3.0, 7.0, 7.0]).unwrap();
    let (y, trace) = forward(&net, &x, Mode::Train).unwrap();

    let stats = trace.measured_bn_stats();
    assert_eq!(stats.len(), 1);
    assert!((stats[0].0.data()[0] - 5.0).abs() < 1e-12);
    assert!((stats[0].1.data()[0] - 4.0).abs() < 1e-12);

    let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
    let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-6, "mean {mean}");
    assert!((var - 1.0).abs() < 1e-4, "var {var}");
}

#[test]
fn batchnorm_train_output_standardized_over_random_batches() {
    for seed in 0..10u64 {
        let mut rng = stream(seed, "bn-standardize", &[]);
        let net = vec![plain_batchnorm(3)];
        let x = randn(&mut rng, &[8, 3, 2, 2]);
        let (y, _) = forward(&net, &x, Mode::Train).unwrap();
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..8 {
                for s in 0..4 {
                    vals.push(y.data()[(n * 3 + c) * 4 + s]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn eval_forward_is_pure() {
    let mut rng = stream(7, "purity", &[]);
    let net = vec![
        Layer::Dense(check::rand_dense(&mut rng, 6, 4)),
        Layer::BatchNorm(check::rand_batchnorm(&mut rng, 6)),
        Layer::Tanh,
        Layer::Dense(check::rand_dense(&mut rng, 3, 6)),
    ];
    let x = randn(&mut rng, &[5, 4]);
    let (a, _) = forward(&net, &x, Mode::Eval).unwrap();
    let (b, _) = forward(&net, &x, Mode::Eval).unwrap();
    assert_eq!(a.data(), b.data(), "eval forward must be bitwise pure");
}

#[test]
fn running_stats_update_only_under_explicit_flag() {
    let mut rng = stream(11, "bn-update", &[]);
    let mut net = vec![plain_batchnorm(2)];
    let x = randn(&mut rng, &[6, 2]);

    let before: Vec<f64> = net[0].state().iter().flat_map(|t| t.data().to_vec()).collect();
    forward(&net, &x, Mode::Train).unwrap();
    let after_plain: Vec<f64> = net[0].state().iter().flat_map(|t| t.data().to_vec()).collect();
    assert_eq!(before, after_plain, "plain forward must not touch statistics");

    forward_update(&mut net, &x).unwrap();
    let after_update: Vec<f64> =
        net[0].state().iter().flat_map(|t| t.data().to_vec()).collect();
    assert_ne!(before, after_update, "forward_update must fold batch stats in");

    // new = 0.9 * old + 0.1 * batch
    let (_, trace) = forward(&net, &x, Mode::Train).unwrap();
    let _ = trace;
    let batch_mean: f64 = x.data().iter().step_by(2).sum::<f64>() / 6.0;
    assert!((after_update[0] - 0.1 * batch_mean).abs() < 1e-12);
}

#[test]
fn upsample_then_avgpool_is_identity() {
    let mut rng = stream(3, "up-pool", &[]);
    let net = vec![Layer::<f64>::Upsample2x, Layer::AvgPool2x];
    let x = randn(&mut rng, &[2, 3, 4, 5]);
    let (y, _) = forward(&net, &x, Mode::Eval).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(y.data(), x.data());
}

#[test]
fn reshape_backward_is_identity_mapping() {
    let mut rng = stream(4, "reshape-bijection", &[]);
    let net = vec![Layer::<f64>::Reshape {
        target: vec![2, 6],
    }];
    let x = randn(&mut rng, &[3, 12]);
    let (y, trace) = forward(&net, &x, Mode::Train).unwrap();
    assert_eq!(y.shape(), &[3, 2, 6]);
    let upstream = randn(&mut rng, &[3, 2, 6]);
    let (dx, _) = backward(&net, &trace, &upstream).unwrap();
    assert_eq!(dx.shape(), x.shape());
    assert_eq!(dx.data(), upstream.data());
}

#[test]
fn tanh_fixes_zero() {
    let net = vec![Layer::<f64>::Tanh];
    let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
    let (y, _) = forward(&net, &x, Mode::Eval).unwrap();
    assert_eq!(y.data(), &[0.0]);
}

#[test]
fn dense_shape_mismatch_is_descriptive() {
    let mut rng = stream(5, "shape-err", &[]);
    let net = vec![Layer::Dense(check::rand_dense(&mut rng, 3, 4))];
    let x = randn(&mut rng, &[2, 5]);
    let err = forward(&net, &x, Mode::Eval).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("layer 0"), "got: {msg}");
    assert!(msg.contains("expected"), "got: {msg}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn upsample_avgpool_identity_holds_generally(
        n in 1usize..3,
        c in 1usize..4,
        h in 1usize..6,
        w in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = stream(seed, "prop-up-pool", &[]);
        let x = randn(&mut rng, &[n, c, h, w]);
        let net = vec![Layer::<f64>::Upsample2x, Layer::AvgPool2x];
        let (y, _) = forward(&net, &x, Mode::Eval).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn engine_ops_preserve_finiteness(seed in 0u64..1000) {
        let mut rng = stream(seed, "prop-finite", &[]);
        let net = vec![
            Layer::Dense(check::rand_dense(&mut rng, 8, 6)),
            Layer::BatchNorm(check::rand_batchnorm(&mut rng, 8)),
            Layer::LeakyRelu { negative_slope: 0.2 },
            Layer::Dense(check::rand_dense(&mut rng, 4, 8)),
            Layer::Tanh,
        ];
        let x = randn(&mut rng, &[5, 6]);
        let (y, trace) = forward(&net, &x, Mode::Train).unwrap();
        prop_assert!(y.all_finite());
        let upstream = randn(&mut rng, y.shape());
        let (dx, grads) = backward(&net, &trace, &upstream).unwrap();
        prop_assert!(dx.all_finite());
        prop_assert!(grads.iter_tensors().all(|t| t.all_finite()));
    }
}
