//! Randomized gradient verification suites.
//!
//! Shared by the unit tests and the acceptance suite: every layer kind and
//! every loss is exercised against the central finite-difference oracle on
//! small randomized instances.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::EngineError;
use crate::fd::{finite_diff_check, DEFAULT_STEP};
use crate::layers::{BatchNorm, Conv2d, Dense, Layer, Mode};
use crate::net::{backward, forward};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// One verified case: a layer or loss name and its worst relative error.
#[derive(Clone, Debug)]
pub struct GradientCase {
    pub name: String,
    pub max_rel_error: f64,
}

pub fn randn(rng: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn rand_dense(rng: &mut Stream, out_dim: usize, in_dim: usize) -> Dense<f64> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    Dense {
        weight: Tensor::from_fn(&[out_dim, in_dim], |_| rng.gen_range(-bound..bound)),
        bias: Tensor::from_fn(&[out_dim], |_| rng.gen_range(-bound..bound)),
    }
}

pub fn rand_conv(rng: &mut Stream, oc: usize, ic: usize, k: usize, bias: bool) -> Conv2d<f64> {
    let bound = 1.0 / ((ic * k * k) as f64).sqrt();
    Conv2d {
        weight: Tensor::from_fn(&[oc, ic, k, k], |_| rng.gen_range(-bound..bound)),
        bias: bias.then(|| Tensor::from_fn(&[oc], |_| rng.gen_range(-bound..bound))),
    }
}

pub fn rand_batchnorm(rng: &mut Stream, channels: usize) -> BatchNorm<f64> {
    BatchNorm {
        gamma: Tensor::from_fn(&[channels], |_| rng.gen_range(0.5..1.5)),
        beta: Tensor::from_fn(&[channels], |_| rng.gen_range(-0.5..0.5)),
        running_mean: Tensor::from_fn(&[channels], |_| rng.gen_range(-0.5..0.5)),
        running_var: Tensor::from_fn(&[channels], |_| rng.gen_range(0.5..1.5)),
        momentum: 0.1,
        eps: 1e-5,
    }
}

/// Small network embedding one layer kind between shape adapters, so the
/// finite-difference probe sees parameters both before and after it.
fn layer_case(name: &str, rng: &mut Stream) -> (Vec<Layer<f64>>, Tensor<f64>) {
    match name {
        "dense" => (
            vec![
                Layer::Dense(rand_dense(rng, 5, 4)),
                Layer::Dense(rand_dense(rng, 3, 5)),
            ],
            randn(rng, &[3, 4]),
        ),
        "conv2d" => (
            vec![
                Layer::Conv2d(rand_conv(rng, 3, 2, 3, true)),
                Layer::Reshape {
                    target: vec![3 * 4 * 4],
                },
                Layer::Dense(rand_dense(rng, 2, 48)),
            ],
            randn(rng, &[2, 2, 4, 4]),
        ),
        "batchnorm" => (
            vec![
                Layer::Dense(rand_dense(rng, 6, 4)),
                Layer::BatchNorm(rand_batchnorm(rng, 6)),
                Layer::Dense(rand_dense(rng, 2, 6)),
            ],
            randn(rng, &[4, 4]),
        ),
        "batchnorm4d" => (
            vec![
                Layer::Conv2d(rand_conv(rng, 3, 1, 3, false)),
                Layer::BatchNorm(rand_batchnorm(rng, 3)),
                Layer::Reshape {
                    target: vec![3 * 4 * 4],
                },
                Layer::Dense(rand_dense(rng, 2, 48)),
            ],
            randn(rng, &[3, 1, 4, 4]),
        ),
        "leaky_relu" => (
            vec![
                Layer::Dense(rand_dense(rng, 6, 4)),
                Layer::LeakyRelu {
                    negative_slope: 0.2,
                },
                Layer::Dense(rand_dense(rng, 3, 6)),
            ],
            randn(rng, &[3, 4]),
        ),
        "relu" => (
            vec![
                Layer::Dense(rand_dense(rng, 6, 4)),
                Layer::Relu,
                Layer::Dense(rand_dense(rng, 3, 6)),
            ],
            randn(rng, &[3, 4]),
        ),
        "tanh" => (
            vec![
                Layer::Dense(rand_dense(rng, 6, 4)),
                Layer::Tanh,
                Layer::Dense(rand_dense(rng, 3, 6)),
            ],
            randn(rng, &[3, 4]),
        ),
        "upsample2x" => (
            vec![
                Layer::Conv2d(rand_conv(rng, 2, 1, 3, true)),
                Layer::Upsample2x,
                Layer::Reshape {
                    target: vec![2 * 8 * 8],
                },
                Layer::Dense(rand_dense(rng, 2, 128)),
            ],
            randn(rng, &[2, 1, 4, 4]),
        ),
        "avgpool2x" => (
            vec![
                Layer::Conv2d(rand_conv(rng, 2, 1, 3, true)),
                Layer::AvgPool2x,
                Layer::Reshape {
                    target: vec![2 * 2 * 2],
                },
                Layer::Dense(rand_dense(rng, 2, 8)),
            ],
            randn(rng, &[2, 1, 4, 4]),
        ),
        "reshape" => (
            vec![
                Layer::Dense(rand_dense(rng, 8, 4)),
                Layer::Reshape {
                    target: vec![2, 2, 2],
                },
                Layer::Reshape { target: vec![8] },
                Layer::Dense(rand_dense(rng, 2, 8)),
            ],
            randn(rng, &[3, 4]),
        ),
        other => panic!("unknown layer case '{other}'"),
    }
}

pub const LAYER_CASES: &[&str] = &[
    "dense",
    "conv2d",
    "batchnorm",
    "batchnorm4d",
    "leaky_relu",
    "relu",
    "tanh",
    "upsample2x",
    "avgpool2x",
    "reshape",
];

/// Runs the squared-error finite-difference check for one layer case and one
/// seed; returns the worst relative error over all parameters.
pub fn check_layer_case(name: &str, seed: u64) -> Result<f64, EngineError> {
    let mut rng = stream(seed, "layer-grad", &[]);
    let (mut net, input) = layer_case(name, &mut rng);
    let (out, _) = forward(&net, &input, Mode::Train)?;
    let target = randn(&mut rng, out.shape());

    let loss_of = |y: &Tensor<f64>| -> f64 {
        y.data()
            .iter()
            .zip(target.data().iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let (y, trace) = forward(&net, &input, Mode::Train)?;
    let mut upstream = y.clone();
    for (u, t) in upstream.data_mut().iter_mut().zip(target.data().iter()) {
        *u = 2.0 * (*u - t);
    }
    let (_, grads) = backward(&net, &trace, &upstream)?;

    finite_diff_check(
        &mut net,
        &grads,
        |n| {
            let (out, _) = forward(n, &input, Mode::Train)?;
            Ok(loss_of(&out))
        },
        DEFAULT_STEP,
    )
}

/// Every layer kind against finite differences over the given seeds.
pub fn layer_gradient_suite(seeds: &[u64]) -> Result<Vec<GradientCase>, EngineError> {
    let mut cases = Vec::new();
    for name in LAYER_CASES {
        let mut worst = 0.0f64;
        for &seed in seeds {
            worst = worst.max(check_layer_case(name, seed)?);
        }
        cases.push(GradientCase {
            name: (*name).to_string(),
            max_rel_error: worst,
        });
    }
    Ok(cases)
}

/// Verifies that the input gradient of a traced network matches finite
/// differences on the input itself (used by loss checks that route gradients
/// through frozen parameters).
pub fn input_grad_fd_error(
    net: &[Layer<f64>],
    input: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut loss: impl FnMut(&Tensor<f64>) -> Result<f64, EngineError>,
) -> Result<f64, EngineError> {
    let _ = net;
    let mut worst = 0.0f64;
    let mut probe = input.clone();
    for e in 0..probe.numel() {
        let original = probe.data()[e];
        probe.data_mut()[e] = original + DEFAULT_STEP;
        let plus = loss(&probe)?;
        probe.data_mut()[e] = original - DEFAULT_STEP;
        let minus = loss(&probe)?;
        probe.data_mut()[e] = original;
        let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
        let exact = analytic.data()[e];
        let denom = exact.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((exact - numeric).abs() / denom);
    }
    Ok(worst)
}
