//! Central finite-difference gradient checker.
//!
//! The checker only ever calls the loss closure (forward passes), so it stays
//! independent of the backward implementation it validates.

use crate::error::EngineError;
use crate::layers::Layer;
use crate::net::GradSet;
use crate::scalar::Scalar;

/// Default perturbation for double-precision checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares `analytic` against central finite differences of `loss` over
/// every trainable parameter element of `net`.
///
/// Returns the max over parameters of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// A network without trainable parameters passes vacuously with 0.
pub fn finite_diff_check<S, F>(
    net: &mut Vec<Layer<S>>,
    analytic: &GradSet<S>,
    mut loss: F,
    step: f64,
) -> Result<S, EngineError>
where
    S: Scalar,
    F: FnMut(&mut Vec<Layer<S>>) -> Result<S, EngineError>,
{
    if analytic.layers.len() != net.len() {
        return Err(EngineError::Invalid(
            "analytic gradient set does not cover the network".into(),
        ));
    }
    let h = S::from_f64(step);
    let floor = S::from_f64(1e-8);
    let two_h = S::from_f64(2.0 * step);
    let mut worst = S::zero();

    let layer_count = net.len();
    for li in 0..layer_count {
        let tensor_count = net[li].params().len();
        if analytic.layers[li].len() != tensor_count {
            return Err(EngineError::Invalid(format!(
                "analytic gradients for layer {li} do not match its parameters"
            )));
        }
        for ti in 0..tensor_count {
            let numel = net[li].params()[ti].numel();
            for e in 0..numel {
                let original = net[li].params()[ti].data()[e];
                if !original.is_finite() {
                    return Err(EngineError::NonFinite(format!(
                        "parameter {e} of tensor {ti} in layer {li}"
                    )));
                }
                net[li].params_mut()[ti].data_mut()[e] = original + h;
                let plus = loss(net)?;
                net[li].params_mut()[ti].data_mut()[e] = original - h;
                let minus = loss(net)?;
                net[li].params_mut()[ti].data_mut()[e] = original;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(EngineError::NonFinite(
                        "loss during finite-difference probe".into(),
                    ));
                }
                let numeric = (plus - minus) / two_h;
                let exact = analytic.layers[li][ti].data()[e];
                let denom = exact.abs().max(numeric.abs()).max(floor);
                let rel = (exact - numeric).abs() / denom;
                if rel > worst {
                    worst = rel;
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Dense, Mode};
    use crate::net::{backward, forward};
    use crate::tensor::Tensor;

    #[test]
    fn dense_squared_error_matches_below_1e6() {
        let mut net = vec![Layer::Dense(Dense {
            weight: Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.1, 0.2, 0.5, -0.4]).unwrap(),
            bias: Tensor::new(vec![2], vec![0.1, -0.2]).unwrap(),
        })];
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75]).unwrap();

        let (y, trace) = forward(&net, &x, Mode::Train).unwrap();
        // loss = sum(y^2); d loss/d y = 2y
        let upstream = y.map(|v| 2.0 * v);
        let (_, grads) = backward(&net, &trace, &upstream).unwrap();

        let err = finite_diff_check(
            &mut net,
            &grads,
            |n| {
                let (out, _) = forward(n, &x, Mode::Train)?;
                Ok(out.data().iter().map(|v| v * v).sum())
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn parameterless_network_passes_vacuously() {
        let mut net: Vec<Layer<f64>> = vec![Layer::Relu, Layer::Tanh];
        let grads = GradSet::zeros_like(&net);
        let err = finite_diff_check(&mut net, &grads, |_| Ok(0.0), DEFAULT_STEP).unwrap();
        assert_eq!(err, 0.0);
    }
}
