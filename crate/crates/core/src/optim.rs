//! Parameter update rules.

use crate::error::EngineError;
use crate::layers::Layer;
use crate::net::GradSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradient-descent optimizer with per-parameter state, shape-matched to the
/// network it was built from.
pub enum Optimizer<S> {
    SgdMomentum {
        lr: S,
        momentum: S,
        velocity: Vec<Vec<Tensor<S>>>,
    },
    /// First/second-moment adaptive update with bias correction.
    Adam {
        lr: S,
        beta1: S,
        beta2: S,
        eps: S,
        step: u64,
        first: Vec<Vec<Tensor<S>>>,
        second: Vec<Vec<Tensor<S>>>,
    },
}

fn state_like<S: Scalar>(net: &[Layer<S>]) -> Vec<Vec<Tensor<S>>> {
    net.iter()
        .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
        .collect()
}

impl<S: Scalar> Optimizer<S> {
    pub fn sgd_momentum(net: &[Layer<S>], lr: S, momentum: S) -> Result<Self, EngineError> {
        if lr <= S::zero() {
            return Err(EngineError::Invalid("learning rate must be positive".into()));
        }
        Ok(Optimizer::SgdMomentum {
            lr,
            momentum,
            velocity: state_like(net),
        })
    }

    pub fn adam(net: &[Layer<S>], lr: S) -> Result<Self, EngineError> {
        if lr <= S::zero() {
            return Err(EngineError::Invalid("learning rate must be positive".into()));
        }
        Ok(Optimizer::Adam {
            lr,
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            step: 0,
            first: state_like(net),
            second: state_like(net),
        })
    }

    /// Applies one update to every parameter of `net` in place.
    pub fn step(&mut self, net: &mut [Layer<S>], grads: &GradSet<S>) -> Result<(), EngineError> {
        if grads.layers.len() != net.len() {
            return Err(EngineError::Invalid(
                "gradient set does not cover the network".into(),
            ));
        }
        match self {
            Optimizer::SgdMomentum {
                lr,
                momentum,
                velocity,
            } => {
                for ((layer, vel), g) in net.iter_mut().zip(velocity.iter_mut()).zip(&grads.layers)
                {
                    let params = layer.params_mut();
                    check_counts(params.len(), g.len())?;
                    for ((p, v), gt) in params.into_iter().zip(vel.iter_mut()).zip(g.iter()) {
                        if p.shape() != gt.shape() {
                            return Err(EngineError::shape("optimizer step", p.shape(), gt.shape()));
                        }
                        // v <- m * v + g ; p <- p - lr * v
                        v.scale(*momentum);
                        v.add_scaled(gt, S::one())?;
                        p.add_scaled(v, -*lr)?;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                first,
                second,
            } => {
                *step += 1;
                let t = *step as i32;
                let corr1 = S::one() - beta1.powi(t);
                let corr2 = S::one() - beta2.powi(t);
                for ((layer, (m1, m2)), g) in net
                    .iter_mut()
                    .zip(first.iter_mut().zip(second.iter_mut()))
                    .zip(&grads.layers)
                {
                    let params = layer.params_mut();
                    check_counts(params.len(), g.len())?;
                    for (((p, m1t), m2t), gt) in params
                        .into_iter()
                        .zip(m1.iter_mut())
                        .zip(m2.iter_mut())
                        .zip(g.iter())
                    {
                        if p.shape() != gt.shape() {
                            return Err(EngineError::shape("optimizer step", p.shape(), gt.shape()));
                        }
                        for ((pv, m1v), (m2v, gv)) in p
                            .data_mut()
                            .iter_mut()
                            .zip(m1t.data_mut().iter_mut())
                            .zip(m2t.data_mut().iter_mut().zip(gt.data().iter()))
                        {
                            *m1v = *beta1 * *m1v + (S::one() - *beta1) * *gv;
                            *m2v = *beta2 * *m2v + (S::one() - *beta2) * *gv * *gv;
                            let mhat = *m1v / corr1;
                            let vhat = *m2v / corr2;
                            *pv = *pv - *lr * mhat / (vhat.sqrt() + *eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_counts(params: usize, grads: usize) -> Result<(), EngineError> {
    if params != grads {
        return Err(EngineError::Invalid(format!(
            "layer has {params} parameter tensors but {grads} gradients"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Dense;

    fn single_param_net(p: f64) -> Vec<Layer<f64>> {
        vec![Layer::Dense(Dense {
            weight: Tensor::new(vec![1, 1], vec![p]).unwrap(),
            bias: Tensor::zeros(&[1]),
        })]
    }

    fn grad(g: f64) -> GradSet<f64> {
        GradSet {
            layers: vec![vec![
                Tensor::new(vec![1, 1], vec![g]).unwrap(),
                Tensor::zeros(&[1]),
            ]],
        }
    }

    #[test]
    fn plain_gradient_step() {
        let mut net = single_param_net(1.0);
        let mut opt = Optimizer::sgd_momentum(&net, 0.1, 0.0).unwrap();
        opt.step(&mut net, &grad(2.0)).unwrap();
        assert_eq!(net[0].params()[0].data()[0], 0.8);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut net = single_param_net(1.5);
        let mut opt = Optimizer::sgd_momentum(&net, 0.1, 0.0).unwrap();
        opt.step(&mut net, &grad(0.0)).unwrap();
        assert_eq!(net[0].params()[0].data()[0], 1.5);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        // m=0.9, lr=0.1, g=1 from p=0: step1 p=-0.1; step2 v=1.9, p=-0.29.
        let mut net = single_param_net(0.0);
        let mut opt = Optimizer::sgd_momentum(&net, 0.1, 0.9).unwrap();
        opt.step(&mut net, &grad(1.0)).unwrap();
        assert!((net[0].params()[0].data()[0] - (-0.1)).abs() < 1e-15);
        opt.step(&mut net, &grad(1.0)).unwrap();
        assert!((net[0].params()[0].data()[0] - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut net = single_param_net(0.0);
        let mut opt = Optimizer::sgd_momentum(&net, 0.1, 0.9).unwrap();
        let bad = GradSet {
            layers: vec![vec![Tensor::zeros(&[2, 1]), Tensor::zeros(&[1])]],
        };
        assert!(opt.step(&mut net, &bad).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_roughly_lr() {
        let mut net = single_param_net(1.0);
        let mut opt = Optimizer::adam(&net, 0.001).unwrap();
        opt.step(&mut net, &grad(3.0)).unwrap();
        // With bias correction the first step is lr * g/|g| up to eps.
        let p = net[0].params()[0].data()[0];
        assert!((p - (1.0 - 0.001)).abs() < 1e-6, "p = {p}");
    }
}
