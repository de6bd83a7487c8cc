//! Forward/backward passes over layer sequences.

use crate::error::EngineError;
use crate::layers::{Layer, Mode, StatUpdate, TraceEntry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-layer cache produced by a forward pass; consumed by [`backward`].
#[derive(Debug)]
pub struct Trace<S> {
    pub mode: Mode,
    pub entries: Vec<TraceEntry<S>>,
}

impl<S: Scalar> Trace<S> {
    /// Measured per-channel batch statistics of every BatchNorm layer
    /// traversed, in network order. Only meaningful for train-mode traces.
    pub fn measured_bn_stats(&self) -> Vec<(Tensor<S>, Tensor<S>)> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                TraceEntry::BatchNorm {
                    mean,
                    var,
                    measured: true,
                    ..
                } => Some((mean.clone(), var.clone())),
                _ => None,
            })
            .collect()
    }
}

/// One gradient tensor per parameter tensor, aligned with the network's
/// layer and per-layer parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet<S> {
    pub layers: Vec<Vec<Tensor<S>>>,
}

impl<S: Scalar> GradSet<S> {
    pub fn zeros_like(net: &[Layer<S>]) -> Self {
        GradSet {
            layers: net
                .iter()
                .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradSet<S>, factor: S) -> Result<(), EngineError> {
        if self.layers.len() != other.layers.len() {
            return Err(EngineError::Invalid(
                "gradient sets cover different networks".into(),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            if a.len() != b.len() {
                return Err(EngineError::Invalid(
                    "gradient sets cover different parameter lists".into(),
                ));
            }
            for (ta, tb) in a.iter_mut().zip(b.iter()) {
                ta.add_scaled(tb, factor)?;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: S) {
        for layer in &mut self.layers {
            for t in layer {
                t.scale(factor);
            }
        }
    }

    pub fn iter_tensors(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.layers.iter().flat_map(|l| l.iter())
    }

    pub fn squared_norm(&self) -> S {
        self.iter_tensors()
            .fold(S::zero(), |acc, t| acc + t.squared_norm())
    }
}

fn forward_inner<S: Scalar>(
    net: &[Layer<S>],
    input: &Tensor<S>,
    mode: Mode,
) -> Result<(Tensor<S>, Trace<S>, Vec<Option<StatUpdate<S>>>), EngineError> {
    if !input.all_finite() {
        return Err(EngineError::NonFinite("forward input".into()));
    }
    let mut current = input.clone();
    let mut entries = Vec::with_capacity(net.len());
    let mut updates = Vec::with_capacity(net.len());
    for (idx, layer) in net.iter().enumerate() {
        let out = layer.forward(&current, mode).map_err(|e| match e {
            EngineError::ShapeMismatch {
                context,
                expected,
                got,
            } => EngineError::ShapeMismatch {
                context: format!("layer {idx} ({context})"),
                expected,
                got,
            },
            other => other,
        })?;
        current = out.output;
        entries.push(out.entry);
        updates.push(out.stat_update);
    }
    Ok((current, Trace { mode, entries }, updates))
}

/// Forward pass that never mutates the network. Eval mode normalizes with
/// stored running statistics; train mode normalizes with measured batch
/// statistics and records them in the trace.
pub fn forward<S: Scalar>(
    net: &[Layer<S>],
    input: &Tensor<S>,
    mode: Mode,
) -> Result<(Tensor<S>, Trace<S>), EngineError> {
    let (out, trace, _) = forward_inner(net, input, mode)?;
    Ok((out, trace))
}

/// Train-mode forward that additionally folds the measured batch statistics
/// into each BatchNorm's running statistics.
pub fn forward_update<S: Scalar>(
    net: &mut [Layer<S>],
    input: &Tensor<S>,
) -> Result<(Tensor<S>, Trace<S>), EngineError> {
    let (out, trace, updates) = forward_inner(net, input, Mode::Train)?;
    for (layer, update) in net.iter_mut().zip(updates) {
        if let (Layer::BatchNorm(bn), Some(stat)) = (layer, update) {
            let keep = S::one() - bn.momentum;
            let mix = bn.momentum;
            for (r, b) in bn
                .running_mean
                .data_mut()
                .iter_mut()
                .zip(stat.mean.data().iter())
            {
                *r = keep * *r + mix * *b;
            }
            for (r, b) in bn
                .running_var
                .data_mut()
                .iter_mut()
                .zip(stat.var.data().iter())
            {
                *r = keep * *r + mix * *b;
            }
        }
    }
    Ok((out, trace))
}

/// Backward pass. Returns the gradient with respect to the forward input and
/// one gradient tensor per parameter. Requires a train-mode trace from the
/// same network.
pub fn backward<S: Scalar>(
    net: &[Layer<S>],
    trace: &Trace<S>,
    output_gradient: &Tensor<S>,
) -> Result<(Tensor<S>, GradSet<S>), EngineError> {
    backward_with_options(net, trace, output_gradient, None, true)
}

/// Backward pass that injects extra gradients with respect to the measured
/// batch statistics of each BatchNorm layer (`stat_grads` carries one
/// (d mean, d var) pair per BatchNorm in network order).
pub fn backward_with_stat_grads<S: Scalar>(
    net: &[Layer<S>],
    trace: &Trace<S>,
    output_gradient: &Tensor<S>,
    stat_grads: &[(Tensor<S>, Tensor<S>)],
) -> Result<(Tensor<S>, GradSet<S>), EngineError> {
    backward_with_options(net, trace, output_gradient, Some(stat_grads), true)
}

pub(crate) fn backward_with_options<S: Scalar>(
    net: &[Layer<S>],
    trace: &Trace<S>,
    output_gradient: &Tensor<S>,
    stat_grads: Option<&[(Tensor<S>, Tensor<S>)]>,
    want_param_grads: bool,
) -> Result<(Tensor<S>, GradSet<S>), EngineError> {
    if trace.mode != Mode::Train {
        return Err(EngineError::TraceMismatch(
            "backward requires a train-mode trace".into(),
        ));
    }
    if trace.entries.len() != net.len() {
        return Err(EngineError::TraceMismatch(format!(
            "trace has {} entries for a {}-layer network",
            trace.entries.len(),
            net.len()
        )));
    }
    let bn_count = net
        .iter()
        .filter(|l| matches!(l, Layer::BatchNorm(_)))
        .count();
    if let Some(sg) = stat_grads {
        if sg.len() != bn_count {
            return Err(EngineError::Invalid(format!(
                "{} statistic gradients supplied for {} BatchNorm layers",
                sg.len(),
                bn_count
            )));
        }
    }

    let mut grad = output_gradient.clone();
    let mut per_layer: Vec<Vec<Tensor<S>>> = vec![vec![]; net.len()];
    let mut bn_seen = bn_count;
    for (idx, (layer, entry)) in net.iter().zip(trace.entries.iter()).enumerate().rev() {
        let stat = if matches!(layer, Layer::BatchNorm(_)) {
            bn_seen -= 1;
            stat_grads.map(|sg| (&sg[bn_seen].0, &sg[bn_seen].1))
        } else {
            None
        };
        let (grad_in, param_grads) = layer.backward(entry, &grad, stat, want_param_grads)?;
        per_layer[idx] = param_grads;
        grad = grad_in;
    }
    let grads = if want_param_grads {
        GradSet { layers: per_layer }
    } else {
        GradSet {
            layers: net.iter().map(|_| vec![]).collect(),
        }
    };
    Ok((grad, grads))
}

/// Total number of trainable parameters in a network.
pub fn param_count<S: Scalar>(net: &[Layer<S>]) -> usize {
    net.iter().map(|l| l.param_count()).sum()
}
