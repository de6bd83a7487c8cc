//! Layer kinds and their forward/backward math.
//!
//! The layer set is closed: Dense, Conv2d (stride 1, resolution-preserving
//! padding), BatchNorm, LeakyReLU, ReLU, Tanh, nearest-neighbor 2x upsampling,
//! 2x2 average pooling and per-sample Reshape. Backward passes are exact
//! partial derivatives of the traced computation; the finite-difference
//! checker in [`crate::fd`] is the reference every kind is held to.

use serde::{Deserialize, Serialize};

use crate::error::EngineError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Forward execution mode.
///
/// `Train` normalizes BatchNorm with measured batch statistics and records
/// them in the trace; `Eval` uses the stored running statistics. Running
/// statistics are only mutated by [`crate::net::forward_update`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Eval,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense<S> {
    /// Shape (out, in).
    pub weight: Tensor<S>,
    /// Shape (out,).
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<S> {
    /// Shape (out_ch, in_ch, k, k).
    pub weight: Tensor<S>,
    /// Shape (out_ch,). Absent when the layer feeds directly into BatchNorm.
    pub bias: Option<Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    /// Strictly positive; biased (divide by count) convention.
    pub running_var: Tensor<S>,
    /// Fraction of the batch statistic blended in per update:
    /// `new = (1 - momentum) * old + momentum * batch`.
    pub momentum: S,
    pub eps: S,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer<S> {
    Dense(Dense<S>),
    Conv2d(Conv2d<S>),
    BatchNorm(BatchNorm<S>),
    LeakyRelu { negative_slope: S },
    Relu,
    Tanh,
    Upsample2x,
    AvgPool2x,
    /// Per-sample reshape: (N, rest..) -> (N, target..).
    Reshape { target: Vec<usize> },
}

/// Values cached by one layer's forward pass for the backward sweep.
#[derive(Clone, Debug)]
pub enum TraceEntry<S> {
    Dense {
        input: Tensor<S>,
    },
    Conv2d {
        input: Tensor<S>,
    },
    BatchNorm {
        input: Tensor<S>,
        /// Statistics used for normalization: measured in train mode,
        /// running in eval mode.
        mean: Tensor<S>,
        var: Tensor<S>,
        measured: bool,
    },
    LeakyRelu {
        input: Tensor<S>,
    },
    Relu {
        input: Tensor<S>,
    },
    Tanh {
        output: Tensor<S>,
    },
    Upsample2x {
        in_shape: Vec<usize>,
    },
    AvgPool2x {
        in_shape: Vec<usize>,
    },
    Reshape {
        in_shape: Vec<usize>,
    },
}

/// Batch statistics produced by a train-mode BatchNorm forward, fed back into
/// the running statistics by `forward_update`.
pub struct StatUpdate<S> {
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

pub struct LayerOutput<S> {
    pub output: Tensor<S>,
    pub entry: TraceEntry<S>,
    pub stat_update: Option<StatUpdate<S>>,
}

impl<S: Scalar> Layer<S> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::LeakyRelu { .. } => "leaky_relu",
            Layer::Relu => "relu",
            Layer::Tanh => "tanh",
            Layer::Upsample2x => "upsample2x",
            Layer::AvgPool2x => "avgpool2x",
            Layer::Reshape { .. } => "reshape",
        }
    }

    /// Trainable parameter tensors, in a fixed per-layer order.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => match &c.bias {
                Some(b) => vec![&c.weight, b],
                None => vec![&c.weight],
            },
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => match &mut c.bias {
                Some(b) => vec![&mut c.weight, b],
                None => vec![&mut c.weight],
            },
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            _ => vec![],
        }
    }

    /// Non-trainable state (BatchNorm running statistics).
    pub fn state(&self) -> Vec<&Tensor<S>> {
        match self {
            Layer::BatchNorm(bn) => vec![&bn.running_mean, &bn.running_var],
            _ => vec![],
        }
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Layer::BatchNorm(bn) => vec![&mut bn.running_mean, &mut bn.running_var],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn forward(&self, input: &Tensor<S>, mode: Mode) -> Result<LayerOutput<S>, EngineError> {
        match self {
            Layer::Dense(d) => dense_forward(d, input),
            Layer::Conv2d(c) => conv2d_forward(c, input),
            Layer::BatchNorm(bn) => batchnorm_forward(bn, input, mode),
            Layer::LeakyRelu { negative_slope } => leaky_forward(input, *negative_slope),
            Layer::Relu => {
                let mut out = leaky_forward(input, S::zero())?;
                out.entry = TraceEntry::Relu {
                    input: input.clone(),
                };
                Ok(out)
            }
            Layer::Tanh => tanh_forward(input),
            Layer::Upsample2x => upsample_forward(input),
            Layer::AvgPool2x => avgpool_forward(input),
            Layer::Reshape { target } => reshape_forward(input, target),
        }
    }

    /// Backward through one layer.
    ///
    /// `stat_grad` injects extra loss gradients with respect to the measured
    /// batch mean/variance of a train-mode BatchNorm (the path a statistics
    /// matching loss takes into the input).
    pub fn backward(
        &self,
        entry: &TraceEntry<S>,
        grad_out: &Tensor<S>,
        stat_grad: Option<(&Tensor<S>, &Tensor<S>)>,
        want_param_grads: bool,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>), EngineError> {
        match (self, entry) {
            (Layer::Dense(d), TraceEntry::Dense { input }) => {
                dense_backward(d, input, grad_out, want_param_grads)
            }
            (Layer::Conv2d(c), TraceEntry::Conv2d { input }) => {
                conv2d_backward(c, input, grad_out, want_param_grads)
            }
            (Layer::BatchNorm(bn), TraceEntry::BatchNorm {
                input,
                mean,
                var,
                measured,
            }) => {
                if !measured {
                    return Err(EngineError::TraceMismatch(
                        "BatchNorm backward requires a train-mode trace".into(),
                    ));
                }
                batchnorm_backward(bn, input, mean, var, grad_out, stat_grad, want_param_grads)
            }
            (Layer::LeakyRelu { negative_slope }, TraceEntry::LeakyRelu { input }) => {
                Ok((leaky_backward(input, grad_out, *negative_slope), vec![]))
            }
            (Layer::Relu, TraceEntry::Relu { input }) => {
                Ok((leaky_backward(input, grad_out, S::zero()), vec![]))
            }
            (Layer::Tanh, TraceEntry::Tanh { output }) => {
                let mut g = grad_out.clone();
                for (gi, yi) in g.data_mut().iter_mut().zip(output.data().iter()) {
                    *gi = *gi * (S::one() - *yi * *yi);
                }
                Ok((g, vec![]))
            }
            (Layer::Upsample2x, TraceEntry::Upsample2x { in_shape }) => {
                Ok((upsample_backward(in_shape, grad_out), vec![]))
            }
            (Layer::AvgPool2x, TraceEntry::AvgPool2x { in_shape }) => {
                Ok((avgpool_backward(in_shape, grad_out), vec![]))
            }
            (Layer::Reshape { .. }, TraceEntry::Reshape { in_shape }) => {
                Ok((grad_out.reshaped(in_shape)?, vec![]))
            }
            _ => Err(EngineError::TraceMismatch(format!(
                "trace entry does not match layer kind '{}'",
                self.kind_name()
            ))),
        }
    }
}

fn dense_forward<S: Scalar>(d: &Dense<S>, input: &Tensor<S>) -> Result<LayerOutput<S>, EngineError> {
    let (out_dim, in_dim) = (d.weight.shape()[0], d.weight.shape()[1]);
    if input.shape().len() != 2 || input.shape()[1] != in_dim {
        return Err(EngineError::shape("dense forward", &[0, in_dim], input.shape()));
    }
    let n = input.shape()[0];
    let x = input.data();
    let w = d.weight.data();
    let b = d.bias.data();
    let mut out = vec![S::zero(); n * out_dim];
    for i in 0..n {
        let xi = &x[i * in_dim..(i + 1) * in_dim];
        let oi = &mut out[i * out_dim..(i + 1) * out_dim];
        for (o, slot) in oi.iter_mut().enumerate() {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for (xv, wv) in xi.iter().zip(wr.iter()) {
                acc = acc + *xv * *wv;
            }
            *slot = acc;
        }
    }
    Ok(LayerOutput {
        output: Tensor::new(vec![n, out_dim], out)?,
        entry: TraceEntry::Dense {
            input: input.clone(),
        },
        stat_update: None,
    })
}

fn dense_backward<S: Scalar>(
    d: &Dense<S>,
    input: &Tensor<S>,
    grad_out: &Tensor<S>,
    want_param_grads: bool,
) -> Result<(Tensor<S>, Vec<Tensor<S>>), EngineError> {
    let (out_dim, in_dim) = (d.weight.shape()[0], d.weight.shape()[1]);
    let n = input.shape()[0];
    if grad_out.shape() != [n, out_dim] {
        return Err(EngineError::shape("dense backward", &[n, out_dim], grad_out.shape()));
    }
    let x = input.data();
    let w = d.weight.data();
    let g = grad_out.data();

    let mut dx = vec![S::zero(); n * in_dim];
    let mut dw = vec![S::zero(); if want_param_grads { out_dim * in_dim } else { 0 }];
    let mut db = vec![S::zero(); if want_param_grads { out_dim } else { 0 }];
    for i in 0..n {
        let xi = &x[i * in_dim..(i + 1) * in_dim];
        let gi = &g[i * out_dim..(i + 1) * out_dim];
        let dxi = &mut dx[i * in_dim..(i + 1) * in_dim];
        for (o, &go) in gi.iter().enumerate() {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            for (dxv, wv) in dxi.iter_mut().zip(wr.iter()) {
                *dxv = *dxv + go * *wv;
            }
            if want_param_grads {
                let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
                for (dwv, xv) in dwr.iter_mut().zip(xi.iter()) {
                    *dwv = *dwv + go * *xv;
                }
                db[o] = db[o] + go;
            }
        }
    }
    let grad_in = Tensor::new(vec![n, in_dim], dx)?;
    let param_grads = if want_param_grads {
        vec![
            Tensor::new(vec![out_dim, in_dim], dw)?,
            Tensor::new(vec![out_dim], db)?,
        ]
    } else {
        vec![]
    };
    Ok((grad_in, param_grads))
}

fn conv2d_forward<S: Scalar>(c: &Conv2d<S>, input: &Tensor<S>) -> Result<LayerOutput<S>, EngineError> {
    let ws = c.weight.shape();
    let (oc, ic, k) = (ws[0], ws[1], ws[2]);
    if input.shape().len() != 4 || input.shape()[1] != ic {
        return Err(EngineError::shape("conv2d forward", &[0, ic, 0, 0], input.shape()));
    }
    let (n, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
    let pad = k / 2;
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let x = input.data();
    let wt = c.weight.data();
    let mut out = vec![S::zero(); n * oc * oh * ow];
    for ni in 0..n {
        for o in 0..oc {
            let base_out = (ni * oc + o) * oh * ow;
            let bias = c.bias.as_ref().map(|b| b.data()[o]).unwrap_or_else(S::zero);
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias;
                    for i in 0..ic {
                        let base_in = (ni * ic + i) * h * w;
                        let base_w = ((o * ic + i) * k) * k;
                        for kh in 0..k {
                            let yi = yo + kh;
                            if yi < pad || yi - pad >= h {
                                continue;
                            }
                            let yi = yi - pad;
                            for kw in 0..k {
                                let xi = xo + kw;
                                if xi < pad || xi - pad >= w {
                                    continue;
                                }
                                let xi = xi - pad;
                                acc = acc + x[base_in + yi * w + xi] * wt[base_w + kh * k + kw];
                            }
                        }
                    }
                    out[base_out + yo * ow + xo] = acc;
                }
            }
        }
    }
    Ok(LayerOutput {
        output: Tensor::new(vec![n, oc, oh, ow], out)?,
        entry: TraceEntry::Conv2d {
            input: input.clone(),
        },
        stat_update: None,
    })
}

fn conv2d_backward<S: Scalar>(
    c: &Conv2d<S>,
    input: &Tensor<S>,
    grad_out: &Tensor<S>,
    want_param_grads: bool,
) -> Result<(Tensor<S>, Vec<Tensor<S>>), EngineError> {
    let ws = c.weight.shape();
    let (oc, ic, k) = (ws[0], ws[1], ws[2]);
    let (n, h, w) = (input.shape()[0], input.shape()[2], input.shape()[3]);
    let pad = k / 2;
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    if grad_out.shape() != [n, oc, oh, ow] {
        return Err(EngineError::shape(
            "conv2d backward",
            &[n, oc, oh, ow],
            grad_out.shape(),
        ));
    }
    let x = input.data();
    let wt = c.weight.data();
    let g = grad_out.data();
    let mut dx = vec![S::zero(); n * ic * h * w];
    let mut dw = vec![S::zero(); if want_param_grads { oc * ic * k * k } else { 0 }];
    let mut db = vec![S::zero(); if want_param_grads { oc } else { 0 }];
    for ni in 0..n {
        for o in 0..oc {
            let base_out = (ni * oc + o) * oh * ow;
            for yo in 0..oh {
                for xo in 0..ow {
                    let go = g[base_out + yo * ow + xo];
                    if want_param_grads {
                        db[o] = db[o] + go;
                    }
                    for i in 0..ic {
                        let base_in = (ni * ic + i) * h * w;
                        let base_w = ((o * ic + i) * k) * k;
                        for kh in 0..k {
                            let yi = yo + kh;
                            if yi < pad || yi - pad >= h {
                                continue;
                            }
                            let yi = yi - pad;
                            for kw in 0..k {
                                let xi = xo + kw;
                                if xi < pad || xi - pad >= w {
                                    continue;
                                }
                                let xi = xi - pad;
                                dx[base_in + yi * w + xi] =
                                    dx[base_in + yi * w + xi] + go * wt[base_w + kh * k + kw];
                                if want_param_grads {
                                    dw[base_w + kh * k + kw] =
                                        dw[base_w + kh * k + kw] + go * x[base_in + yi * w + xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let grad_in = Tensor::new(vec![n, ic, h, w], dx)?;
    let mut param_grads = vec![];
    if want_param_grads {
        param_grads.push(Tensor::new(vec![oc, ic, k, k], dw)?);
        if c.bias.is_some() {
            param_grads.push(Tensor::new(vec![oc], db)?);
        }
    }
    Ok((grad_in, param_grads))
}

/// Channel layout of a BatchNorm input: dim 1 is the channel axis, everything
/// after it is spatial.
fn channel_layout(shape: &[usize], channels: usize) -> Result<(usize, usize), EngineError> {
    if shape.len() < 2 || shape[1] != channels {
        return Err(EngineError::shape("batchnorm forward", &[0, channels], shape));
    }
    let spatial: usize = shape[2..].iter().product();
    Ok((shape[0], spatial))
}

fn batchnorm_forward<S: Scalar>(
    bn: &BatchNorm<S>,
    input: &Tensor<S>,
    mode: Mode,
) -> Result<LayerOutput<S>, EngineError> {
    let channels = bn.gamma.numel();
    let (n, spatial) = channel_layout(input.shape(), channels)?;
    if bn.running_var.data().iter().any(|v| *v <= S::zero()) {
        return Err(EngineError::Invalid(
            "BatchNorm running variance must be strictly positive".into(),
        ));
    }
    let count = n * spatial;
    let x = input.data();

    let (mean, var, measured) = match mode {
        Mode::Train => {
            if count == 0 {
                return Err(EngineError::Invalid(
                    "BatchNorm train-mode forward on an empty batch".into(),
                ));
            }
            let mut mean = vec![S::zero(); channels];
            let mut var = vec![S::zero(); channels];
            for ni in 0..n {
                for c in 0..channels {
                    let base = (ni * channels + c) * spatial;
                    for s in 0..spatial {
                        mean[c] = mean[c] + x[base + s];
                    }
                }
            }
            let inv = S::one() / S::from_usize(count);
            for m in &mut mean {
                *m = *m * inv;
            }
            for ni in 0..n {
                for c in 0..channels {
                    let base = (ni * channels + c) * spatial;
                    for s in 0..spatial {
                        let d = x[base + s] - mean[c];
                        var[c] = var[c] + d * d;
                    }
                }
            }
            for v in &mut var {
                *v = *v * inv;
            }
            (mean, var, true)
        }
        Mode::Eval => (
            bn.running_mean.data().to_vec(),
            bn.running_var.data().to_vec(),
            false,
        ),
    };

    let gamma = bn.gamma.data();
    let beta = bn.beta.data();
    let inv_std: Vec<S> = var.iter().map(|v| S::one() / (*v + bn.eps).sqrt()).collect();
    let mut out = vec![S::zero(); x.len()];
    for ni in 0..n {
        for c in 0..channels {
            let base = (ni * channels + c) * spatial;
            for s in 0..spatial {
                let xhat = (x[base + s] - mean[c]) * inv_std[c];
                out[base + s] = gamma[c] * xhat + beta[c];
            }
        }
    }
    let mean_t = Tensor::new(vec![channels], mean)?;
    let var_t = Tensor::new(vec![channels], var)?;
    let stat_update = if measured {
        Some(StatUpdate {
            mean: mean_t.clone(),
            var: var_t.clone(),
        })
    } else {
        None
    };
    Ok(LayerOutput {
        output: Tensor::new(input.shape().to_vec(), out)?,
        entry: TraceEntry::BatchNorm {
            input: input.clone(),
            mean: mean_t,
            var: var_t,
            measured,
        },
        stat_update,
    })
}

fn batchnorm_backward<S: Scalar>(
    bn: &BatchNorm<S>,
    input: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    grad_out: &Tensor<S>,
    stat_grad: Option<(&Tensor<S>, &Tensor<S>)>,
    want_param_grads: bool,
) -> Result<(Tensor<S>, Vec<Tensor<S>>), EngineError> {
    let channels = bn.gamma.numel();
    let (n, spatial) = channel_layout(input.shape(), channels)?;
    if grad_out.shape() != input.shape() {
        return Err(EngineError::shape(
            "batchnorm backward",
            input.shape(),
            grad_out.shape(),
        ));
    }
    let count = S::from_usize(n * spatial);
    let x = input.data();
    let g = grad_out.data();
    let gamma = bn.gamma.data();
    let m = mean.data();
    let v = var.data();
    let inv_std: Vec<S> = v.iter().map(|vv| S::one() / (*vv + bn.eps).sqrt()).collect();

    // Channel reductions.
    let mut sum_g = vec![S::zero(); channels];
    let mut sum_g_xc = vec![S::zero(); channels]; // sum of g * (x - mean)
    let mut sum_xc = vec![S::zero(); channels]; // sum of (x - mean); zero up to fp error
    for ni in 0..n {
        for c in 0..channels {
            let base = (ni * channels + c) * spatial;
            for s in 0..spatial {
                let gc = g[base + s];
                let xc = x[base + s] - m[c];
                sum_g[c] = sum_g[c] + gc;
                sum_g_xc[c] = sum_g_xc[c] + gc * xc;
                sum_xc[c] = sum_xc[c] + xc;
            }
        }
    }

    // d loss / d var and d loss / d mean, treating mean and var as the
    // intermediate nodes of the traced computation. Injected statistic
    // gradients enter additively here.
    let two = S::from_f64(2.0);
    let half = S::from_f64(0.5);
    let mut dvar = vec![S::zero(); channels];
    let mut dmean = vec![S::zero(); channels];
    for c in 0..channels {
        let gxhat_sum_xc = gamma[c] * sum_g_xc[c];
        dvar[c] = gxhat_sum_xc * (-half) * inv_std[c] * inv_std[c] * inv_std[c];
        if let Some((_, dv_extra)) = stat_grad {
            dvar[c] = dvar[c] + dv_extra.data()[c];
        }
        dmean[c] = gamma[c] * sum_g[c] * (-inv_std[c]) + dvar[c] * (-two) * sum_xc[c] / count;
        if let Some((dm_extra, _)) = stat_grad {
            dmean[c] = dmean[c] + dm_extra.data()[c];
        }
    }

    let mut dx = vec![S::zero(); x.len()];
    for ni in 0..n {
        for c in 0..channels {
            let base = (ni * channels + c) * spatial;
            for s in 0..spatial {
                let xc = x[base + s] - m[c];
                dx[base + s] = gamma[c] * g[base + s] * inv_std[c]
                    + dvar[c] * two * xc / count
                    + dmean[c] / count;
            }
        }
    }

    let grad_in = Tensor::new(input.shape().to_vec(), dx)?;
    let param_grads = if want_param_grads {
        let mut dgamma = vec![S::zero(); channels];
        for c in 0..channels {
            dgamma[c] = sum_g_xc[c] * inv_std[c];
        }
        vec![
            Tensor::new(vec![channels], dgamma)?,
            Tensor::new(vec![channels], sum_g)?,
        ]
    } else {
        vec![]
    };
    Ok((grad_in, param_grads))
}

fn leaky_forward<S: Scalar>(input: &Tensor<S>, slope: S) -> Result<LayerOutput<S>, EngineError> {
    let output = input.map(|v| if v >= S::zero() { v } else { slope * v });
    Ok(LayerOutput {
        output,
        entry: TraceEntry::LeakyRelu {
            input: input.clone(),
        },
        stat_update: None,
    })
}

fn leaky_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>, slope: S) -> Tensor<S> {
    let mut g = grad_out.clone();
    for (gi, xi) in g.data_mut().iter_mut().zip(input.data().iter()) {
        if *xi < S::zero() {
            *gi = *gi * slope;
        }
    }
    g
}

fn tanh_forward<S: Scalar>(input: &Tensor<S>) -> Result<LayerOutput<S>, EngineError> {
    let output = input.map(|v| v.tanh());
    Ok(LayerOutput {
        entry: TraceEntry::Tanh {
            output: output.clone(),
        },
        output,
        stat_update: None,
    })
}

fn upsample_forward<S: Scalar>(input: &Tensor<S>) -> Result<LayerOutput<S>, EngineError> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(EngineError::shape("upsample2x forward", &[0, 0, 0, 0], shape));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let x = input.data();
    let mut out = vec![S::zero(); n * c * 4 * h * w];
    let (oh, ow) = (2 * h, 2 * w);
    for nc in 0..n * c {
        let bi = nc * h * w;
        let bo = nc * oh * ow;
        for y in 0..oh {
            for xph in 0..ow {
                out[bo + y * ow + xph] = x[bi + (y / 2) * w + xph / 2];
            }
        }
    }
    Ok(LayerOutput {
        output: Tensor::new(vec![n, c, oh, ow], out)?,
        entry: TraceEntry::Upsample2x {
            in_shape: shape.to_vec(),
        },
        stat_update: None,
    })
}

fn upsample_backward<S: Scalar>(in_shape: &[usize], grad_out: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let g = grad_out.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![S::zero(); n * c * h * w];
    for nc in 0..n * c {
        let bi = nc * h * w;
        let bo = nc * oh * ow;
        for y in 0..oh {
            for xph in 0..ow {
                let slot = bi + (y / 2) * w + xph / 2;
                dx[slot] = dx[slot] + g[bo + y * ow + xph];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx).expect("upsample backward shape")
}

fn avgpool_forward<S: Scalar>(input: &Tensor<S>) -> Result<LayerOutput<S>, EngineError> {
    let shape = input.shape();
    if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
        return Err(EngineError::shape("avgpool2x forward (even H, W)", &[0, 0, 0, 0], shape));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f64(0.25);
    let x = input.data();
    let mut out = vec![S::zero(); n * c * oh * ow];
    for nc in 0..n * c {
        let bi = nc * h * w;
        let bo = nc * oh * ow;
        for y in 0..oh {
            for xph in 0..ow {
                let tl = bi + (2 * y) * w + 2 * xph;
                let acc = x[tl] + x[tl + 1] + x[tl + w] + x[tl + w + 1];
                out[bo + y * ow + xph] = acc * quarter;
            }
        }
    }
    Ok(LayerOutput {
        output: Tensor::new(vec![n, c, oh, ow], out)?,
        entry: TraceEntry::AvgPool2x {
            in_shape: shape.to_vec(),
        },
        stat_update: None,
    })
}

fn avgpool_backward<S: Scalar>(in_shape: &[usize], grad_out: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f64(0.25);
    let g = grad_out.data();
    let mut dx = vec![S::zero(); n * c * h * w];
    for nc in 0..n * c {
        let bi = nc * h * w;
        let bo = nc * oh * ow;
        for y in 0..oh {
            for xph in 0..ow {
                let share = g[bo + y * ow + xph] * quarter;
                let tl = bi + (2 * y) * w + 2 * xph;
                dx[tl] = dx[tl] + share;
                dx[tl + 1] = dx[tl + 1] + share;
                dx[tl + w] = dx[tl + w] + share;
                dx[tl + w + 1] = dx[tl + w + 1] + share;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx).expect("avgpool backward shape")
}

fn reshape_forward<S: Scalar>(
    input: &Tensor<S>,
    target: &[usize],
) -> Result<LayerOutput<S>, EngineError> {
    let shape = input.shape();
    if shape.is_empty() {
        return Err(EngineError::shape("reshape forward", &[0], shape));
    }
    let per_sample: usize = shape[1..].iter().product();
    let wanted: usize = target.iter().product();
    if per_sample != wanted {
        return Err(EngineError::shape("reshape forward", target, &shape[1..]));
    }
    let mut out_shape = vec![shape[0]];
    out_shape.extend_from_slice(target);
    Ok(LayerOutput {
        output: input.reshaped(&out_shape)?,
        entry: TraceEntry::Reshape {
            in_shape: shape.to_vec(),
        },
        stat_update: None,
    })
}
