use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::conv::{conv_backward, conv_forward, dot, maxpool_backward, maxpool_forward};
use super::lstm::{sequence_backward, sequence_forward, StepCache};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Architecture description of one layer. Shapes always carry a leading batch axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    BatchNorm {
        channels: usize,
        momentum: f64,
        eps: f64,
    },
    Dense {
        inputs: usize,
        units: usize,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
    Flatten,
    Lstm {
        inputs: usize,
        units: usize,
        return_sequences: bool,
    },
    TimeDistributed {
        inner: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Lstm { .. } => "lstm",
            LayerSpec::TimeDistributed { .. } => "time_distributed",
        }
    }

    /// Output shape for a given input shape, or a shape error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: &str| {
            Err(Error::shape(
                format!("{} input {expected}", self.name()),
                input,
            ))
        };
        match self {
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                stride,
            } => {
                if *stride == 0 || *kernel == 0 {
                    return Err(Error::Config(
                        "conv2d kernel and stride must be >= 1".into(),
                    ));
                }
                if input.len() != 4
                    || input[1] != *in_channels
                    || input[2] < *kernel
                    || input[3] < *kernel
                {
                    return bad(&format!("[N, {in_channels}, H>={kernel}, W>={kernel}]"));
                }
                Ok(vec![
                    input[0],
                    *filters,
                    (input[2] - kernel) / stride + 1,
                    (input[3] - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool { size, stride } => {
                if *stride == 0 || *size == 0 {
                    return Err(Error::Config("maxpool size and stride must be >= 1".into()));
                }
                if input.len() != 4 || input[2] < *size || input[3] < *size {
                    return bad(&format!("[N, C, H>={size}, W>={size}]"));
                }
                Ok(vec![
                    input[0],
                    input[1],
                    (input[2] - size) / stride + 1,
                    (input[3] - size) / stride + 1,
                ])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if !(input.len() == 2 || input.len() == 4) || input[1] != *channels {
                    return bad(&format!("[N, {channels}] or [N, {channels}, H, W]"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dense { inputs, units } => {
                if input.len() != 2 || input[1] != *inputs {
                    return bad(&format!("[N, {inputs}]"));
                }
                Ok(vec![input[0], *units])
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 2 {
                    return bad("[N, K]");
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => {
                if input.len() < 2 {
                    return bad("[N, ...]");
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            LayerSpec::Lstm {
                inputs,
                units,
                return_sequences,
            } => {
                if input.len() != 3 || input[2] != *inputs {
                    return bad(&format!("[N, T, {inputs}]"));
                }
                Ok(if *return_sequences {
                    vec![input[0], input[1], *units]
                } else {
                    vec![input[0], *units]
                })
            }
            LayerSpec::TimeDistributed { inner } => {
                if input.len() < 3 {
                    return bad("[N, T, ...]");
                }
                let mut shape = vec![input[0] * input[1]];
                shape.extend_from_slice(&input[2..]);
                for spec in inner {
                    shape = spec.output_shape(&shape)?;
                }
                let mut out = vec![input[0], input[1]];
                out.extend_from_slice(&shape[1..]);
                Ok(out)
            }
        }
    }

    fn own_param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                ..
            } => vec![
                vec![*filters, *in_channels, *kernel, *kernel],
                vec![*filters],
            ],
            LayerSpec::BatchNorm { channels, .. } => vec![vec![*channels], vec![*channels]],
            LayerSpec::Dense { inputs, units } => vec![vec![*units, *inputs], vec![*units]],
            LayerSpec::Lstm { inputs, units, .. } => {
                vec![vec![4 * units, inputs + units], vec![4 * units]]
            }
            _ => Vec::new(),
        }
    }

    /// Shapes of all trainable tensors, nested layers included, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = self.own_param_shapes();
        if let LayerSpec::TimeDistributed { inner } = self {
            for spec in inner {
                shapes.extend(spec.param_shapes());
            }
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub(crate) fn has_active_dropout(&self) -> bool {
        match self {
            LayerSpec::Dropout { rate } => *rate > 0.0,
            LayerSpec::TimeDistributed { inner } => inner.iter().any(|s| s.has_active_dropout()),
            _ => false,
        }
    }
}

/// Intermediate values a forward pass leaves for the matching backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv {
        input: Tensor,
    },
    Relu {
        input: Tensor,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    BatchNorm {
        xhat: Tensor,
        inv_std: Vec<f64>,
        /// Batch mean and variance, present in train mode.
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    },
    Dense {
        input: Tensor,
    },
    Dropout {
        mask: Option<Vec<f64>>,
    },
    Softmax {
        output: Tensor,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    Lstm {
        inputs: usize,
        steps: Vec<Vec<StepCache>>,
    },
    TimeDistributed {
        input_shape: Vec<usize>,
        inner: Vec<Cache>,
    },
}

impl Cache {
    fn kind(&self) -> &'static str {
        match self {
            Cache::Conv { .. } => "conv2d",
            Cache::Relu { .. } => "relu",
            Cache::MaxPool { .. } => "maxpool",
            Cache::BatchNorm { .. } => "batchnorm",
            Cache::Dense { .. } => "dense",
            Cache::Dropout { .. } => "dropout",
            Cache::Softmax { .. } => "softmax",
            Cache::Flatten { .. } => "flatten",
            Cache::Lstm { .. } => "lstm",
            Cache::TimeDistributed { .. } => "time_distributed",
        }
    }
}

/// A layer with its parameters (trainable) and buffers (running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
    pub buffers: Vec<Tensor>,
    pub inner: Vec<Layer>,
}

impl Layer {
    /// Fan-in scaled uniform init (±√(6/fan_in)), zero biases, unit batchnorm scale.
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let uniform = |shape: &[usize], fan_in: usize, rng: &mut R| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            )
            .expect("shape matches")
        };
        let (params, buffers, inner) = match &spec {
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                (
                    vec![
                        uniform(&[*filters, *in_channels, *kernel, *kernel], fan_in, rng),
                        Tensor::zeros(&[*filters]),
                    ],
                    vec![],
                    vec![],
                )
            }
            LayerSpec::Dense { inputs, units } => (
                vec![
                    uniform(&[*units, *inputs], *inputs, rng),
                    Tensor::zeros(&[*units]),
                ],
                vec![],
                vec![],
            ),
            LayerSpec::Lstm { inputs, units, .. } => (
                vec![
                    uniform(&[4 * units, inputs + units], inputs + units, rng),
                    Tensor::zeros(&[4 * units]),
                ],
                vec![],
                vec![],
            ),
            LayerSpec::BatchNorm { channels, .. } => (
                vec![
                    Tensor::filled(&[*channels], 1.0),
                    Tensor::zeros(&[*channels]),
                ],
                vec![
                    Tensor::zeros(&[*channels]),
                    Tensor::filled(&[*channels], 1.0),
                ],
                vec![],
            ),
            LayerSpec::TimeDistributed { inner } => (
                vec![],
                vec![],
                inner.iter().map(|s| Layer::new(s.clone(), rng)).collect(),
            ),
            _ => (vec![], vec![], vec![]),
        };
        Self {
            spec,
            params,
            buffers,
            inner,
        }
    }

    /// All trainable tensors, nested layers included, in storage order.
    pub fn params_flat(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.params.iter().collect();
        for l in &self.inner {
            out.extend(l.params_flat());
        }
        out
    }

    pub fn params_flat_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.params.iter_mut().collect();
        for l in &mut self.inner {
            out.extend(l.params_flat_mut());
        }
        out
    }

    pub fn buffers_flat(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.buffers.iter().collect();
        for l in &self.inner {
            out.extend(l.buffers_flat());
        }
        out
    }

    pub fn buffers_flat_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.buffers.iter_mut().collect();
        for l in &mut self.inner {
            out.extend(l.buffers_flat_mut());
        }
        out
    }

    /// Forward pass. Batchnorm running statistics update in train mode.
    pub fn forward(
        &mut self,
        input: &Tensor,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor, Cache)> {
        let (out, cache) = self.forward_ref(input, mode, rng)?;
        self.absorb_stats(&cache);
        Ok((out, cache))
    }

    /// Fold batch statistics recorded in `cache` into the running buffers.
    pub fn absorb_stats(&mut self, cache: &Cache) {
        match (&self.spec, cache) {
            (
                LayerSpec::BatchNorm { momentum, .. },
                Cache::BatchNorm {
                    batch_stats: Some((mean, var)),
                    ..
                },
            ) => {
                let m = *momentum;
                let (rm, rv) = self.buffers.split_at_mut(1);
                for ch in 0..mean.len() {
                    rm[0].data_mut()[ch] = m * rm[0].data()[ch] + (1.0 - m) * mean[ch];
                    rv[0].data_mut()[ch] = m * rv[0].data()[ch] + (1.0 - m) * var[ch];
                }
            }
            (LayerSpec::TimeDistributed { .. }, Cache::TimeDistributed { inner, .. }) => {
                for (layer, c) in self.inner.iter_mut().zip(inner) {
                    layer.absorb_stats(c);
                }
            }
            _ => {}
        }
    }

    /// Forward pass without touching running statistics.
    pub fn forward_ref(
        &self,
        input: &Tensor,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor, Cache)> {
        let out_shape = self.spec.output_shape(input.shape())?;
        let result = match &self.spec {
            LayerSpec::Conv2d { stride, .. } => (
                conv_forward(input, &self.params[0], &self.params[1], *stride),
                Cache::Conv {
                    input: input.clone(),
                },
            ),
            LayerSpec::Relu => {
                let mut out = input.clone();
                out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                (
                    out,
                    Cache::Relu {
                        input: input.clone(),
                    },
                )
            }
            LayerSpec::MaxPool { size, stride } => {
                let (out, argmax) = maxpool_forward(input, *size, *stride);
                (
                    out,
                    Cache::MaxPool {
                        input_shape: input.shape().to_vec(),
                        argmax,
                    },
                )
            }
            LayerSpec::BatchNorm { eps, .. } => {
                batchnorm_forward(input, &self.params, &self.buffers, *eps, mode)
            }
            LayerSpec::Dense { units, inputs } => {
                let n = input.shape()[0];
                let (w, b) = (self.params[0].data(), self.params[1].data());
                let mut out = Tensor::zeros(&[n, *units]);
                for s in 0..n {
                    let x = &input.data()[s * inputs..(s + 1) * inputs];
                    for u in 0..*units {
                        out.data_mut()[s * units + u] =
                            b[u] + dot(&w[u * inputs..(u + 1) * inputs], x);
                    }
                }
                (
                    out,
                    Cache::Dense {
                        input: input.clone(),
                    },
                )
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Train && *rate > 0.0 {
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..input.len())
                        .map(|_| {
                            if rng.random::<f64>() < *rate {
                                0.0
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let mut out = input.clone();
                    out.data_mut()
                        .iter_mut()
                        .zip(&mask)
                        .for_each(|(v, m)| *v *= m);
                    (out, Cache::Dropout { mask: Some(mask) })
                } else {
                    (input.clone(), Cache::Dropout { mask: None })
                }
            }
            LayerSpec::Softmax => {
                let k = input.shape()[1];
                let mut out = input.clone();
                for row in out.data_mut().chunks_mut(k) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        sum += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= sum);
                }
                (out.clone(), Cache::Softmax { output: out })
            }
            LayerSpec::Flatten => (
                input.clone().reshape(&out_shape)?,
                Cache::Flatten {
                    input_shape: input.shape().to_vec(),
                },
            ),
            LayerSpec::Lstm {
                inputs,
                units,
                return_sequences,
            } => {
                let (out, steps) = sequence_forward(
                    input,
                    *units,
                    *return_sequences,
                    &self.params[0],
                    &self.params[1],
                )?;
                (
                    out,
                    Cache::Lstm {
                        inputs: *inputs,
                        steps,
                    },
                )
            }
            LayerSpec::TimeDistributed { .. } => {
                let shape = input.shape();
                let mut folded = vec![shape[0] * shape[1]];
                folded.extend_from_slice(&shape[2..]);
                let mut x = input.clone().reshape(&folded)?;
                let mut caches = Vec::with_capacity(self.inner.len());
                for layer in &self.inner {
                    let (y, c) = layer.forward_ref(&x, mode, rng)?;
                    caches.push(c);
                    x = y;
                }
                (
                    x.reshape(&out_shape)?,
                    Cache::TimeDistributed {
                        input_shape: shape.to_vec(),
                        inner: caches,
                    },
                )
            }
        };
        Ok(result)
    }

    /// Backward pass: input gradient plus gradients for [`Layer::params_flat`].
    pub fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (dx, grads) = self.backward_impl(cache, grad_out, true)?;
        Ok((dx.expect("input gradient requested"), grads))
    }

    pub(crate) fn backward_impl(
        &self,
        cache: &Cache,
        grad_out: &Tensor,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        let mismatch = || {
            Error::Internal(format!(
                "{} cache passed to {} layer",
                cache.kind(),
                self.spec.name()
            ))
        };
        Ok(match (&self.spec, cache) {
            (LayerSpec::Conv2d { stride, .. }, Cache::Conv { input }) => {
                let (dx, dw, db) =
                    conv_backward(input, &self.params[0], grad_out, *stride, need_input_grad);
                (dx, vec![dw, db])
            }
            (LayerSpec::Relu, Cache::Relu { input }) => {
                let mut dx = grad_out.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(input.data())
                    .for_each(|(g, x)| {
                        if *x <= 0.0 {
                            *g = 0.0
                        }
                    });
                (Some(dx), vec![])
            }
            (
                LayerSpec::MaxPool { .. },
                Cache::MaxPool {
                    input_shape,
                    argmax,
                },
            ) => (
                Some(maxpool_backward(input_shape, argmax, grad_out)),
                vec![],
            ),
            (
                LayerSpec::BatchNorm { .. },
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            ) => {
                let train = batch_stats.is_some();
                let (dx, dgamma, dbeta) =
                    batchnorm_backward(xhat, inv_std, train, &self.params[0], grad_out);
                (Some(dx), vec![dgamma, dbeta])
            }
            (LayerSpec::Dense { inputs, units }, Cache::Dense { input }) => {
                let n = input.shape()[0];
                let w = self.params[0].data();
                let mut dw = Tensor::zeros(self.params[0].shape());
                let mut db = Tensor::zeros(&[*units]);
                let mut dx = Tensor::zeros(input.shape());
                for s in 0..n {
                    let x = &input.data()[s * inputs..(s + 1) * inputs];
                    for u in 0..*units {
                        let g = grad_out.data()[s * units + u];
                        db.data_mut()[u] += g;
                        if g == 0.0 {
                            continue;
                        }
                        let row = &mut dw.data_mut()[u * inputs..(u + 1) * inputs];
                        row.iter_mut().zip(x).for_each(|(d, xv)| *d += g * xv);
                        let dxr = &mut dx.data_mut()[s * inputs..(s + 1) * inputs];
                        dxr.iter_mut()
                            .zip(&w[u * inputs..(u + 1) * inputs])
                            .for_each(|(d, wv)| *d += g * wv);
                    }
                }
                (Some(dx), vec![dw, db])
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
                let mut dx = grad_out.clone();
                if let Some(mask) = mask {
                    dx.data_mut()
                        .iter_mut()
                        .zip(mask)
                        .for_each(|(g, m)| *g *= m);
                }
                (Some(dx), vec![])
            }
            (LayerSpec::Softmax, Cache::Softmax { output }) => {
                let k = output.shape()[1];
                let mut dx = grad_out.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(k).zip(output.data().chunks(k)) {
                    let inner: f64 = drow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    drow.iter_mut()
                        .zip(yrow)
                        .for_each(|(g, y)| *g = y * (*g - inner));
                }
                (Some(dx), vec![])
            }
            (LayerSpec::Flatten, Cache::Flatten { input_shape }) => {
                (Some(grad_out.clone().reshape(input_shape)?), vec![])
            }
            (
                LayerSpec::Lstm {
                    units,
                    return_sequences,
                    ..
                },
                Cache::Lstm { inputs, steps },
            ) => {
                let (dx, dw, db) = sequence_backward(
                    steps,
                    *inputs,
                    *units,
                    *return_sequences,
                    &self.params[0],
                    grad_out,
                );
                (Some(dx), vec![dw, db])
            }
            (LayerSpec::TimeDistributed { .. }, Cache::TimeDistributed { input_shape, inner }) => {
                if inner.len() != self.inner.len() {
                    return Err(mismatch());
                }
                let mut folded_out = vec![input_shape[0] * input_shape[1]];
                folded_out.extend_from_slice(&grad_out.shape()[2..]);
                let mut g = grad_out.clone().reshape(&folded_out)?;
                let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.inner.len());
                for (i, (layer, c)) in self.inner.iter().zip(inner).enumerate().rev() {
                    let need = need_input_grad || i > 0;
                    let (dx, grads) = layer.backward_impl(c, &g, need)?;
                    per_layer.push(grads);
                    if let Some(dx) = dx {
                        g = dx;
                    }
                }
                per_layer.reverse();
                let dx = if need_input_grad {
                    Some(g.reshape(input_shape)?)
                } else {
                    None
                };
                (dx, per_layer.into_iter().flatten().collect())
            }
            _ => return Err(mismatch()),
        })
    }
}

fn batchnorm_forward(
    input: &Tensor,
    params: &[Tensor],
    buffers: &[Tensor],
    eps: f64,
    mode: Mode,
) -> (Tensor, Cache) {
    let shape = input.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let count = (n * spatial) as f64;
    let x = input.data();
    let (gamma, beta) = (params[0].data(), params[1].data());
    let train = mode == Mode::Train;
    let mut inv_std = vec![0.0; c];
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    if train {
        for ch in 0..c {
            let mut sum = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                sum += x[base..base + spatial].iter().sum::<f64>();
            }
            mean[ch] = sum / count;
            let mut sq = 0.0;
            for s in 0..n {
                let base = (s * c + ch) * spatial;
                sq += x[base..base + spatial]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = sq / count;
            inv_std[ch] = 1.0 / (var[ch] + eps).sqrt();
        }
    } else {
        for ch in 0..c {
            mean[ch] = buffers[0].data()[ch];
            inv_std[ch] = 1.0 / (buffers[1].data()[ch] + eps).sqrt();
        }
    }
    let mut xhat = Tensor::zeros(shape);
    let mut out = Tensor::zeros(shape);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = h;
                out.data_mut()[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let batch_stats = train.then_some((mean, var));
    (
        out,
        Cache::BatchNorm {
            xhat,
            inv_std,
            batch_stats,
        },
    )
}

fn batchnorm_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    train: bool,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let shape = xhat.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let count = (n * spatial) as f64;
    let (xh, g) = (xhat.data(), grad_out.data());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(shape);
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
            }
        }
        dgamma.data_mut()[ch] = sum_gx;
        dbeta.data_mut()[ch] = sum_g;
        let gm = gamma.data()[ch];
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                dx.data_mut()[i] = if train {
                    gm * inv_std[ch] * (g[i] - sum_g / count - xh[i] * sum_gx / count)
                } else {
                    gm * inv_std[ch] * g[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn conv(c: usize, f: usize, k: usize, s: usize) -> LayerSpec {
        LayerSpec::Conv2d {
            in_channels: c,
            filters: f,
            kernel: k,
            stride: s,
        }
    }

    #[test]
    fn shape_algebra_table() {
        let td = LayerSpec::TimeDistributed {
            inner: vec![
                conv(3, 4, 3, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2, stride: 2 },
                LayerSpec::Flatten,
            ],
        };
        let cases: Vec<(LayerSpec, Vec<usize>, Option<Vec<usize>>)> = vec![
            (
                conv(3, 8, 3, 2),
                vec![1, 3, 150, 150],
                Some(vec![1, 8, 74, 74]),
            ),
            (
                conv(3, 8, 3, 1),
                vec![2, 3, 64, 64],
                Some(vec![2, 8, 62, 62]),
            ),
            (conv(1, 2, 3, 1), vec![4, 1, 6, 6], Some(vec![4, 2, 4, 4])),
            (conv(3, 8, 5, 3), vec![1, 3, 17, 11], Some(vec![1, 8, 5, 3])),
            (conv(3, 8, 3, 1), vec![1, 4, 8, 8], None),
            (conv(3, 8, 9, 1), vec![1, 3, 8, 8], None),
            (
                LayerSpec::MaxPool { size: 2, stride: 2 },
                vec![1, 8, 62, 62],
                Some(vec![1, 8, 31, 31]),
            ),
            (
                LayerSpec::MaxPool { size: 2, stride: 2 },
                vec![1, 8, 31, 31],
                Some(vec![1, 8, 15, 15]),
            ),
            (
                LayerSpec::MaxPool { size: 3, stride: 1 },
                vec![1, 2, 5, 5],
                Some(vec![1, 2, 3, 3]),
            ),
            (
                LayerSpec::MaxPool { size: 2, stride: 2 },
                vec![1, 2, 1, 1],
                None,
            ),
            (
                LayerSpec::batch_norm(8),
                vec![3, 8, 4, 4],
                Some(vec![3, 8, 4, 4]),
            ),
            (LayerSpec::batch_norm(8), vec![3, 8], Some(vec![3, 8])),
            (LayerSpec::batch_norm(8), vec![3, 7, 4, 4], None),
            (
                LayerSpec::Dense {
                    inputs: 12,
                    units: 5,
                },
                vec![2, 12],
                Some(vec![2, 5]),
            ),
            (
                LayerSpec::Dense {
                    inputs: 12,
                    units: 5,
                },
                vec![2, 11],
                None,
            ),
            (LayerSpec::Relu, vec![2, 3, 4], Some(vec![2, 3, 4])),
            (
                LayerSpec::Dropout { rate: 0.1 },
                vec![5, 7],
                Some(vec![5, 7]),
            ),
            (LayerSpec::Softmax, vec![5, 10], Some(vec![5, 10])),
            (LayerSpec::Softmax, vec![5, 2, 2], None),
            (LayerSpec::Flatten, vec![2, 3, 4, 5], Some(vec![2, 60])),
            (
                LayerSpec::Lstm {
                    inputs: 7,
                    units: 4,
                    return_sequences: true,
                },
                vec![2, 5, 7],
                Some(vec![2, 5, 4]),
            ),
            (
                LayerSpec::Lstm {
                    inputs: 7,
                    units: 4,
                    return_sequences: false,
                },
                vec![2, 5, 7],
                Some(vec![2, 4]),
            ),
            (
                LayerSpec::Lstm {
                    inputs: 7,
                    units: 4,
                    return_sequences: false,
                },
                vec![2, 7],
                None,
            ),
            (td.clone(), vec![2, 5, 3, 12, 12], Some(vec![2, 5, 100])),
            (td, vec![2, 3, 12, 12], None),
        ];
        assert!(cases.len() >= 20);
        for (spec, input, expected) in cases {
            let got = spec.output_shape(&input);
            match expected {
                Some(e) => assert_eq!(got.unwrap(), e, "{spec:?} on {input:?}"),
                None => assert!(got.is_err(), "{spec:?} on {input:?} should fail"),
            }
        }
    }

    #[test]
    fn relu_forward_backward() {
        let mut layer = Layer::new(LayerSpec::Relu, &mut rng());
        let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, cache) = layer.forward(&x, Mode::Train, &mut rng()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let (dx, _) = layer
            .backward(&cache, &Tensor::filled(&[1, 3], 1.0))
            .unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_symmetric_and_normalized() {
        let mut layer = Layer::new(LayerSpec::Softmax, &mut rng());
        let (y, _) = layer
            .forward(&Tensor::zeros(&[1, 2]), Mode::Infer, &mut rng())
            .unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let x = Tensor::new(
            vec![2, 4],
            vec![1000.0, -3.0, 2.0, 0.5, -700.0, 1e-3, 40.0, 39.0],
        )
        .unwrap();
        let (y, _) = layer.forward(&x, Mode::Infer, &mut rng()).unwrap();
        for row in y.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn dense_zero_grad_gives_zero_grads() {
        let mut layer = Layer::new(
            LayerSpec::Dense {
                inputs: 4,
                units: 3,
            },
            &mut rng(),
        );
        let x = Tensor::new(vec![2, 4], (0..8).map(|i| i as f64).collect()).unwrap();
        let (_, cache) = layer.forward(&x, Mode::Train, &mut rng()).unwrap();
        let (dx, grads) = layer.backward(&cache, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(dx.data().iter().all(|v| *v == 0.0));
        assert!(grads.iter().all(|g| g.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn dropout_train_scales_and_infer_is_identity() {
        let mut layer = Layer::new(LayerSpec::Dropout { rate: 0.5 }, &mut rng());
        let x = Tensor::filled(&[1, 1000], 1.0);
        let (y, cache) = layer.forward(&x, Mode::Train, &mut rng()).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0 || *v == 2.0));
        let kept = y.data().iter().filter(|v| **v > 0.0).count();
        assert!((400..600).contains(&kept));
        let (dx, _) = layer
            .backward(&cache, &Tensor::filled(&[1, 1000], 1.0))
            .unwrap();
        assert_eq!(dx.data(), y.data());
        let (yi, _) = layer.forward(&x, Mode::Infer, &mut rng()).unwrap();
        assert_eq!(yi, x);
    }

    #[test]
    fn batchnorm_infer_independent_of_batch() {
        let mut layer = Layer::new(LayerSpec::batch_norm(2), &mut rng());
        let batch = Tensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0, 2.0, 7.0]).unwrap();
        layer.forward(&batch, Mode::Train, &mut rng()).unwrap();
        let single = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let (a, _) = layer.forward(&single, Mode::Infer, &mut rng()).unwrap();
        let (b, _) = layer.forward(&batch, Mode::Infer, &mut rng()).unwrap();
        assert_eq!(a.data(), &b.data()[..2]);
    }

    #[test]
    fn mismatched_cache_is_internal_error() {
        let mut relu = Layer::new(LayerSpec::Relu, &mut rng());
        let dense = Layer::new(
            LayerSpec::Dense {
                inputs: 2,
                units: 2,
            },
            &mut rng(),
        );
        let (_, cache) = relu
            .forward(&Tensor::zeros(&[1, 2]), Mode::Train, &mut rng())
            .unwrap();
        assert!(matches!(
            dense.backward(&cache, &Tensor::zeros(&[1, 2])),
            Err(Error::Internal(_))
        ));
    }
}
