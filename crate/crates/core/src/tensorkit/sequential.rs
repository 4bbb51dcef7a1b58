use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Cache, Layer, LayerSpec, Mode};
use super::Tensor;
use crate::error::{Error, Result};

/// Concatenate an auxiliary feature tensor onto the activations produced by the
/// first `after` layers, along the last axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxConcat {
    pub after: usize,
    pub width: usize,
}

/// Layer stack with an optional auxiliary-input join point.
#[derive(Debug, Clone)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    pub aux: Option<AuxConcat>,
    trace: Option<Trace>,
}

impl PartialEq for Sequential {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.aux == other.aux
    }
}

fn concat_last(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::shape(sa, sb));
    }
    let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
    let rows = a.len() / wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * wa..(r + 1) * wa]);
        data.extend_from_slice(&b.data()[r * wb..(r + 1) * wb]);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = wa + wb;
    Tensor::new(shape, data)
}

fn split_last(g: &Tensor, wa: usize) -> Result<Tensor> {
    let s = g.shape();
    let w = s[s.len() - 1];
    let rows = g.len() / w;
    let mut data = Vec::with_capacity(rows * wa);
    for r in 0..rows {
        data.extend_from_slice(&g.data()[r * w..r * w + wa]);
    }
    let mut shape = s.to_vec();
    *shape.last_mut().unwrap() = wa;
    Tensor::new(shape, data)
}

impl Sequential {
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], aux: Option<AuxConcat>, rng: &mut R) -> Self {
        Self {
            layers: specs.iter().map(|s| Layer::new(s.clone(), rng)).collect(),
            aux,
            trace: None,
        }
    }

    pub fn from_layers(layers: Vec<Layer>, aux: Option<AuxConcat>) -> Self {
        Self {
            layers,
            aux,
            trace: None,
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Output shape for an input shape, including the auxiliary join.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(a) = self.aux {
                if a.after == i {
                    *shape.last_mut().unwrap() += a.width;
                }
            }
            shape = l.spec.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params_flat()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_flat_mut())
            .collect()
    }

    /// Index of the owning layer for each entry of [`Sequential::params`].
    pub fn param_owners(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| std::iter::repeat_n(i, l.params_flat().len()))
            .collect()
    }

    pub fn buffers(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.buffers_flat()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.buffers_flat_mut())
            .collect()
    }

    pub fn has_active_dropout(&self) -> bool {
        self.layers.iter().any(|l| l.spec.has_active_dropout())
    }

    /// Forward pass without side effects; the returned trace feeds
    /// [`Sequential::backprop`].
    pub fn run(
        &self,
        input: &Tensor,
        aux: Option<&Tensor>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor, Trace)> {
        match (self.aux, aux) {
            (Some(_), None) => {
                return Err(Error::Argument("model expects an auxiliary input".into()))
            }
            (None, Some(_)) => {
                return Err(Error::Argument("model takes no auxiliary input".into()))
            }
            (Some(a), Some(t)) if t.shape().last() != Some(&a.width) => {
                return Err(Error::shape(format!("[.., {}]", a.width), t.shape()))
            }
            _ => {}
        }
        let mut trace = Trace {
            caches: Vec::with_capacity(self.layers.len()),
            concat_width: 0,
        };
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if let (Some(a), Some(t)) = (self.aux, aux) {
                if a.after == i {
                    trace.concat_width = *x.shape().last().unwrap();
                    x = concat_last(&x, t)?;
                }
            }
            let (y, cache) = layer.forward_ref(&x, mode, rng)?;
            if !y.is_finite() {
                return Err(Error::Numeric {
                    location: format!("layer {i} ({})", layer.spec.name()),
                    detail: "non-finite activation".into(),
                });
            }
            trace.caches.push(cache);
            x = y;
        }
        Ok((x, trace))
    }

    /// Forward pass that updates running statistics (train mode) and keeps the
    /// trace for the next [`Sequential::backward`].
    pub fn forward(
        &mut self,
        input: &Tensor,
        aux: Option<&Tensor>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        self.trace = None;
        let (out, trace) = self.run(input, aux, mode, rng)?;
        for (layer, cache) in self.layers.iter_mut().zip(&trace.caches) {
            layer.absorb_stats(cache);
        }
        self.trace = Some(trace);
        Ok(out)
    }

    /// Inference-mode output.
    pub fn predict(&self, input: &Tensor, aux: Option<&Tensor>) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.run(input, aux, Mode::Infer, &mut rng)?.0)
    }

    /// Backpropagate through the last [`Sequential::forward`].
    pub fn backward(
        &self,
        grad_out: &Tensor,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        let trace = self.trace.as_ref().ok_or_else(|| {
            Error::State("backward called without a matching forward pass".into())
        })?;
        self.backprop(trace, grad_out, need_input_grad)
    }

    /// Input gradient (when requested) and gradients aligned with
    /// [`Sequential::params`] for the pass recorded in `trace`.
    pub fn backprop(
        &self,
        trace: &Trace,
        grad_out: &Tensor,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::State("trace does not match this model".into()));
        }
        let mut g = grad_out.clone();
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let need = need_input_grad || i > 0;
            let (dx, grads) = self.layers[i].backward_impl(&trace.caches[i], &g, need)?;
            for t in dx.iter().chain(grads.iter()) {
                if !t.is_finite() {
                    return Err(Error::Numeric {
                        location: format!("layer {i} ({})", self.layers[i].spec.name()),
                        detail: "non-finite gradient".into(),
                    });
                }
            }
            per_layer.push(grads);
            if let Some(dx) = dx {
                g = dx;
            }
            if let Some(a) = self.aux {
                if a.after == i && need {
                    g = split_last(&g, trace.concat_width)?;
                }
            }
        }
        per_layer.reverse();
        Ok((
            need_input_grad.then_some(g),
            per_layer.into_iter().flatten().collect(),
        ))
    }
}

/// Per-layer caches of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<Cache>,
    concat_width: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aux_concat_shapes() {
        let specs = vec![
            LayerSpec::Dense {
                inputs: 3,
                units: 4,
            },
            LayerSpec::Dense {
                inputs: 6,
                units: 1,
            },
        ];
        let mut net = Sequential::new(
            &specs,
            Some(AuxConcat { after: 1, width: 2 }),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert_eq!(net.output_shape(&[5, 3]).unwrap(), vec![5, 1]);
        let x = Tensor::filled(&[5, 3], 0.5);
        let a = Tensor::filled(&[5, 2], -1.0);
        let y = net
            .forward(&x, Some(&a), Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(y.shape(), &[5, 1]);
        let (dx, grads) = net.backward(&Tensor::filled(&[5, 1], 1.0), true).unwrap();
        assert_eq!(dx.unwrap().shape(), &[5, 3]);
        assert_eq!(grads.len(), 4);
        assert!(net
            .forward(&x, None, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let net = Sequential::new(&[LayerSpec::Relu], None, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(
            net.backward(&Tensor::zeros(&[1, 1]), true),
            Err(Error::State(_))
        ));
    }
}
