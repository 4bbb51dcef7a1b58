//! Weight file: 8-byte magic, u64 LE manifest length, JSON manifest, then every
//! tensor in manifest order as little-endian f64.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerSpec};
use super::sequential::{AuxConcat, Sequential};
use super::Tensor;
use crate::error::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 8] = b"ETGW0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format: String,
    /// Caller-defined model description (kind, input geometry, preprocessing).
    pub model: serde_json::Value,
    pub layers: Vec<LayerSpec>,
    pub aux: Option<AuxConcat>,
    pub tensors: Vec<TensorEntry>,
}

fn entries(layer: &Layer, prefix: &str, out: &mut Vec<TensorEntry>) {
    for (j, p) in layer.params.iter().enumerate() {
        out.push(TensorEntry {
            name: format!("{prefix}.{}.param{j}", layer.spec.name()),
            shape: p.shape().to_vec(),
        });
    }
    for (j, b) in layer.buffers.iter().enumerate() {
        out.push(TensorEntry {
            name: format!("{prefix}.{}.buffer{j}", layer.spec.name()),
            shape: b.shape().to_vec(),
        });
    }
    for (k, inner) in layer.inner.iter().enumerate() {
        entries(inner, &format!("{prefix}.{k}"), out);
    }
}

fn tensors_in_order(layer: &Layer) -> Vec<&Tensor> {
    let mut out: Vec<&Tensor> = layer.params.iter().chain(&layer.buffers).collect();
    for inner in &layer.inner {
        out.extend(tensors_in_order(inner));
    }
    out
}

fn tensors_in_order_mut(layer: &mut Layer) -> Vec<&mut Tensor> {
    let mut out: Vec<&mut Tensor> = layer
        .params
        .iter_mut()
        .chain(layer.buffers.iter_mut())
        .collect();
    for inner in &mut layer.inner {
        out.extend(tensors_in_order_mut(inner));
    }
    out
}

pub fn encode_weights(net: &Sequential, model: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        entries(l, &format!("layer{i}"), &mut tensors);
    }
    let manifest = WeightManifest {
        format: String::from_utf8_lossy(WEIGHT_MAGIC).into_owned(),
        model,
        layers: net.specs(),
        aux: net.aux,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * net.param_count());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for l in &net.layers {
        for t in tensors_in_order(l) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<(Sequential, WeightManifest)> {
    let corrupt = |what: &str| Error::Data(format!("weight file: {what}"));
    if bytes.len() < 16 || &bytes[..8] != WEIGHT_MAGIC {
        return Err(corrupt("bad magic header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: WeightManifest = serde_json::from_slice(body)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layers: Vec<Layer> = manifest
        .layers
        .iter()
        .map(|s| Layer::new(s.clone(), &mut rng))
        .collect();
    let mut net = Sequential::from_layers(layers, manifest.aux);
    let mut expected = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        entries(l, &format!("layer{i}"), &mut expected);
    }
    if expected != manifest.tensors {
        return Err(corrupt("tensor list does not match layer specs"));
    }
    let mut blob = &bytes[16 + len..];
    for l in &mut net.layers {
        for t in tensors_in_order_mut(l) {
            let need = 8 * t.len();
            if blob.len() < need {
                return Err(corrupt("truncated tensor data"));
            }
            for (v, chunk) in t.data_mut().iter_mut().zip(blob[..need].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            blob = &blob[need..];
        }
    }
    if !blob.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((net, manifest))
}

pub fn save_weights(path: &Path, net: &Sequential, model: serde_json::Value) -> Result<()> {
    let bytes = encode_weights(net, model)?;
    crate::fsutil::write_atomic(path, &bytes)
}

pub fn load_weights(path: &Path) -> Result<(Sequential, WeightManifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
    decode_weights(&bytes)
}
