//! Checkpoint file format:
//!
//! ```text
//! "RULEEDIT"            8 bytes
//! version               u32 little-endian
//! header length         u64 little-endian
//! header                JSON: spec, metadata, tensor table
//! payload               f64 little-endian, tensors in table order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, ConvBlock, Dense, LayerParams, Pool, Tensor};

pub const MAGIC: &[u8; 8] = b"RULEEDIT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub training_seed: u64,
    pub dataset_fingerprint: String,
    /// Free-form provenance, e.g. "base" or "edit layer 4".
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerDesc {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        pad: usize,
        skip_from: Option<usize>,
        bn_eps: f64,
    },
    Pool(Pool),
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Flatten,
}

#[derive(Serialize, Deserialize)]
struct SpecHeader {
    input_shape: [usize; 3],
    num_classes: usize,
    editable: Vec<usize>,
    layers: Vec<LayerDesc>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: CheckpointMeta,
    spec: SpecHeader,
    tensors: Vec<TensorEntry>,
}

fn describe(model: &Model) -> (SpecHeader, Vec<TensorEntry>, Vec<f64>) {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
        entries.push(TensorEntry { name, shape });
        payload.extend_from_slice(data);
    };
    let mut layers = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        layers.push(match layer {
            LayerParams::Conv(c) => {
                let m = c.out_channels();
                push(format!("{i}.weight"), c.weight.shape().to_vec(), c.weight.data());
                push(format!("{i}.bias"), vec![m], &c.bias);
                push(format!("{i}.bn_gamma"), vec![m], &c.bn.gamma);
                push(format!("{i}.bn_beta"), vec![m], &c.bn.beta);
                push(format!("{i}.bn_mean"), vec![m], &c.bn.mean);
                push(format!("{i}.bn_var"), vec![m], &c.bn.var);
                let (kh, kw) = c.kernel();
                LayerDesc::Conv {
                    out_channels: m,
                    in_channels: c.in_channels(),
                    kernel: [kh, kw],
                    stride: c.stride,
                    pad: c.pad,
                    skip_from: c.skip_from,
                    bn_eps: c.bn.eps,
                }
            }
            LayerParams::Pool(p) => LayerDesc::Pool(*p),
            LayerParams::Dense(d) => {
                push(format!("{i}.weight"), d.weight.shape().to_vec(), d.weight.data());
                push(format!("{i}.bias"), vec![d.bias.len()], &d.bias);
                LayerDesc::Dense { inputs: d.weight.shape()[1], outputs: d.bias.len() }
            }
            LayerParams::Flatten => LayerDesc::Flatten,
        });
    }
    let spec = SpecHeader {
        input_shape: model.input_shape,
        num_classes: model.num_classes,
        editable: model.editable.clone(),
        layers,
    };
    (spec, entries, payload)
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let (spec, tensors, payload) = describe(&ckpt.model);
    let header = Header { format_version: FORMAT_VERSION, meta: ckpt.meta.clone(), spec, tensors };
    let hjson = serde_json::to_vec_pretty(&header).map_err(|e| Error::Serde(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + hjson.len() + payload.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&hjson);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses bytes produced by [`encode_checkpoint`]. `origin` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<ModelCheckpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic(origin.to_path_buf()));
    }
    if bytes.len() < 20 {
        return Err(Error::Truncated("checkpoint preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: FORMAT_VERSION });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated("checkpoint header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..hend]).map_err(|e| Error::Serde(format!("checkpoint header: {e}")))?;
    let payload = &bytes[hend..];
    let needed: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != needed * 8 {
        return Err(Error::Truncated(format!(
            "payload has {} bytes, tensor table needs {}",
            payload.len(),
            needed * 8
        )));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut tensors = header.tensors.iter();
    let mut take = |expect: &str| -> Result<Tensor> {
        let entry = tensors.next().ok_or_else(|| Error::Serde(format!("tensor table ends before {expect}")))?;
        if !entry.name.ends_with(expect) {
            return Err(Error::Serde(format!("expected tensor {expect}, found {}", entry.name)));
        }
        let n = entry.shape.iter().product();
        Tensor::new(entry.shape.clone(), values.by_ref().take(n).collect())
    };

    let mut layers = Vec::with_capacity(header.spec.layers.len());
    for desc in &header.spec.layers {
        layers.push(match desc {
            LayerDesc::Conv { stride, pad, skip_from, bn_eps, .. } => {
                let weight = take("weight")?;
                let bias = take("bias")?.into_data();
                let gamma = take("bn_gamma")?.into_data();
                let beta = take("bn_beta")?.into_data();
                let mean = take("bn_mean")?.into_data();
                let var = take("bn_var")?.into_data();
                LayerParams::Conv(ConvBlock {
                    weight,
                    bias,
                    bn: BatchNorm { gamma, beta, mean, var, eps: *bn_eps },
                    stride: *stride,
                    pad: *pad,
                    skip_from: *skip_from,
                })
            }
            LayerDesc::Pool(p) => LayerParams::Pool(*p),
            LayerDesc::Dense { .. } => {
                let weight = take("weight")?;
                let bias = take("bias")?.into_data();
                LayerParams::Dense(Dense { weight, bias })
            }
            LayerDesc::Flatten => LayerParams::Flatten,
        });
    }
    let model = Model {
        input_shape: header.spec.input_shape,
        num_classes: header.spec.num_classes,
        layers,
        editable: header.spec.editable,
    };
    model.validate()?;
    Ok(ModelCheckpoint { model, meta: header.meta })
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    decode_checkpoint(&bytes, path)
}
