// SPDX-License-Identifier: Apache-2.0

//! `.nnw` weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NNWT" | version: u16 = 1 | header_len: u32 | header: UTF-8 JSON
//! then, for every dense/conv2d layer in order: weights as f32, bias as f32
//! ```
//!
//! The header lists `name`, `input_shape` and `layers`; each layer is an
//! object tagged by `kind`. See `FORMATS.md` at the repository root.

use std::io::{Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::model::{Activation, LayerSpec, NetworkModel};

pub const MAGIC: &[u8; 4] = b"NNWT";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LayerHeader {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default)]
        activation: Activation,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        #[serde(default)]
        activation: Activation,
    },
    Avgpool2d {
        kernel: usize,
        stride: usize,
    },
    Maxpool2d {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Flatten,
}

/// Canonical byte encoding of a model.
pub fn encode(model: &NetworkModel) -> Vec<u8> {
    let header = Header {
        name: model.name().to_string(),
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().iter().map(layer_header).collect(),
    };
    let mut out = Vec::new();
    codec::write_preamble(&mut out, MAGIC, VERSION, &header).expect("in-memory write");
    for layer in model.layers() {
        if let LayerSpec::Dense { weights, bias, .. } | LayerSpec::Conv2d { weights, bias, .. } = layer {
            codec::write_f32s(&mut out, weights).expect("in-memory write");
            codec::write_f32s(&mut out, bias).expect("in-memory write");
        }
    }
    out
}

fn layer_header(layer: &LayerSpec) -> LayerHeader {
    match layer {
        LayerSpec::Dense {
            inputs,
            outputs,
            activation,
            ..
        } => LayerHeader::Dense {
            inputs: *inputs,
            outputs: *outputs,
            activation: *activation,
        },
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            activation,
            ..
        } => LayerHeader::Conv2d {
            in_channels: *in_channels,
            out_channels: *out_channels,
            kernel: *kernel,
            stride: *stride,
            activation: *activation,
        },
        LayerSpec::AvgPool2d { kernel, stride } => LayerHeader::Avgpool2d {
            kernel: *kernel,
            stride: *stride,
        },
        LayerSpec::MaxPool2d { kernel, stride } => LayerHeader::Maxpool2d {
            kernel: *kernel,
            stride: *stride,
        },
        LayerSpec::Relu => LayerHeader::Relu,
        LayerSpec::Flatten => LayerHeader::Flatten,
    }
}

/// Parses and validates a model. The fingerprint is the hash of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<NetworkModel> {
    const WHAT: &str = "nnw";
    let mut cur = Cursor::new(bytes);
    let header: Header = codec::read_preamble(&mut cur, MAGIC, VERSION, WHAT)?;

    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, lh) in header.layers.into_iter().enumerate() {
        let part = format!("weights of layer {i}");
        let layer = match lh {
            LayerHeader::Dense {
                inputs,
                outputs,
                activation,
            } => {
                let n = checked_len(&[inputs, outputs], i)?;
                let weights = codec::read_f32s(&mut cur, n, WHAT, &part)?;
                let bias = codec::read_f32s(&mut cur, outputs, WHAT, &part)?;
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    activation,
                    weights,
                    bias,
                }
            }
            LayerHeader::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                activation,
            } => {
                let n = checked_len(&[out_channels, in_channels, kernel, kernel], i)?;
                let weights = codec::read_f32s(&mut cur, n, WHAT, &part)?;
                let bias = codec::read_f32s(&mut cur, out_channels, WHAT, &part)?;
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    activation,
                    weights,
                    bias,
                }
            }
            LayerHeader::Avgpool2d { kernel, stride } => LayerSpec::AvgPool2d { kernel, stride },
            LayerHeader::Maxpool2d { kernel, stride } => LayerSpec::MaxPool2d { kernel, stride },
            LayerHeader::Relu => LayerSpec::Relu,
            LayerHeader::Flatten => LayerSpec::Flatten,
        };
        layers.push(layer);
    }
    codec::expect_eof(&mut cur, WHAT)?;

    let mut model = NetworkModel::unfingerprinted(header.name, header.input_shape, layers)?;
    model.set_fingerprint(crate::fingerprint::of_bytes(bytes));
    Ok(model)
}

// Guards against absurd header values before allocating.
fn checked_len(dims: &[usize], layer: usize) -> Result<usize> {
    const LIMIT: usize = 1 << 28;
    dims.iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .filter(|n| *n <= LIMIT)
        .ok_or_else(|| Error::Format(format!("nnw: layer {layer} declares an oversized weight tensor")))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save_model(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
