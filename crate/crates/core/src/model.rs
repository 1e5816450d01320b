// SPDX-License-Identifier: Apache-2.0

//! Small sequential networks and instrumented forward inference.
//!
//! Every layer reports one activation vector per input. Convolution and
//! pooling layers are reduced to one value per channel (the spatial mean of
//! the feature map) unless [`Granularity::Element`] is requested, in which
//! case every element of the feature map is its own neuron.
//!
//! Arithmetic is carried out in `f64` even though weights are stored as
//! `f32`, so that activation ranges and bin boundaries computed downstream
//! are stable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::None => v,
            Activation::Relu => relu(v),
        }
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// How convolution and pooling feature maps are mapped onto neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One neuron per channel, valued at the spatial mean of the channel.
    #[default]
    Channel,
    /// One neuron per feature-map element.
    Element,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Avgpool2d,
    Maxpool2d,
    Relu,
    Flatten,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Avgpool2d => "avgpool2d",
            LayerKind::Maxpool2d => "maxpool2d",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
        };
        f.write_str(s)
    }
}

/// A single layer with its parameters.
///
/// Dense weights are row-major `[outputs][inputs]`; convolution weights are
/// `[out_channels][in_channels][kernel][kernel]`. A dense layer accepts any
/// input shape whose element count equals `inputs` (implicit flatten).
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::AvgPool2d { .. } => LayerKind::Avgpool2d,
            LayerSpec::MaxPool2d { .. } => LayerKind::Maxpool2d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::Flatten => LayerKind::Flatten,
        }
    }

    /// Dense and convolution layers carry weights and take part in MC/DC.
    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    fn activation(&self) -> Activation {
        match self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => {
                *activation
            }
            _ => Activation::None,
        }
    }

    /// Output shape for the given input shape, or a message describing why
    /// the input is not acceptable.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                let n: usize = input.iter().product();
                if n != *inputs {
                    return Err(format!(
                        "dense layer declares {inputs} inputs but receives shape {input:?} ({n} elements)"
                    ));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                let [c, h, w] = spatial(input)?;
                if c != *in_channels {
                    return Err(format!(
                        "conv2d declares {in_channels} input channels but receives {c}"
                    ));
                }
                let (oh, ow) = window_out(h, w, *kernel, *stride)?;
                Ok(vec![*out_channels, oh, ow])
            }
            LayerSpec::AvgPool2d { kernel, stride } | LayerSpec::MaxPool2d { kernel, stride } => {
                let [c, h, w] = spatial(input)?;
                let (oh, ow) = window_out(h, w, *kernel, *stride)?;
                Ok(vec![c, oh, ow])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn check_params(&self) -> std::result::Result<(), String> {
        match self {
            LayerSpec::Dense {
                inputs,
                outputs,
                weights,
                bias,
                ..
            } => {
                if *inputs == 0 || *outputs == 0 {
                    return Err("dense layer needs at least one input and output".into());
                }
                check_len("weights", weights.len(), inputs * outputs)?;
                check_len("bias", bias.len(), *outputs)?;
                check_finite(weights, bias)
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                weights,
                bias,
                ..
            } => {
                if *in_channels == 0 || *out_channels == 0 {
                    return Err("conv2d layer needs at least one input and output channel".into());
                }
                if *kernel == 0 || *stride == 0 {
                    return Err("kernel size and stride must be positive".into());
                }
                check_len(
                    "weights",
                    weights.len(),
                    out_channels * in_channels * kernel * kernel,
                )?;
                check_len("bias", bias.len(), *out_channels)?;
                check_finite(weights, bias)
            }
            LayerSpec::AvgPool2d { kernel, stride } | LayerSpec::MaxPool2d { kernel, stride } => {
                if *kernel == 0 || *stride == 0 {
                    return Err("kernel size and stride must be positive".into());
                }
                Ok(())
            }
            LayerSpec::Relu | LayerSpec::Flatten => Ok(()),
        }
    }
}

fn spatial(input: &[usize]) -> std::result::Result<[usize; 3], String> {
    match input {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(format!("expected a [channels, height, width] input, got {input:?}")),
    }
}

fn window_out(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> std::result::Result<(usize, usize), String> {
    if kernel == 0 || stride == 0 {
        return Err("kernel size and stride must be positive".into());
    }
    if h < kernel || w < kernel {
        return Err(format!("kernel {kernel} larger than {h}x{w} input"));
    }
    Ok(((h - kernel) / stride + 1, (w - kernel) / stride + 1))
}

fn check_len(what: &str, got: usize, want: usize) -> std::result::Result<(), String> {
    if got != want {
        return Err(format!("{what} has {got} values, expected {want}"));
    }
    Ok(())
}

fn check_finite(weights: &[f32], bias: &[f32]) -> std::result::Result<(), String> {
    if weights.iter().chain(bias).any(|v| !v.is_finite()) {
        return Err("non-finite weight or bias".into());
    }
    Ok(())
}

/// Identifies one neuron: layer position in the model and index within the
/// layer's activation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

/// A dense row-major tensor. Shapes are `[n]` or `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Validation(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Activation values recorded for one layer under one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivation {
    /// Value after the layer's nonlinearity (or the nonlinearity of an
    /// immediately following relu layer).
    pub post: Vec<f64>,
    /// Value before any nonlinearity. Equal to `post` for layers that have
    /// none.
    pub pre: Vec<f64>,
}

/// A validated, immutable sequential network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    fingerprint: String,
}

impl NetworkModel {
    /// Builds and validates a model. The fingerprint is the hash of the
    /// model's canonical `.nnw` encoding.
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut model = Self::unfingerprinted(name.into(), input_shape, layers)?;
        model.fingerprint = crate::fingerprint::of_bytes(&crate::nnw::encode(&model));
        Ok(model)
    }

    pub(crate) fn unfingerprinted(
        name: String,
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("model has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) || !matches!(input_shape.len(), 1 | 3) {
            return Err(Error::Validation(format!(
                "input shape {input_shape:?} must be [n] or [channels, height, width] with positive extents"
            )));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            layer
                .check_params()
                .map_err(|m| Error::Validation(format!("layer {i} ({}): {m}", layer.kind())))?;
            current = layer
                .output_shape(&current)
                .map_err(|m| Error::Validation(format!("layer {i} ({}): {m}", layer.kind())))?;
            shapes.push(current.clone());
        }
        Ok(Self {
            name,
            input_shape,
            layers,
            shapes,
            fingerprint: String::new(),
        })
    }

    pub(crate) fn set_fingerprint(&mut self, fingerprint: String) {
        self.fingerprint = fingerprint;
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Output shape of every layer.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Indices of dense and convolution layers, ascending.
    pub fn trainable_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_trainable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Neuron count of every layer under the given granularity.
    pub fn layer_widths(&self, granularity: Granularity) -> Vec<usize> {
        self.shapes
            .iter()
            .map(|s| neuron_count(s, granularity))
            .collect()
    }

    /// Runs one input through the network with channel-as-neuron reduction.
    pub fn forward(&self, input: &Tensor) -> Result<Vec<LayerActivation>> {
        self.forward_with(input, Granularity::Channel)
    }

    pub fn forward_with(&self, input: &Tensor, granularity: Granularity) -> Result<Vec<LayerActivation>> {
        if input.shape != self.input_shape {
            return Err(Error::Shape {
                expected: self.input_shape.clone(),
                actual: input.shape.clone(),
            });
        }
        if input.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("input contains non-finite values".into()));
        }

        let mut records = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for (layer, out_shape) in self.layers.iter().zip(&self.shapes) {
            let (pre, post) = apply_layer(layer, &current, out_shape);
            records.push(LayerActivation {
                post: reduce(&post, granularity),
                pre: reduce(&pre, granularity),
            });
            current = post;
        }

        // A linear layer followed directly by a relu layer reports the
        // rectified value as its post-activation.
        for i in 0..self.layers.len().saturating_sub(1) {
            let layer = &self.layers[i];
            if layer.is_trainable()
                && layer.activation() == Activation::None
                && matches!(self.layers[i + 1], LayerSpec::Relu)
            {
                records[i].post = records[i + 1].post.clone();
            }
        }
        Ok(records)
    }
}

fn neuron_count(shape: &[usize], granularity: Granularity) -> usize {
    match (shape, granularity) {
        ([c, _, _], Granularity::Channel) => *c,
        _ => shape.iter().product(),
    }
}

/// Per-neuron values of a layer output.
fn reduce(t: &Tensor, granularity: Granularity) -> Vec<f64> {
    match (t.shape.as_slice(), granularity) {
        ([c, h, w], Granularity::Channel) => {
            let plane = h * w;
            (0..*c)
                .map(|ch| {
                    let sum: f64 = t.data[ch * plane..(ch + 1) * plane].iter().sum();
                    sum / plane as f64
                })
                .collect()
        }
        _ => t.data.clone(),
    }
}

/// Returns (pre-nonlinearity, post-nonlinearity) outputs.
fn apply_layer(layer: &LayerSpec, input: &Tensor, out_shape: &[usize]) -> (Tensor, Tensor) {
    match layer {
        LayerSpec::Dense {
            inputs,
            outputs,
            activation,
            weights,
            bias,
        } => {
            let x = &input.data;
            let z: Vec<f64> = (0..*outputs)
                .map(|o| {
                    let row = &weights[o * inputs..(o + 1) * inputs];
                    let mut acc = f64::from(bias[o]);
                    for (w, v) in row.iter().zip(x) {
                        acc += f64::from(*w) * v;
                    }
                    acc
                })
                .collect();
            activated(out_shape, z, *activation)
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            activation,
            weights,
            bias,
        } => {
            let (h, w) = (input.shape[1], input.shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let k = *kernel;
            let mut z = Vec::with_capacity(out_channels * oh * ow);
            for (oc, b) in bias.iter().enumerate() {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = f64::from(*b);
                        for ic in 0..*in_channels {
                            let wbase = ((oc * in_channels) + ic) * k * k;
                            let ibase = ic * h * w;
                            for ky in 0..k {
                                let iy = oy * stride + ky;
                                for kx in 0..k {
                                    let ix = ox * stride + kx;
                                    acc += f64::from(weights[wbase + ky * k + kx])
                                        * input.data[ibase + iy * w + ix];
                                }
                            }
                        }
                        z.push(acc);
                    }
                }
            }
            activated(out_shape, z, *activation)
        }
        LayerSpec::AvgPool2d { kernel, stride } => {
            let out = pool(input, out_shape, *kernel, *stride, |win| {
                win.iter().sum::<f64>() / win.len() as f64
            });
            (out.clone(), out)
        }
        LayerSpec::MaxPool2d { kernel, stride } => {
            let out = pool(input, out_shape, *kernel, *stride, |win| {
                win.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            });
            (out.clone(), out)
        }
        LayerSpec::Relu => {
            let post = input.data.iter().map(|v| relu(*v)).collect();
            (
                input.clone(),
                Tensor {
                    shape: input.shape.clone(),
                    data: post,
                },
            )
        }
        LayerSpec::Flatten => {
            let out = Tensor::vector(input.data.clone());
            (out.clone(), out)
        }
    }
}

fn activated(shape: &[usize], z: Vec<f64>, activation: Activation) -> (Tensor, Tensor) {
    let post = z.iter().map(|v| activation.apply(*v)).collect();
    (
        Tensor {
            shape: shape.to_vec(),
            data: z,
        },
        Tensor {
            shape: shape.to_vec(),
            data: post,
        },
    )
}

fn pool(input: &Tensor, out_shape: &[usize], kernel: usize, stride: usize, f: impl Fn(&[f64]) -> f64) -> Tensor {
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut window = Vec::with_capacity(kernel * kernel);
    let mut data = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                window.clear();
                for ky in 0..kernel {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    window.extend_from_slice(&input.data[row..row + kernel]);
                }
                data.push(f(&window));
            }
        }
    }
    Tensor {
        shape: out_shape.to_vec(),
        data,
    }
}
