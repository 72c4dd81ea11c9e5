//! Sequential CNN description and the FP32 reference forward pass.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride and symmetric zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const UNIT: ConvGeometry = ConvGeometry { stride: 1, padding: 0 };

    pub fn new(stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("stride must be at least 1"));
        }
        Ok(Self { stride, padding })
    }

    /// Output spatial extent along one axis.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if kernel == 0 || padded < kernel {
            return Err(Error::config(format!(
                "kernel {kernel} does not fit padded input extent {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output shape of a convolution of an NCHW input with an (O, I, Kh, Kw) kernel.
    pub fn output_shape(&self, input: &[usize], weight: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::config(format!(
                "conv2d expects 4-d input and weight, got {input:?} and {weight:?}"
            )));
        }
        if input[0] != 1 {
            return Err(Error::config(format!(
                "conv2d runs on single images (N = 1), got N = {}",
                input[0]
            )));
        }
        if input[1] != weight[1] {
            return Err(Error::config(format!(
                "input has {} channels, weight expects {}",
                input[1], weight[1]
            )));
        }
        let oh = self.output_extent(input[2], weight[2])?;
        let ow = self.output_extent(input[3], weight[3])?;
        Ok(vec![1, weight[0], oh, ow])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: usize,
    pub weight: String,
    pub bias: Option<String>,
}

impl ConvSpec {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Fully connected layer over the flattened input, executed as a 1x1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FcSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: String,
    pub bias: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    Relu,
    AvgPool { kernel: usize, stride: usize },
    Fc(FcSpec),
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Fc(_) => "fc",
        }
    }

    /// Conv and fc layers carry weights and get quantization parameters.
    pub fn is_quantized(&self) -> bool {
        matches!(self, LayerSpec::Conv2d(_) | LayerSpec::Fc(_))
    }
}

/// A weighted layer viewed as a convolution: conv layers as-is, fc layers as a
/// 1x1 convolution over the flattened input.
#[derive(Debug, Clone)]
pub struct LinearLayer<'a> {
    pub weight: Cow<'a, Tensor<f32>>,
    pub bias: Option<&'a Tensor<f32>>,
    pub geometry: ConvGeometry,
    flatten_input: bool,
}

impl<'a> LinearLayer<'a> {
    /// A plain convolution layer built from borrowed or owned parts.
    pub fn from_parts(weight: Cow<'a, Tensor<f32>>, bias: Option<&'a Tensor<f32>>, geometry: ConvGeometry) -> Self {
        Self {
            weight,
            bias,
            geometry,
            flatten_input: false,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim0()
    }

    /// Bring an input activation into the layout the convolution expects.
    pub fn prepare_input<'t>(&self, input: &'t Tensor<f32>) -> Result<Cow<'t, Tensor<f32>>> {
        if self.flatten_input {
            let features = input.len();
            Ok(Cow::Owned(input.clone().reshape(vec![1, features, 1, 1])?))
        } else {
            Ok(Cow::Borrowed(input))
        }
    }

    /// Multiply-accumulate count per output element.
    pub fn macs_per_output(&self) -> usize {
        self.weight.inner_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    weights: BTreeMap<String, Tensor<f32>>,
    output_shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    /// Validates weight references, declared dimensions and the shape chain.
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        weights: BTreeMap<String, Tensor<f32>>,
    ) -> Result<Self> {
        if input_shape.len() != 4 || input_shape[0] != 1 {
            return Err(Error::config(format!(
                "model input must be NCHW with N = 1, got {input_shape:?}"
            )));
        }
        let mut graph = Self {
            input_shape,
            layers,
            weights,
            output_shapes: Vec::new(),
        };
        let mut shape = graph.input_shape.clone();
        for (index, layer) in graph.layers.iter().enumerate() {
            shape = graph
                .layer_output_shape(layer, &shape)
                .map_err(|e| Error::config(format!("layer {index} ({}): {e}", layer.kind_name())))?;
            graph.output_shapes.push(shape.clone());
        }
        Ok(graph)
    }

    fn weight(&self, id: &str) -> Result<&Tensor<f32>> {
        self.weights
            .get(id)
            .ok_or_else(|| Error::config(format!("unknown weight tensor '{id}'")))
    }

    fn bias(&self, id: Option<&String>, channels: usize) -> Result<Option<&Tensor<f32>>> {
        let Some(id) = id else { return Ok(None) };
        let bias = self.weight(id)?;
        if bias.len() != channels {
            return Err(Error::config(format!(
                "bias '{id}' has {} elements, expected {channels}",
                bias.len()
            )));
        }
        Ok(Some(bias))
    }

    fn layer_output_shape(&self, layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
        match layer {
            LayerSpec::Conv2d(spec) => {
                let w = self.weight(&spec.weight)?;
                let declared = [spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1]];
                if w.shape() != declared {
                    return Err(Error::config(format!(
                        "weight '{}' has shape {:?}, declared {:?}",
                        spec.weight,
                        w.shape(),
                        declared
                    )));
                }
                self.bias(spec.bias.as_ref(), spec.out_channels)?;
                ConvGeometry::new(spec.stride, spec.padding)?.output_shape(input, w.shape())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::AvgPool { kernel, stride } => {
                if *stride == 0 {
                    return Err(Error::config("pool stride must be at least 1"));
                }
                let g = ConvGeometry {
                    stride: *stride,
                    padding: 0,
                };
                Ok(vec![
                    input[0],
                    input[1],
                    g.output_extent(input[2], *kernel)?,
                    g.output_extent(input[3], *kernel)?,
                ])
            }
            LayerSpec::Fc(spec) => {
                let w = self.weight(&spec.weight)?;
                if w.shape() != [spec.out_features, spec.in_features] {
                    return Err(Error::config(format!(
                        "weight '{}' has shape {:?}, declared [{}, {}]",
                        spec.weight,
                        w.shape(),
                        spec.out_features,
                        spec.in_features
                    )));
                }
                let features: usize = input.iter().product();
                if features != spec.in_features {
                    return Err(Error::config(format!(
                        "fc expects {} input features, previous layer yields {features}",
                        spec.in_features
                    )));
                }
                self.bias(spec.bias.as_ref(), spec.out_features)?;
                Ok(vec![1, spec.out_features, 1, 1])
            }
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.weights
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.output_shapes[layer]
    }

    /// Indices of the layers that take quantization parameters.
    pub fn quantized_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_quantized())
            .collect()
    }

    /// Weighted layer `index` as a convolution, or `None` for relu/pool.
    pub fn linear_layer(&self, index: usize) -> Option<LinearLayer<'_>> {
        match self.layers.get(index)? {
            LayerSpec::Conv2d(spec) => Some(LinearLayer {
                weight: Cow::Borrowed(self.weights.get(&spec.weight)?),
                bias: spec.bias.as_ref().and_then(|id| self.weights.get(id)),
                geometry: spec.geometry(),
                flatten_input: false,
            }),
            LayerSpec::Fc(spec) => {
                let w = self.weights.get(&spec.weight)?;
                let w4 = w
                    .clone()
                    .reshape(vec![spec.out_features, spec.in_features, 1, 1])
                    .ok()?;
                Some(LinearLayer {
                    weight: Cow::Owned(w4),
                    bias: spec.bias.as_ref().and_then(|id| self.weights.get(id)),
                    geometry: ConvGeometry::UNIT,
                    flatten_input: true,
                })
            }
            _ => None,
        }
    }

    /// Run a single layer in FP32.
    pub fn run_layer_fp32(&self, index: usize, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        match &self.layers[index] {
            LayerSpec::Relu => Ok(relu(input)),
            LayerSpec::AvgPool { kernel, stride } => avgpool(input, *kernel, *stride),
            LayerSpec::Conv2d(_) | LayerSpec::Fc(_) => {
                let layer = self
                    .linear_layer(index)
                    .ok_or_else(|| Error::config(format!("layer {index} has no weights")))?;
                let x = layer.prepare_input(input)?;
                conv2d_fp32(&x, &layer.weight, layer.bias, layer.geometry)
            }
        }
    }
}

/// Direct convolution, accumulating in (input-channel, kernel-row, kernel-col)
/// order; bias is added per output channel after the sum.
pub fn conv2d_fp32(
    input: &Tensor<f32>,
    weights: &Tensor<f32>,
    bias: Option<&Tensor<f32>>,
    geometry: ConvGeometry,
) -> Result<Tensor<f32>> {
    let out_shape = geometry.output_shape(input.shape(), weights.shape())?;
    let (cin, ih, iw) = (input.shape()[1], input.shape()[2], input.shape()[3]);
    let (cout, kh, kw) = (weights.shape()[0], weights.shape()[2], weights.shape()[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::config(format!(
                "bias has {} elements for {cout} output channels",
                b.len()
            )));
        }
    }
    let pad = geometry.padding as isize;
    let x = input.data();
    let w = weights.data();
    let mut out = vec![0.0f32; cout * oh * ow];
    for o in 0..cout {
        let b = bias.map_or(0.0, |b| b.data()[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0f32;
                for c in 0..cin {
                    for ky in 0..kh {
                        let y = (oy * geometry.stride + ky) as isize - pad;
                        if y < 0 || y >= ih as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let xx = (ox * geometry.stride + kx) as isize - pad;
                            if xx < 0 || xx >= iw as isize {
                                continue;
                            }
                            let xi = (c * ih + y as usize) * iw + xx as usize;
                            let wi = ((o * cin + c) * kh + ky) * kw + kx;
                            sum += x[xi] * w[wi];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = sum + b;
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn relu(input: &Tensor<f32>) -> Tensor<f32> {
    input.map(|v| v.max(0.0))
}

/// Average pooling without padding.
pub fn avgpool(input: &Tensor<f32>, kernel: usize, stride: usize) -> Result<Tensor<f32>> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::config(format!("avgpool expects 4-d input, got {shape:?}")));
    }
    let g = ConvGeometry::new(stride, 0)?;
    let (c, ih, iw) = (shape[1], shape[2], shape[3]);
    let oh = g.output_extent(ih, kernel)?;
    let ow = g.output_extent(iw, kernel)?;
    let norm = (kernel * kernel) as f32;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0f32;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        sum += x[(ch * ih + oy * stride + ky) * iw + ox * stride + kx];
                    }
                }
                out.push(sum / norm);
            }
        }
    }
    Tensor::new(vec![shape[0], c, oh, ow], out)
}

/// FP32 forward pass returning the output of every layer.
pub fn forward_fp32(model: &ModelGraph, input: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    if model.layers().is_empty() {
        return Err(Error::config("model has no layers"));
    }
    if input.shape() != model.input_shape() {
        return Err(Error::config(format!(
            "input shape {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape()
        )));
    }
    let mut outputs: Vec<Tensor<f32>> = Vec::with_capacity(model.layers().len());
    for index in 0..model.layers().len() {
        let x = outputs.last().unwrap_or(input);
        let y = model.run_layer_fp32(index, x)?;
        outputs.push(y);
    }
    Ok(outputs)
}
