//! Seeded toy networks and synthetic calibration inputs.
//!
//! Weights are Gaussian with He scaling, a per-output-channel gain drawn
//! log-uniformly from [1/4, 4] and about 1% outliers at 4x, so per-channel
//! ranges differ and max-abs scaling is visibly suboptimal. Inputs are
//! Gaussian per pixel with a per-channel offset and sparse 4x spikes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::manifest::save_model;
use super::tensor_file::save_tensor;
use crate::error::{Error, Result};
use crate::model::{ConvSpec, FcSpec, LayerSpec, ModelGraph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyLayer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Fc {
        out_features: usize,
    },
}

/// Architecture of a toy network, written as e.g.
/// `conv:8:3:1:1,relu,avgpool:2:2,fc:10` (conv is out:kernel:stride:padding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToySpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<ToyLayer>,
}

impl ToySpec {
    /// Three convolutions with ReLUs between them on a 3x12x12 input.
    pub fn three_conv() -> Self {
        Self {
            input_shape: vec![1, 3, 12, 12],
            layers: "conv:8:3:1:1,relu,conv:16:3:2:1,relu,conv:10:3:1:0"
                .parse::<LayerList>()
                .expect("valid")
                .0,
        }
    }

    pub fn parse(input_shape: Vec<usize>, arch: &str) -> Result<Self> {
        Ok(Self {
            input_shape,
            layers: arch.parse::<LayerList>()?.0,
        })
    }
}

struct LayerList(Vec<ToyLayer>);

impl FromStr for LayerList {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|item| item.trim().parse::<ToyLayer>())
            .collect::<Result<Vec<_>>>()
            .map(LayerList)
    }
}

impl FromStr for ToyLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let nums = |expect: usize| -> Result<Vec<usize>> {
            if parts.len() != expect + 1 {
                return Err(Error::param(format!("'{s}': expected {expect} numeric fields")));
            }
            parts[1..]
                .iter()
                .map(|p| {
                    p.parse::<usize>()
                        .map_err(|_| Error::param(format!("'{s}': bad number '{p}'")))
                })
                .collect()
        };
        match parts[0] {
            "conv" => {
                let n = nums(4)?;
                Ok(ToyLayer::Conv {
                    out_channels: n[0],
                    kernel: n[1],
                    stride: n[2],
                    padding: n[3],
                })
            }
            "relu" => nums(0).map(|_| ToyLayer::Relu),
            "avgpool" => {
                let n = nums(2)?;
                Ok(ToyLayer::AvgPool {
                    kernel: n[0],
                    stride: n[1],
                })
            }
            "fc" => {
                let n = nums(1)?;
                Ok(ToyLayer::Fc { out_features: n[0] })
            }
            other => Err(Error::param(format!("unknown toy layer '{other}'"))),
        }
    }
}

impl fmt::Display for ToyLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ToyLayer::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv:{out_channels}:{kernel}:{stride}:{padding}"),
            ToyLayer::Relu => f.write_str("relu"),
            ToyLayer::AvgPool { kernel, stride } => write!(f, "avgpool:{kernel}:{stride}"),
            ToyLayer::Fc { out_features } => write!(f, "fc:{out_features}"),
        }
    }
}

fn random_weights(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Result<Tensor<f32>> {
    let out = shape[0];
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f32).sqrt();
    let mut data = Vec::with_capacity(out * fan_in);
    for _ in 0..out {
        let gain = 4f32.powf(rng.gen_range(-1.0f32..1.0));
        for _ in 0..fan_in {
            let z: f32 = StandardNormal.sample(rng);
            let spike = if rng.gen_bool(0.01) { 4.0 } else { 1.0 };
            data.push(z * std * gain * spike);
        }
    }
    Tensor::new(shape, data)
}

fn random_bias(rng: &mut ChaCha8Rng, n: usize) -> Result<Tensor<f32>> {
    let data = (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            0.05 * z
        })
        .collect::<Vec<f32>>();
    Tensor::new(vec![n], data)
}

/// Build a seeded random model for `spec`. With `dir` set, the manifest
/// (`model.toml`) and weight files are written there as well.
pub fn generate_toy_model(spec: &ToySpec, seed: u64, dir: Option<&Path>) -> Result<ModelGraph> {
    if spec.layers.is_empty() {
        return Err(Error::param("toy model needs at least one layer"));
    }
    if spec.input_shape.len() != 4 || spec.input_shape[0] != 1 {
        return Err(Error::param(format!(
            "toy input must be 1xCxHxW, got {:?}",
            spec.input_shape
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = BTreeMap::new();
    let mut layers = Vec::new();
    let mut shape = spec.input_shape.clone();
    for (index, layer) in spec.layers.iter().enumerate() {
        let weight_id = format!("layer{index}.weight.eqtn");
        let bias_id = format!("layer{index}.bias.eqtn");
        match *layer {
            ToyLayer::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let w = random_weights(&mut rng, vec![out_channels, shape[1], kernel, kernel])?;
                weights.insert(weight_id.clone(), w);
                weights.insert(bias_id.clone(), random_bias(&mut rng, out_channels)?);
                layers.push(LayerSpec::Conv2d(ConvSpec {
                    in_channels: shape[1],
                    out_channels,
                    kernel: [kernel, kernel],
                    stride,
                    padding,
                    weight: weight_id,
                    bias: Some(bias_id),
                }));
            }
            ToyLayer::Relu => layers.push(LayerSpec::Relu),
            ToyLayer::AvgPool { kernel, stride } => layers.push(LayerSpec::AvgPool { kernel, stride }),
            ToyLayer::Fc { out_features } => {
                let in_features: usize = shape.iter().product();
                let w = random_weights(&mut rng, vec![out_features, in_features])?;
                weights.insert(weight_id.clone(), w);
                weights.insert(bias_id.clone(), random_bias(&mut rng, out_features)?);
                layers.push(LayerSpec::Fc(FcSpec {
                    in_features,
                    out_features,
                    weight: weight_id,
                    bias: Some(bias_id),
                }));
            }
        }
        // Validate incrementally so a bad architecture names its layer.
        let partial = ModelGraph::new(spec.input_shape.clone(), layers.clone(), weights.clone())?;
        shape = partial.output_shape(index).to_vec();
    }
    let model = ModelGraph::new(spec.input_shape.clone(), layers, weights)?;
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_model(&dir.join("model.toml"), &model)?;
    }
    Ok(model)
}

/// Synthetic input with the model's shape.
pub fn synthetic_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor<f32>> {
    let channels = shape.get(1).copied().unwrap_or(1);
    let per: usize = shape.iter().skip(2).product();
    let mut data = Vec::with_capacity(channels * per);
    for _ in 0..channels {
        let offset = rng.gen_range(-0.5f32..0.5);
        for _ in 0..per {
            let z: f32 = StandardNormal.sample(rng);
            let spike = if rng.gen_bool(0.02) { 4.0 } else { 1.0 };
            data.push(offset + z * spike);
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Write `count` seeded synthetic inputs as `sample_NNNN.eqtn` into `dir`.
pub fn generate_calibration_data(dir: &Path, shape: &[usize], count: usize, seed: u64) -> Result<Vec<Tensor<f32>>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let t = synthetic_input(&mut rng, shape)?;
        save_tensor(&dir.join(format!("sample_{i:04}.eqtn")), &t.clone().into())?;
        samples.push(t);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_architecture() {
        let spec = ToySpec::parse(vec![1, 1, 8, 8], "conv:4:3:1:1, relu,avgpool:2:2,fc:3").unwrap();
        assert_eq!(spec.layers.len(), 4);
        assert_eq!(spec.layers[0].to_string(), "conv:4:3:1:1");
        assert!(ToySpec::parse(vec![1, 1, 8, 8], "conv:4:3").is_err());
        assert!(ToySpec::parse(vec![1, 1, 8, 8], "pool:2").is_err());
    }

    #[test]
    fn same_seed_same_model() {
        let spec = ToySpec::three_conv();
        let a = generate_toy_model(&spec, 42, None).unwrap();
        let b = generate_toy_model(&spec, 42, None).unwrap();
        let c = generate_toy_model(&spec, 43, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.quantized_layers(), vec![0, 2, 4]);
        assert_eq!(a.output_shape(4), &[1, 10, 4, 4]);
    }

    #[test]
    fn bad_architecture_is_rejected() {
        let spec = ToySpec::parse(vec![1, 1, 4, 4], "conv:2:7:1:0").unwrap();
        assert!(generate_toy_model(&spec, 1, None).is_err());
    }
}
