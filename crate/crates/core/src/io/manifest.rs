//! TOML model manifests.
//!
//! ```toml
//! input_shape = [1, 3, 12, 12]
//!
//! [[layers]]
//! kind = "conv2d"
//! in_channels = 3
//! out_channels = 8
//! kernel = [3, 3]
//! stride = 1
//! padding = 1
//! weight = "layer0.weight.eqtn"
//! bias = "layer0.bias.eqtn"
//!
//! [[layers]]
//! kind = "relu"
//!
//! [[layers]]
//! kind = "avgpool"
//! kernel = 2
//! stride = 2
//!
//! [[layers]]
//! kind = "fc"
//! in_features = 72
//! out_features = 10
//! weight = "layer3.weight.eqtn"
//! ```
//!
//! Weight and bias paths are relative to the manifest's directory and double
//! as the tensor ids inside the loaded [`ModelGraph`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor_file::{load_f32, save_tensor};
use super::toml_error;
use crate::error::{Error, Result};
use crate::model::{ConvSpec, FcSpec, LayerSpec, ModelGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    input_shape: Vec<usize>,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum LayerEntry {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Relu,
    Avgpool {
        kernel: usize,
        stride: usize,
    },
    Fc {
        in_features: usize,
        out_features: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
}

impl From<LayerEntry> for LayerSpec {
    fn from(entry: LayerEntry) -> Self {
        match entry {
            LayerEntry::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } => LayerSpec::Conv2d(ConvSpec {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            }),
            LayerEntry::Relu => LayerSpec::Relu,
            LayerEntry::Avgpool { kernel, stride } => LayerSpec::AvgPool { kernel, stride },
            LayerEntry::Fc {
                in_features,
                out_features,
                weight,
                bias,
            } => LayerSpec::Fc(FcSpec {
                in_features,
                out_features,
                weight,
                bias,
            }),
        }
    }
}

impl From<&LayerSpec> for LayerEntry {
    fn from(spec: &LayerSpec) -> Self {
        match spec.clone() {
            LayerSpec::Conv2d(c) => LayerEntry::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
                weight: c.weight,
                bias: c.bias,
            },
            LayerSpec::Relu => LayerEntry::Relu,
            LayerSpec::AvgPool { kernel, stride } => LayerEntry::Avgpool { kernel, stride },
            LayerSpec::Fc(f) => LayerEntry::Fc {
                in_features: f.in_features,
                out_features: f.out_features,
                weight: f.weight,
                bias: f.bias,
            },
        }
    }
}

fn referenced_tensors(layers: &[LayerSpec]) -> Vec<&str> {
    let mut ids = Vec::new();
    for layer in layers {
        let (weight, bias) = match layer {
            LayerSpec::Conv2d(c) => (&c.weight, &c.bias),
            LayerSpec::Fc(f) => (&f.weight, &f.bias),
            _ => continue,
        };
        ids.push(weight.as_str());
        if let Some(b) = bias {
            ids.push(b.as_str());
        }
    }
    ids
}

/// Load a manifest and every tensor it references, then check the shape chain.
pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDoc = toml::from_str(&text).map_err(|e| toml_error(path, &text, &e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let layers: Vec<LayerSpec> = doc.layers.into_iter().map(LayerSpec::from).collect();
    let mut weights = BTreeMap::new();
    for id in referenced_tensors(&layers) {
        if !weights.contains_key(id) {
            weights.insert(id.to_string(), load_f32(&base.join(id))?);
        }
    }
    ModelGraph::new(doc.input_shape, layers, weights)
}

/// Write `model` as a manifest at `path`, with its tensors next to it.
pub fn save_model(path: &Path, model: &ModelGraph) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    for (id, tensor) in model.weights() {
        let file = base.join(id);
        if let Some(dir) = file.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_tensor(&file, &tensor.clone().into())?;
    }
    let doc = ManifestDoc {
        input_shape: model.input_shape().to_vec(),
        layers: model.layers().iter().map(LayerEntry::from).collect(),
    };
    let text = toml::to_string(&doc).map_err(|e| Error::config(format!("cannot serialize manifest: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
