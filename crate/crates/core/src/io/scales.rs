//! TOML scale files.
//!
//! ```toml
//! method = "eq"
//! rounding = "nearest"
//!
//! [config]
//! alpha = 0.5
//! beta = 2.0
//! grid_points = 100
//! samples = 50
//! rounds = 1
//! seed = 42
//!
//! [[layers]]
//! index = 0
//! kind = "conv2d"
//! bits = 7
//! rounding = "nearest"
//! activation_scale = 21.5
//! weight_scales = [40.25, 61.0]
//! ```
//!
//! Scales are f32 values stored as TOML floats; they round-trip exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::toml_error;
use crate::calibration::{Method, SearchConfig};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::quant::{Bits, NetworkScales, QuantParams, RoundingMode};

/// Search settings echoed into the scale file for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigEcho {
    pub alpha: f64,
    pub beta: f64,
    pub grid_points: usize,
    pub samples: usize,
    pub rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ConfigEcho {
    pub fn from_config(cfg: &SearchConfig, seed: Option<u64>) -> Self {
        Self {
            alpha: cfg.alpha,
            beta: cfg.beta,
            grid_points: cfg.grid_points,
            samples: cfg.samples,
            rounds: cfg.rounds,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleFile {
    pub method: Method,
    pub config: ConfigEcho,
    pub scales: NetworkScales,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScaleDoc {
    method: String,
    rounding: String,
    config: ConfigEcho,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    bits: u8,
    rounding: String,
    activation_scale: f64,
    weight_scales: Vec<f64>,
}

impl ScaleFile {
    /// Serialize; `model` only supplies the informational layer kinds.
    pub fn to_toml(&self, model: Option<&ModelGraph>) -> Result<String> {
        let rounding = self.scales.rounding.as_str().to_string();
        let doc = ScaleDoc {
            method: self.method.as_str().to_string(),
            rounding: rounding.clone(),
            config: self.config.clone(),
            layers: self
                .scales
                .iter()
                .map(|(index, p)| LayerDoc {
                    index,
                    kind: model
                        .and_then(|m| m.layers().get(index))
                        .map(|l| l.kind_name().to_string()),
                    bits: p.bits.get(),
                    rounding: rounding.clone(),
                    activation_scale: p.activation_scale as f64,
                    weight_scales: p.weight_scales.iter().map(|&s| s as f64).collect(),
                })
                .collect(),
        };
        toml::to_string(&doc).map_err(|e| Error::config(format!("cannot serialize scales: {e}")))
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let doc: ScaleDoc = toml::from_str(text).map_err(|e| toml_error(path, text, &e))?;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            location: crate::error::Location::Unknown,
            message: msg,
        };
        let method: Method = doc.method.parse().map_err(|e: Error| bad(e.to_string()))?;
        let rounding: RoundingMode = doc.rounding.parse().map_err(|e: Error| bad(e.to_string()))?;
        let mut scales = NetworkScales::new(rounding);
        for layer in doc.layers {
            if layer.rounding != doc.rounding {
                return Err(bad(format!(
                    "layer {} rounding '{}' differs from file rounding '{}'",
                    layer.index, layer.rounding, doc.rounding
                )));
            }
            let bits = Bits::new(layer.bits).map_err(|e| bad(format!("layer {}: {e}", layer.index)))?;
            let params = QuantParams::new(
                bits,
                layer.activation_scale as f32,
                layer.weight_scales.iter().map(|&s| s as f32).collect(),
            )
            .map_err(|e| bad(format!("layer {}: {e}", layer.index)))?;
            if scales.get(layer.index).is_some() {
                return Err(bad(format!("layer {} listed twice", layer.index)));
            }
            scales.insert(layer.index, params);
        }
        Ok(Self {
            method,
            config: doc.config,
            scales,
        })
    }

    /// Every weighted layer has parameters of matching channel count, and nothing else does.
    pub fn check_model(&self, model: &ModelGraph) -> Result<()> {
        let expected = model.quantized_layers();
        let present: Vec<usize> = self.scales.iter().map(|(i, _)| i).collect();
        if present != expected {
            return Err(Error::config(format!(
                "scales cover layers {present:?}, model has weighted layers {expected:?}"
            )));
        }
        for (index, params) in self.scales.iter() {
            let layer = model.linear_layer(index).expect("weighted layer");
            params.channel_scales(layer.out_channels())?;
        }
        Ok(())
    }
}

pub fn save_scales(path: &Path, file: &ScaleFile, model: Option<&ModelGraph>) -> Result<()> {
    fs::write(path, file.to_toml(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_scales(path: &Path) -> Result<ScaleFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ScaleFile::from_toml(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ScaleFile {
        let mut scales = NetworkScales::new(RoundingMode::Ceil);
        let b7 = Bits::new(7).unwrap();
        scales.insert(0, QuantParams::new(b7, 21.5, vec![0.1, 3.0e-7, 61.0]).unwrap());
        scales.insert(4, QuantParams::new(b7, 1.0 / 3.0, vec![2.0]).unwrap());
        ScaleFile {
            method: Method::Kld,
            config: ConfigEcho {
                alpha: 0.5,
                beta: 2.0,
                grid_points: 100,
                samples: 50,
                rounds: 1,
                seed: Some(42),
            },
            scales,
        }
    }

    #[test]
    fn round_trip_is_value_exact() {
        let f = sample();
        let text = f.to_toml(None).unwrap();
        let back = ScaleFile::from_toml(&text, Path::new("s.toml")).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_toml(None).unwrap(), text);
    }

    #[test]
    fn rejects_nonpositive_scale() {
        let text = sample()
            .to_toml(None)
            .unwrap()
            .replace("activation_scale = 21.5", "activation_scale = -1.0");
        assert!(matches!(
            ScaleFile::from_toml(&text, Path::new("s.toml")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn rejects_bad_bits() {
        let text = sample().to_toml(None).unwrap().replacen("bits = 7", "bits = 9", 1);
        assert!(ScaleFile::from_toml(&text, Path::new("s.toml")).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_f32_scales_round_trip(sa in 1e-30f32..1e30, sw in prop::collection::vec(1e-30f32..1e30, 1..8)) {
            let mut scales = NetworkScales::new(RoundingMode::Nearest);
            scales.insert(2, QuantParams::new(Bits::new(4).unwrap(), sa, sw).unwrap());
            let f = ScaleFile { scales, ..sample() };
            let back = ScaleFile::from_toml(&f.to_toml(None).unwrap(), Path::new("s.toml")).unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn arbitrary_text_never_panics(text in "\\PC{0,200}") {
            let _ = ScaleFile::from_toml(&text, Path::new("s.toml"));
        }
    }
}
