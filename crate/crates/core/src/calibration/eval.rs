use rayon::prelude::*;

use crate::error::Result;
use crate::intsim::{forward_quantized, AccumulatorModel};
use crate::metrics::{cosine_slices, mean};
use crate::model::{forward_fp32, ModelGraph};
use crate::quant::NetworkScales;
use crate::tensor::Tensor;

/// Mean FP32-vs-quantized cosine similarity over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Indexed by model layer.
    pub per_layer: Vec<f64>,
    /// Cosine of the network output (last layer).
    pub final_output: f64,
    pub samples: usize,
}

pub fn evaluate(
    model: &ModelGraph,
    scales: &NetworkScales,
    samples: &[Tensor<f32>],
    acc: &AccumulatorModel,
) -> Result<EvalReport> {
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|x| {
            let reference = forward_fp32(model, x)?;
            let quantized = forward_quantized(model, scales, x, acc)?;
            Ok(reference
                .iter()
                .zip(&quantized)
                .map(|(o, q)| cosine_slices(o.data(), q.data()))
                .collect())
        })
        .collect::<Result<_>>()?;
    let layers = model.layers().len();
    let per_layer: Vec<f64> = (0..layers)
        .map(|l| mean(&per_sample.iter().map(|s| s[l]).collect::<Vec<_>>()))
        .collect();
    Ok(EvalReport {
        final_output: per_layer.last().copied().unwrap_or(0.0),
        per_layer,
        samples: samples.len(),
    })
}
