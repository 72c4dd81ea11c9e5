use super::{fp32_layer_outputs, layer_inputs, CalibrationSet};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::quant::{Bits, NetworkScales, QuantParams, RoundingMode};
use crate::tensor::Tensor;

/// `q / max`, with 1.0 for an all-zero (or non-finite) maximum.
pub(crate) fn scale_for_max(bits: Bits, max_abs: f32) -> f32 {
    if max_abs > 0.0 && max_abs.is_finite() {
        bits.qmax() as f32 / max_abs
    } else {
        1.0
    }
}

pub(crate) fn max_abs(values: &[f32]) -> f32 {
    values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

pub(crate) fn weight_scales_maxabs(weight: &Tensor<f32>, bits: Bits) -> Vec<f32> {
    (0..weight.dim0())
        .map(|c| scale_for_max(bits, max_abs(weight.outer_slice(c))))
        .collect()
}

/// Max-abs initialization: per-channel weight scales from the weights and the
/// activation scale from the largest FP32 input magnitude over the set.
pub fn init_scales_maxabs(
    model: &ModelGraph,
    calib: &CalibrationSet,
    bits: Bits,
    rounding: RoundingMode,
) -> Result<NetworkScales> {
    let fp32 = fp32_layer_outputs(model, calib)?;
    init_from_outputs(model, calib, &fp32, bits, rounding)
}

pub(crate) fn init_from_outputs(
    model: &ModelGraph,
    calib: &CalibrationSet,
    fp32: &[Vec<Tensor<f32>>],
    bits: Bits,
    rounding: RoundingMode,
) -> Result<NetworkScales> {
    if calib.is_empty() {
        return Err(Error::data("calibration set is empty"));
    }
    let mut scales = NetworkScales::new(rounding);
    for l in model.quantized_layers() {
        let layer = model.linear_layer(l).expect("weighted layer");
        let act_max = layer_inputs(calib, fp32, l)
            .iter()
            .fold(0.0f32, |m, a| m.max(max_abs(a.data())));
        let params = QuantParams::new(
            bits,
            scale_for_max(bits, act_max),
            weight_scales_maxabs(&layer.weight, bits),
        )?;
        scales.insert(l, params);
    }
    Ok(scales)
}
