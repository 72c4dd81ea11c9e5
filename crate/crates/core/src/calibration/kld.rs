//! KL-divergence activation calibration (the TensorRT-style baseline).
//!
//! For every candidate clip bin `i` from `quant_levels` to the bin count, the
//! reference distribution P is the first `i` histogram bins with all tail mass
//! folded into bin `i - 1`. Q is the unfolded slice merged into
//! `quant_levels` groups of `i / quant_levels` bins (the last group takes the
//! remainder) and spread back uniformly over the bins that are nonzero in P,
//! so clipped tail mass shows up as divergence. A candidate where P has mass
//! that Q cannot cover scores infinity; no smoothing is applied. The
//! threshold is the upper edge of the bin minimizing KL(P || Q), the
//! smallest on ties.

use super::maxabs::{max_abs, scale_for_max, weight_scales_maxabs};
use super::{fp32_layer_outputs, layer_inputs, CalibrationSet};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::quant::{Bits, NetworkScales, QuantParams, RoundingMode};

pub const DEFAULT_BINS: usize = 2048;

/// Histogram of absolute activation values over `[0, bins * bin_width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    counts: Vec<u64>,
    bin_width: f64,
}

impl Histogram {
    pub fn new(counts: Vec<u64>, bin_width: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::param("histogram needs at least one bin"));
        }
        if !(bin_width > 0.0 && bin_width.is_finite()) {
            return Err(Error::param(format!("bin width must be positive, got {bin_width}")));
        }
        Ok(Self { counts, bin_width })
    }

    /// Bin `|v|` over `[0, max |v|]`; the maximum lands in the last bin.
    /// Returns `None` when every value is zero.
    pub fn from_values<'a>(values: impl IntoIterator<Item = &'a [f32]> + Clone, bins: usize) -> Option<Self> {
        let max = values.clone().into_iter().fold(0.0f32, |m, s| m.max(max_abs(s)));
        if !(max > 0.0 && max.is_finite()) || bins == 0 {
            return None;
        }
        let bin_width = max as f64 / bins as f64;
        let mut counts = vec![0u64; bins];
        for slice in values {
            for &v in slice {
                let bin = ((v.abs() as f64 / bin_width) as usize).min(bins - 1);
                counts[bin] += 1;
            }
        }
        Some(Self { counts, bin_width })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// KL(P || Q) for clipping after the first `keep` bins.
pub(crate) fn candidate_divergence(counts: &[u64], keep: usize, quant_levels: usize) -> f64 {
    let mut p: Vec<f64> = counts[..keep].iter().map(|&c| c as f64).collect();
    let outliers: u64 = counts[keep..].iter().sum();
    p[keep - 1] += outliers as f64;

    let merged = keep / quant_levels;
    let mut q = vec![0.0f64; keep];
    for level in 0..quant_levels {
        let start = level * merged;
        let end = if level + 1 == quant_levels {
            keep
        } else {
            start + merged
        };
        let group = &p[start..end];
        let mass = counts[start..end].iter().sum::<u64>() as f64;
        let nonzero = group.iter().filter(|&&v| v > 0.0).count();
        if nonzero == 0 {
            continue;
        }
        let share = mass / nonzero as f64;
        for (qk, &pk) in q[start..end].iter_mut().zip(group) {
            if pk > 0.0 {
                *qk = share;
            }
        }
    }

    let p_total: f64 = p.iter().sum();
    let q_total: f64 = q.iter().sum();
    let mut divergence = 0.0f64;
    for (&pk, &qk) in p.iter().zip(&q) {
        if pk > 0.0 {
            if qk == 0.0 {
                return f64::INFINITY;
            }
            let pn = pk / p_total;
            let qn = qk / q_total;
            divergence += pn * (pn / qn).ln();
        }
    }
    divergence
}

/// Clip threshold minimizing KL divergence; `quant_levels` is `2^(b-1)`.
///
/// A histogram with fewer bins than `quant_levels` cannot be searched and
/// yields its full range (the max-abs threshold).
pub fn kld_threshold(hist: &Histogram, quant_levels: usize) -> Result<f64> {
    if quant_levels == 0 {
        return Err(Error::param("quant_levels must be positive"));
    }
    if hist.total() == 0 {
        return Err(Error::data("histogram is empty"));
    }
    let bins = hist.counts.len();
    if bins < quant_levels {
        return Ok(bins as f64 * hist.bin_width);
    }
    let mut best = (quant_levels, f64::INFINITY);
    for keep in quant_levels..=bins {
        let kl = candidate_divergence(&hist.counts, keep, quant_levels);
        if kl < best.1 {
            best = (keep, kl);
        }
    }
    Ok(best.0 as f64 * hist.bin_width)
}

/// Baseline calibration: KL-divergence activation thresholds with per-channel
/// max-abs weight scales.
pub fn calibrate_kld(
    model: &ModelGraph,
    calib: &CalibrationSet,
    bits: Bits,
    rounding: RoundingMode,
    bins: usize,
) -> Result<NetworkScales> {
    let fp32 = fp32_layer_outputs(model, calib)?;
    let quant_levels = 1usize << (bits.get() - 1);
    let mut scales = NetworkScales::new(rounding);
    for l in model.quantized_layers() {
        let layer = model.linear_layer(l).expect("weighted layer");
        let inputs = layer_inputs(calib, &fp32, l);
        let activation_scale = match Histogram::from_values(inputs.iter().map(|t| t.data()), bins) {
            Some(hist) => scale_for_max(bits, kld_threshold(&hist, quant_levels)? as f32),
            None => 1.0,
        };
        scales.insert(
            l,
            QuantParams::new(bits, activation_scale, weight_scales_maxabs(&layer.weight, bits))?,
        );
    }
    Ok(scales)
}
