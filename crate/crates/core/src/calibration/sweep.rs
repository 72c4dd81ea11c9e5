use std::fmt::Write as _;
use std::ops::RangeInclusive;

use super::{calibrate, evaluate, CalibrationSet, Method, SearchConfig};
use crate::error::{Error, Result};
use crate::intsim::{forward_quantized_traced, max_safe_group, AccumulatorModel};
use crate::model::ModelGraph;
use crate::quant::Bits;

pub const SWEEP_CSV_HEADER: &str =
    "bits,method,mean_final_cosine,group_size_w16,macs_per_output,widenings_per_output_w16";

/// One (bit width, method) cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub bits: Bits,
    pub method: Method,
    pub final_cosine: f64,
    /// Products per 16-bit partial sum at this width.
    pub group_size: u64,
    /// Mean multiply-accumulates per output element over the weighted layers.
    pub macs_per_output: f64,
    /// Mean 16-bit to 32-bit widenings per output element.
    pub widenings_per_output: f64,
}

/// Calibrate with every method at every bit width and score the final output
/// on the calibration samples, executing with 16-bit intermediates.
pub fn sweep(
    model: &ModelGraph,
    calib: &CalibrationSet,
    bits: RangeInclusive<u8>,
    methods: &[Method],
    base: &SearchConfig,
) -> Result<Vec<SweepRow>> {
    if methods.is_empty() {
        return Err(Error::param("sweep needs at least one method"));
    }
    if bits.is_empty() {
        return Err(Error::param(format!("empty bit range {bits:?}")));
    }
    let mut rows = Vec::new();
    for b in bits {
        let b = Bits::new(b)?;
        let cfg = SearchConfig {
            bits: b,
            ..base.clone()
        };
        let search_acc = AccumulatorModel::wide(b);
        let run_acc = AccumulatorModel::narrow(b);
        for &method in methods {
            let cal = calibrate(method, model, calib, &cfg, &search_acc)?;
            let report = evaluate(model, &cal.scales, calib.samples(), &run_acc)?;
            let (_, costs) = forward_quantized_traced(model, &cal.scales, &calib.samples()[0], &run_acc)?;
            let outputs: u64 = costs.iter().map(|c| c.outputs).sum();
            let macs: u64 = costs.iter().map(|c| c.macs).sum();
            let widenings: u64 = costs.iter().map(|c| c.widenings).sum();
            rows.push(SweepRow {
                bits: b,
                method,
                final_cosine: report.final_output,
                group_size: max_safe_group(b, 16),
                macs_per_output: macs as f64 / outputs.max(1) as f64,
                widenings_per_output: widenings as f64 / outputs.max(1) as f64,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.bits, r.method, r.final_cosine, r.group_size, r.macs_per_output, r.widenings_per_output
        );
    }
    out
}
