//! Scale selection: the alternating cosine-similarity grid search, plus the
//! max-abs and KL-divergence baselines it is compared against.

mod eval;
mod kld;
mod maxabs;
mod search;
mod sweep;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::intsim::AccumulatorModel;
use crate::model::{forward_fp32, ModelGraph};
use crate::quant::{Bits, NetworkScales, RoundingMode};
use crate::tensor::Tensor;

pub use eval::{evaluate, EvalReport};
pub use kld::{calibrate_kld, kld_threshold, Histogram, DEFAULT_BINS};
pub use maxabs::init_scales_maxabs;
pub use search::{
    candidate_grid, channel_objectives, eq_optimize_network, eq_search_layer_activation, eq_search_layer_weights,
    layer_objective, ActivationSearch, EqOutcome, LayerProblem, SearchLogEntry, SearchPhase, WeightSearch,
};
pub use sweep::{sweep, sweep_csv, SweepRow, SWEEP_CSV_HEADER};

/// Settings of the scale search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Lower end of the candidate interval, as a fraction of the incumbent.
    pub alpha: f64,
    /// Upper end of the candidate interval, as a multiple of the incumbent.
    pub beta: f64,
    /// Linearly spaced candidates per interval.
    pub grid_points: usize,
    /// Alternating weight/activation rounds.
    pub rounds: usize,
    pub samples: usize,
    pub bits: Bits,
    /// Also evaluate the incumbent scale, so a search never regresses.
    pub include_current: bool,
    pub rounding: RoundingMode,
    /// Wall-clock limit for the whole-network search; `None` is unlimited.
    pub time_budget: Option<Duration>,
}

impl SearchConfig {
    pub fn new(bits: Bits) -> Self {
        Self {
            alpha: 0.5,
            beta: 2.0,
            grid_points: 100,
            rounds: 1,
            samples: 50,
            bits,
            include_current: true,
            rounding: RoundingMode::Nearest,
            time_budget: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0 && self.beta > 1.0 && self.beta.is_finite()) {
            return Err(Error::param(format!(
                "need 0 < alpha < 1 < beta, got alpha = {}, beta = {}",
                self.alpha, self.beta
            )));
        }
        if self.grid_points < 2 {
            return Err(Error::param("grid needs at least 2 points"));
        }
        if self.rounds < 1 {
            return Err(Error::param("at least one search round is required"));
        }
        if self.samples < 1 {
            return Err(Error::param("at least one calibration sample is required"));
        }
        Ok(())
    }
}

/// Calibration inputs, all of the model's input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    samples: Vec<Tensor<f32>>,
}

impl CalibrationSet {
    pub fn new(samples: Vec<Tensor<f32>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("calibration set is empty"));
        }
        let shape = samples[0].shape().to_vec();
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.shape() != shape) {
            return Err(Error::data(format!(
                "calibration sample {i} has shape {:?}, expected {shape:?}",
                s.shape()
            )));
        }
        Ok(Self { samples })
    }

    /// Checks that every sample matches the model input.
    pub fn check_model(&self, model: &ModelGraph) -> Result<()> {
        let shape = self.samples[0].shape();
        if shape != model.input_shape() {
            return Err(Error::data(format!(
                "calibration samples have shape {shape:?}, model expects {:?}",
                model.input_shape()
            )));
        }
        Ok(())
    }

    pub fn samples(&self) -> &[Tensor<f32>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.samples.len() {
            return Err(Error::data(format!(
                "requested {n} samples from a set of {}",
                self.samples.len()
            )));
        }
        Ok(Self {
            samples: self.samples[..n].to_vec(),
        })
    }
}

/// FP32 outputs of every layer for every sample, indexed `[layer][sample]`.
pub(crate) fn fp32_layer_outputs(model: &ModelGraph, calib: &CalibrationSet) -> Result<Vec<Vec<Tensor<f32>>>> {
    calib.check_model(model)?;
    let per_sample: Vec<Vec<Tensor<f32>>> = calib
        .samples()
        .par_iter()
        .map(|x| forward_fp32(model, x))
        .collect::<Result<_>>()?;
    let layers = model.layers().len();
    let mut by_layer: Vec<Vec<Tensor<f32>>> = (0..layers).map(|_| Vec::with_capacity(calib.len())).collect();
    for outs in per_sample {
        for (l, t) in outs.into_iter().enumerate() {
            by_layer[l].push(t);
        }
    }
    Ok(by_layer)
}

/// FP32 input of layer `l` for each sample.
pub(crate) fn layer_inputs<'a>(
    calib: &'a CalibrationSet,
    fp32: &'a [Vec<Tensor<f32>>],
    layer: usize,
) -> &'a [Tensor<f32>] {
    if layer == 0 {
        calib.samples()
    } else {
        &fp32[layer - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Alternating cosine-similarity grid search.
    Eq,
    Kld,
    MaxAbs,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Eq => "eq",
            Method::Kld => "kld",
            Method::MaxAbs => "maxabs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq" => Ok(Method::Eq),
            "kld" => Ok(Method::Kld),
            "maxabs" => Ok(Method::MaxAbs),
            other => Err(Error::param(format!("unknown calibration method '{other}'"))),
        }
    }
}

/// Result of [`calibrate`].
#[derive(Debug, Clone)]
pub struct Calibration {
    pub method: Method,
    pub scales: NetworkScales,
    /// Per-layer search log; empty for the baselines.
    pub log: Vec<SearchLogEntry>,
    pub budget_exhausted: bool,
}

/// Run one calibration method with the given settings.
pub fn calibrate(
    method: Method,
    model: &ModelGraph,
    calib: &CalibrationSet,
    cfg: &SearchConfig,
    acc: &AccumulatorModel,
) -> Result<Calibration> {
    cfg.validate()?;
    match method {
        Method::MaxAbs => Ok(Calibration {
            method,
            scales: init_scales_maxabs(model, calib, cfg.bits, cfg.rounding)?,
            log: Vec::new(),
            budget_exhausted: false,
        }),
        Method::Kld => Ok(Calibration {
            method,
            scales: calibrate_kld(model, calib, cfg.bits, cfg.rounding, DEFAULT_BINS)?,
            log: Vec::new(),
            budget_exhausted: false,
        }),
        Method::Eq => {
            let outcome = eq_optimize_network(model, calib, cfg, acc)?;
            Ok(Calibration {
                method,
                scales: outcome.scales,
                log: outcome.log,
                budget_exhausted: outcome.budget_exhausted,
            })
        }
    }
}
