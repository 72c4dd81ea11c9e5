//! Alternating grid search over weight and activation scales.
//!
//! Each weighted layer is tuned to maximize the mean cosine similarity between
//! its FP32 output and its simulated-quantized output, with the layer's input
//! taken from the already-quantized prefix of the network. Weight scales are
//! tuned for all layers first (each output channel independently, all channels
//! sharing one convolution per candidate index), then activation scales.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::maxabs::init_from_outputs;
use super::{fp32_layer_outputs, CalibrationSet, SearchConfig};
use crate::error::Result;
use crate::intsim::{int_conv2d, run_layer_quantized, AccumulatorModel};
use crate::metrics::{cosine_slices, mean};
use crate::model::{LinearLayer, ModelGraph};
use crate::quant::{
    add_bias, dequantize_output, quantize, quantize_weights_per_channel, NetworkScales, QuantParams, RoundingMode,
};
use crate::tensor::Tensor;

/// `grid_points` values evenly spaced on `[alpha * s, beta * s]`, plus `s`
/// itself when `include_current` is set and `s` is not already on the grid.
/// Sorted ascending.
pub fn candidate_grid(incumbent: f32, cfg: &SearchConfig) -> Vec<f32> {
    let s = incumbent as f64;
    let (lo, hi) = (cfg.alpha * s, cfg.beta * s);
    let steps = (cfg.grid_points - 1) as f64;
    let mut grid: Vec<f32> = (0..cfg.grid_points)
        .map(|i| (lo + (hi - lo) * i as f64 / steps) as f32)
        .collect();
    if cfg.include_current && !grid.contains(&incumbent) {
        let at = grid.partition_point(|&g| g < incumbent);
        grid.insert(at, incumbent);
    }
    grid
}

/// One weighted layer's search inputs.
#[derive(Debug, Clone)]
pub struct LayerProblem<'a> {
    pub layer: LinearLayer<'a>,
    /// Input activation per sample, from the quantized prefix.
    pub inputs: &'a [Tensor<f32>],
    /// FP32 output per sample.
    pub targets: &'a [Tensor<f32>],
    pub rounding: RoundingMode,
    pub acc: AccumulatorModel,
}

impl LayerProblem<'_> {
    fn quantized_inputs(&self, params: &QuantParams) -> Result<Vec<Tensor<i8>>> {
        self.inputs
            .iter()
            .map(|a| {
                let x = self.layer.prepare_input(a)?;
                quantize(&x, params.activation_scale, params.bits, self.rounding)
            })
            .collect()
    }

    fn output(
        &self,
        qa: &Tensor<i8>,
        qw: &Tensor<i8>,
        activation_scale: f32,
        weight_scales: &[f32],
    ) -> Result<Tensor<f32>> {
        let raw = int_conv2d(qa, qw, self.layer.geometry, &self.acc)?;
        let mut out = dequantize_output(&raw.output, activation_scale, weight_scales)?;
        add_bias(&mut out, self.layer.bias);
        Ok(out)
    }

    fn channel_dead(&self, c: usize) -> bool {
        self.targets.iter().all(|t| t.channel(c).iter().all(|&v| v == 0.0))
    }

    fn all_dead(&self) -> bool {
        self.targets.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

/// Per-channel objective: for each output channel, the mean over samples of the
/// cosine between FP32 and quantized channel slices.
pub fn channel_objectives(problem: &LayerProblem<'_>, params: &QuantParams) -> Result<Vec<f64>> {
    let channels = problem.layer.out_channels();
    let scales = params.channel_scales(channels)?;
    let qa = problem.quantized_inputs(params)?;
    let qw = quantize_weights_per_channel(&problem.layer.weight, &scales, params.bits, problem.rounding)?;
    channel_means(problem, &qa, &qw, params.activation_scale, &scales)
}

fn channel_means(
    problem: &LayerProblem<'_>,
    qa: &[Tensor<i8>],
    qw: &Tensor<i8>,
    activation_scale: f32,
    scales: &[f32],
) -> Result<Vec<f64>> {
    let channels = scales.len();
    let mut per_sample = Vec::with_capacity(qa.len());
    for (x, target) in qa.iter().zip(problem.targets) {
        let out = problem.output(x, qw, activation_scale, scales)?;
        per_sample.push(
            (0..channels)
                .map(|c| cosine_slices(target.channel(c), out.channel(c)))
                .collect::<Vec<_>>(),
        );
    }
    Ok((0..channels)
        .map(|c| mean(&per_sample.iter().map(|s| s[c]).collect::<Vec<_>>()))
        .collect())
}

/// Whole-layer objective: mean over samples of the output cosine.
pub fn layer_objective(problem: &LayerProblem<'_>, params: &QuantParams) -> Result<f64> {
    let scales = params.channel_scales(problem.layer.out_channels())?;
    let qa = problem.quantized_inputs(params)?;
    let qw = quantize_weights_per_channel(&problem.layer.weight, &scales, params.bits, problem.rounding)?;
    layer_mean(problem, &qa, &qw, params.activation_scale, &scales)
}

fn layer_mean(
    problem: &LayerProblem<'_>,
    qa: &[Tensor<i8>],
    qw: &Tensor<i8>,
    activation_scale: f32,
    scales: &[f32],
) -> Result<f64> {
    let mut values = Vec::with_capacity(qa.len());
    for (x, target) in qa.iter().zip(problem.targets) {
        let out = problem.output(x, qw, activation_scale, scales)?;
        values.push(cosine_slices(target.data(), out.data()));
    }
    Ok(mean(&values))
}

/// Prefer a higher objective; among equal objectives, the smaller scale.
fn better(candidate: (f64, f32), best: (f64, f32)) -> bool {
    candidate.0 > best.0 || (candidate.0 == best.0 && candidate.1 < best.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSearch {
    pub scales: Vec<f32>,
    /// Per-channel objective at the incoming scales.
    pub before: Vec<f64>,
    /// Per-channel objective at the returned scales.
    pub after: Vec<f64>,
}

/// Search every output channel's weight scale over its own candidate grid,
/// keeping the activation scale fixed.
///
/// Candidate index `k` is evaluated for all channels with one convolution per
/// sample: channel `c` uses the `k`-th entry of its grid (or its incumbent once
/// its grid is exhausted, in which case the result is ignored). A channel whose
/// FP32 target is zero on every sample keeps its scale.
pub fn eq_search_layer_weights(
    problem: &LayerProblem<'_>,
    params: &QuantParams,
    cfg: &SearchConfig,
) -> Result<WeightSearch> {
    let channels = problem.layer.out_channels();
    let current = params.channel_scales(channels)?;
    let grids: Vec<Vec<f32>> = current.iter().map(|&s| candidate_grid(s, cfg)).collect();
    let passes = grids.iter().map(Vec::len).max().unwrap_or(0);
    let qa = problem.quantized_inputs(params)?;

    let evaluate = |scales: &[f32]| -> Result<Vec<f64>> {
        let qw = quantize_weights_per_channel(&problem.layer.weight, scales, params.bits, problem.rounding)?;
        channel_means(problem, &qa, &qw, params.activation_scale, scales)
    };

    let before = evaluate(&current)?;
    let results: Vec<(Vec<f32>, Vec<f64>)> = (0..passes)
        .into_par_iter()
        .map(|k| {
            let scales: Vec<f32> = grids
                .iter()
                .zip(&current)
                .map(|(g, &s)| g.get(k).copied().unwrap_or(s))
                .collect();
            let objective = evaluate(&scales)?;
            Ok((scales, objective))
        })
        .collect::<Result<_>>()?;

    let mut scales = current.clone();
    let mut after = before.clone();
    for c in 0..channels {
        if problem.channel_dead(c) {
            continue;
        }
        let mut best: Option<(f64, f32)> = None;
        for (k, (cand, objective)) in results.iter().enumerate() {
            if k >= grids[c].len() {
                continue;
            }
            let entry = (objective[c], cand[c]);
            if best.is_none_or(|b| better(entry, b)) {
                best = Some(entry);
            }
        }
        if let Some((objective, scale)) = best {
            scales[c] = scale;
            after[c] = objective;
        }
    }
    Ok(WeightSearch { scales, before, after })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationSearch {
    pub scale: f32,
    pub before: f64,
    pub after: f64,
}

/// Search the layer's activation scale over its candidate grid with the weight
/// scales fixed. An all-zero target keeps the current scale.
pub fn eq_search_layer_activation(
    problem: &LayerProblem<'_>,
    params: &QuantParams,
    cfg: &SearchConfig,
) -> Result<ActivationSearch> {
    let channels = problem.layer.out_channels();
    let weight_scales = params.channel_scales(channels)?;
    let qw = quantize_weights_per_channel(&problem.layer.weight, &weight_scales, params.bits, problem.rounding)?;

    let evaluate = |scale: f32| -> Result<f64> {
        let trial = QuantParams {
            activation_scale: scale,
            ..params.clone()
        };
        let qa = problem.quantized_inputs(&trial)?;
        layer_mean(problem, &qa, &qw, scale, &weight_scales)
    };

    let before = evaluate(params.activation_scale)?;
    if problem.all_dead() {
        return Ok(ActivationSearch {
            scale: params.activation_scale,
            before,
            after: before,
        });
    }
    let grid = candidate_grid(params.activation_scale, cfg);
    let objectives: Vec<f64> = grid.par_iter().map(|&s| evaluate(s)).collect::<Result<_>>()?;
    let mut best: Option<(f64, f32)> = None;
    for (&objective, &scale) in objectives.iter().zip(&grid) {
        if best.is_none_or(|b| better((objective, scale), b)) {
            best = Some((objective, scale));
        }
    }
    let (after, scale) = best.unwrap_or((before, params.activation_scale));
    Ok(ActivationSearch { scale, before, after })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchPhase {
    Weights,
    Activation,
}

impl SearchPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchPhase::Weights => "weights",
            SearchPhase::Activation => "activation",
        }
    }
}

/// One layer search, for the calibration report.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchLogEntry {
    pub round: usize,
    pub layer: usize,
    pub phase: SearchPhase,
    /// Mean objective before and after (mean over channels for weight searches).
    pub before: f64,
    pub after: f64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone)]
pub struct EqOutcome {
    pub scales: NetworkScales,
    pub rounds_run: usize,
    /// A full round finished without changing any scale.
    pub converged: bool,
    pub budget_exhausted: bool,
    pub log: Vec<SearchLogEntry>,
}

/// Whole-network search: max-abs initialization, then per round a weight sweep
/// over all layers followed by an activation sweep. Each layer's inputs are
/// recomputed from the current quantized prefix; targets are FP32 outputs.
pub fn eq_optimize_network(
    model: &ModelGraph,
    calib: &CalibrationSet,
    cfg: &SearchConfig,
    acc: &AccumulatorModel,
) -> Result<EqOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let fp32 = fp32_layer_outputs(model, calib)?;
    let mut scales = init_from_outputs(model, calib, &fp32, cfg.bits, cfg.rounding)?;
    let acc = acc.with_bits(cfg.bits);
    let mut outcome = EqOutcome {
        scales: NetworkScales::default(),
        rounds_run: 0,
        converged: false,
        budget_exhausted: false,
        log: Vec::new(),
    };

    'rounds: for round in 0..cfg.rounds {
        let mut changed = false;
        for phase in [SearchPhase::Weights, SearchPhase::Activation] {
            let mut acts: Vec<Tensor<f32>> = calib.samples().to_vec();
            for (l, targets) in fp32.iter().enumerate() {
                if let Some(layer) = model.linear_layer(l) {
                    if cfg.time_budget.is_some_and(|budget| started.elapsed() > budget) {
                        outcome.budget_exhausted = true;
                        break 'rounds;
                    }
                    let layer_started = Instant::now();
                    let problem = LayerProblem {
                        layer,
                        inputs: &acts,
                        targets,
                        rounding: cfg.rounding,
                        acc,
                    };
                    let params = scales.get_mut(l).expect("initialized layer");
                    let (before, after) = match phase {
                        SearchPhase::Weights => {
                            let found = eq_search_layer_weights(&problem, params, cfg)?;
                            changed |= found.scales != params.weight_scales;
                            params.weight_scales = found.scales;
                            (mean(&found.before), mean(&found.after))
                        }
                        SearchPhase::Activation => {
                            let found = eq_search_layer_activation(&problem, params, cfg)?;
                            changed |= found.scale != params.activation_scale;
                            params.activation_scale = found.scale;
                            (found.before, found.after)
                        }
                    };
                    outcome.log.push(SearchLogEntry {
                        round,
                        layer: l,
                        phase,
                        before,
                        after,
                        wall_time: layer_started.elapsed(),
                    });
                }
                acts = acts
                    .par_iter()
                    .map(|a| run_layer_quantized(model, &scales, l, a, &acc).map(|(y, _)| y))
                    .collect::<Result<_>>()?;
            }
        }
        outcome.rounds_run = round + 1;
        if !changed {
            outcome.converged = true;
            break;
        }
    }
    outcome.scales = scales;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvGeometry;
    use crate::quant::Bits;
    use std::borrow::Cow;

    fn cfg(bits: u8) -> SearchConfig {
        SearchConfig::new(Bits::new(bits).unwrap())
    }

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grid_contract() {
        let c = cfg(7);
        let g = candidate_grid(10.0, &c);
        assert!(g.len() == 100 || g.len() == 101);
        assert!(g.contains(&10.0));
        assert_eq!(g[0], 5.0);
        assert_eq!(*g.last().unwrap(), 20.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));

        let no_inc = SearchConfig {
            include_current: false,
            ..c.clone()
        };
        let g = candidate_grid(3.0, &no_inc);
        assert_eq!(g.len(), 100);

        // incumbent off the grid is added
        let odd = SearchConfig { grid_points: 4, ..c };
        let g = candidate_grid(1.0, &odd);
        assert_eq!(g, vec![0.5, 1.0, 1.5, 2.0]);
        let odd = SearchConfig { grid_points: 3, ..odd };
        let g = candidate_grid(1.0, &odd);
        assert_eq!(g, vec![0.5, 1.0, 1.25, 2.0]);
    }

    #[test]
    fn single_weight_matches_brute_force() {
        let w = t(&[1, 1, 1, 1], &[0.7]);
        let input = [t(&[1, 1, 1, 1], &[1.0])];
        let target = [t(&[1, 1, 1, 1], &[0.7])];
        let bits = Bits::new(7).unwrap();
        let problem = LayerProblem {
            layer: LinearLayer::from_parts(Cow::Borrowed(&w), None, ConvGeometry::UNIT),
            inputs: &input,
            targets: &target,
            rounding: RoundingMode::Nearest,
            acc: AccumulatorModel::narrow(bits),
        };
        let params = QuantParams::new(bits, 63.0, vec![90.0]).unwrap();
        let c = cfg(7);
        let found = eq_search_layer_weights(&problem, &params, &c).unwrap();

        // brute force over the interval: 100 evenly spaced points plus the incumbent
        let mut grid: Vec<f32> = (0..100).map(|i| (45.0 + 135.0 * i as f64 / 99.0) as f32).collect();
        if !grid.contains(&90.0) {
            grid.push(90.0);
        }
        let qa = (1.0f64 * 63.0).round();
        let mut best = (f64::NEG_INFINITY, f32::INFINITY);
        for &s in &grid {
            let qw = (0.7f64 * s as f64).round().clamp(-63.0, 63.0);
            let out = (((qa * qw) as f32) / (63.0 * s)) as f64;
            let target = 0.7f32 as f64;
            let cos = if out == 0.0 {
                0.0
            } else {
                (out * target) / ((out * out).sqrt() * (target * target).sqrt())
            };
            if cos > best.0 || (cos == best.0 && s < best.1) {
                best = (cos, s);
            }
        }
        assert_eq!(found.scales, vec![best.1]);
        assert_eq!(found.after, vec![best.0]);
        assert!(found.after[0] >= found.before[0]);
    }

    #[test]
    fn zero_target_keeps_scales() {
        let w = t(&[2, 1, 1, 1], &[0.7, -0.2]);
        let input = [t(&[1, 1, 1, 2], &[1.0, 0.5])];
        let target = [Tensor::zeros(vec![1, 2, 1, 2])];
        let bits = Bits::new(8).unwrap();
        let problem = LayerProblem {
            layer: LinearLayer::from_parts(Cow::Borrowed(&w), None, ConvGeometry::UNIT),
            inputs: &input,
            targets: &target,
            rounding: RoundingMode::Nearest,
            acc: AccumulatorModel::wide(bits),
        };
        let params = QuantParams::new(bits, 100.0, vec![50.0, 60.0]).unwrap();
        let c = cfg(8);
        assert_eq!(
            eq_search_layer_weights(&problem, &params, &c).unwrap().scales,
            vec![50.0, 60.0]
        );
        assert_eq!(eq_search_layer_activation(&problem, &params, &c).unwrap().scale, 100.0);
    }

    #[test]
    fn activation_search_finds_lossless_scale() {
        // inputs are multiples of 1/8 in [-1, 1]; with S_a = 8 and S_w = 1 every
        // value is exactly representable at b = 5 (q = 15 > 8)
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let input = [t(&[1, 1, 1, 4], &[0.125, -0.5, 1.0, 0.875])];
        let target = [input[0].clone()];
        let bits = Bits::new(5).unwrap();
        let problem = LayerProblem {
            layer: LinearLayer::from_parts(Cow::Borrowed(&w), None, ConvGeometry::UNIT),
            inputs: &input,
            targets: &target,
            rounding: RoundingMode::Nearest,
            acc: AccumulatorModel::narrow(bits),
        };
        // grid on [2, 8] with 4 points: 2, 4, 6, 8; only 8 is lossless
        let c = SearchConfig {
            grid_points: 4,
            alpha: 0.5,
            beta: 2.0,
            ..cfg(5)
        };
        let params = QuantParams::new(bits, 4.0, vec![1.0]).unwrap();
        let grid = candidate_grid(4.0, &c);
        assert!(grid.contains(&8.0));
        let found = eq_search_layer_activation(&problem, &params, &c).unwrap();
        assert_eq!(found.after, 1.0);
        assert!(found.after >= found.before);
        assert_eq!(
            layer_objective(
                &problem,
                &QuantParams {
                    activation_scale: found.scale,
                    ..params
                }
            )
            .unwrap(),
            1.0
        );
    }
}
