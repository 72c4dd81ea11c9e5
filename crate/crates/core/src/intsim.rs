//! Bit-exact integer convolution with a narrow-accumulator model.
//!
//! With a 16-bit intermediate, products are summed into an i16 partial sum for
//! at most `group_size` multiply-accumulates, then the partial sum is widened
//! into an i32 accumulator. With `b`-bit symmetric operands the group size
//! `floor((2^15 - 1) / (2^(b-1) - 1)^2)` makes overflow impossible: 8 for
//! 7-bit operands, 2 for 8-bit ones. Products are accumulated in
//! (input-channel, kernel-row, kernel-col) order and the partial sum is also
//! widened at the end of that loop, so a short final group is covered by the
//! same bound.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, OverflowReport, Result};
use crate::model::{ConvGeometry, ModelGraph};
use crate::quant::{add_bias, dequantize_output, quantize, quantize_weights_per_channel, Bits, NetworkScales};
use crate::tensor::Tensor;

/// Width of the intermediate register that receives products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccumulatorWidth {
    W16,
    W32,
}

impl AccumulatorWidth {
    pub fn bits(self) -> u32 {
        match self {
            AccumulatorWidth::W16 => 16,
            AccumulatorWidth::W32 => 32,
        }
    }

    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            16 => Ok(AccumulatorWidth::W16),
            32 => Ok(AccumulatorWidth::W32),
            other => Err(Error::param(format!("accumulator width must be 16 or 32, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OverflowPolicy {
    #[default]
    Error,
    Saturate,
}

impl fmt::Display for OverflowPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OverflowPolicy::Error => "error",
            OverflowPolicy::Saturate => "saturate",
        })
    }
}

impl FromStr for OverflowPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "error" => Ok(OverflowPolicy::Error),
            "saturate" => Ok(OverflowPolicy::Saturate),
            other => Err(Error::param(format!("unknown overflow policy '{other}'"))),
        }
    }
}

/// `floor((2^(w-1) - 1) / (2^(b-1) - 1)^2)`: products of full-range `b`-bit
/// operands that fit in a signed `w`-bit register.
pub fn max_safe_group(bits: Bits, width_bits: u32) -> u64 {
    let q = bits.qmax() as u64;
    ((1u64 << (width_bits - 1)) - 1) / (q * q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccumulatorModel {
    bits: Bits,
    width: AccumulatorWidth,
    /// `None` means products go straight into the 32-bit accumulator.
    group_size: Option<usize>,
    forced_group: bool,
    policy: OverflowPolicy,
}

impl AccumulatorModel {
    pub fn new(bits: Bits, width: AccumulatorWidth, policy: OverflowPolicy) -> Self {
        let group_size = match width {
            AccumulatorWidth::W16 => Some(max_safe_group(bits, 16) as usize),
            AccumulatorWidth::W32 => None,
        };
        if let Some(g) = group_size {
            debug_assert!(g >= 1);
        }
        Self {
            bits,
            width,
            group_size,
            forced_group: false,
            policy,
        }
    }

    /// 16-bit intermediates, overflow is an error.
    pub fn narrow(bits: Bits) -> Self {
        Self::new(bits, AccumulatorWidth::W16, OverflowPolicy::Error)
    }

    /// Products accumulate directly in 32 bits.
    pub fn wide(bits: Bits) -> Self {
        Self::new(bits, AccumulatorWidth::W32, OverflowPolicy::Error)
    }

    /// Override the derived group size; only meaningful with a 16-bit
    /// intermediate. Used to demonstrate overflow with unsafe groupings.
    pub fn with_forced_group(mut self, group: usize) -> Result<Self> {
        if group == 0 {
            return Err(Error::param("group size must be at least 1"));
        }
        self.width = AccumulatorWidth::W16;
        self.group_size = Some(group);
        self.forced_group = true;
        Ok(self)
    }

    /// Same register layout for a different operand width; a forced group size is kept.
    pub fn with_bits(self, bits: Bits) -> Self {
        if self.forced_group {
            return Self { bits, ..self };
        }
        Self::new(bits, self.width, self.policy)
    }

    pub fn bits(&self) -> Bits {
        self.bits
    }

    pub fn width(&self) -> AccumulatorWidth {
        self.width
    }

    pub fn group_size(&self) -> Option<usize> {
        self.group_size
    }

    pub fn policy(&self) -> OverflowPolicy {
        self.policy
    }

    /// Widening operations needed for one output with `macs` products.
    pub fn widenings_per_output(&self, macs: usize) -> usize {
        match self.group_size {
            Some(g) => macs.div_ceil(g),
            None => macs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntConvOutput {
    pub output: Tensor<i32>,
    /// Total partial-sum widenings (16-bit) or product widenings (32-bit).
    pub widenings: u64,
    pub macs: u64,
}

const I16_BOUNDS: (i64, i64) = (i16::MIN as i64, i16::MAX as i64);
const I32_BOUNDS: (i64, i64) = (i32::MIN as i64, i32::MAX as i64);

struct Accumulate {
    group: Option<usize>,
    policy: OverflowPolicy,
}

impl Accumulate {
    /// Sum one output's products in loop order. Returns the value and the number of widenings.
    #[inline]
    fn run(&self, products: impl Iterator<Item = i32>) -> std::result::Result<(i32, u64), (i64, (i64, i64))> {
        match self.group {
            Some(g) => {
                let mut acc: i64 = 0;
                let mut partial: i32 = 0;
                let mut count = 0usize;
                let mut widenings = 0u64;
                for p in products {
                    partial += p;
                    if !(I16_BOUNDS.0 as i32..=I16_BOUNDS.1 as i32).contains(&partial) {
                        match self.policy {
                            OverflowPolicy::Error => return Err((partial as i64, I16_BOUNDS)),
                            OverflowPolicy::Saturate => {
                                partial = partial.clamp(I16_BOUNDS.0 as i32, I16_BOUNDS.1 as i32)
                            }
                        }
                    }
                    count += 1;
                    if count == g {
                        acc += partial as i64;
                        widenings += 1;
                        partial = 0;
                        count = 0;
                    }
                }
                if count > 0 {
                    acc += partial as i64;
                    widenings += 1;
                }
                self.finish(acc).map(|v| (v, widenings))
            }
            None => {
                let mut acc: i64 = 0;
                let mut widenings = 0u64;
                for p in products {
                    acc += p as i64;
                    widenings += 1;
                }
                self.finish(acc).map(|v| (v, widenings))
            }
        }
    }

    fn finish(&self, acc: i64) -> std::result::Result<i32, (i64, (i64, i64))> {
        if (I32_BOUNDS.0..=I32_BOUNDS.1).contains(&acc) {
            Ok(acc as i32)
        } else {
            match self.policy {
                OverflowPolicy::Error => Err((acc, I32_BOUNDS)),
                OverflowPolicy::Saturate => Ok(acc.clamp(I32_BOUNDS.0, I32_BOUNDS.1) as i32),
            }
        }
    }
}

fn check_operands(t: &Tensor<i8>, qmax: i32, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|&&v| (v as i32).abs() > qmax) {
        return Err(Error::param(format!("{what} operand {v} outside ±{qmax}")));
    }
    Ok(())
}

/// Integer convolution of quantized activations with quantized weights.
///
/// Zero-padding positions take part in the product count, so every output of
/// a layer needs the same number of widenings.
pub fn int_conv2d(
    a: &Tensor<i8>,
    w: &Tensor<i8>,
    geometry: ConvGeometry,
    model: &AccumulatorModel,
) -> Result<IntConvOutput> {
    let out_shape = geometry.output_shape(a.shape(), w.shape())?;
    let qmax = model.bits().qmax();
    check_operands(a, qmax, "activation")?;
    check_operands(w, qmax, "weight")?;

    let (cin, ih, iw) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let p = geometry.padding;
    let (ph, pw) = (ih + 2 * p, iw + 2 * p);

    let mut padded = vec![0i8; cin * ph * pw];
    for c in 0..cin {
        for y in 0..ih {
            let src = &a.data()[(c * ih + y) * iw..(c * ih + y + 1) * iw];
            let dst = (c * ph + y + p) * pw + p;
            padded[dst..dst + iw].copy_from_slice(src);
        }
    }

    let accumulate = Accumulate {
        group: model.group_size(),
        policy: model.policy(),
    };
    let padded = padded.as_slice();
    let wd = w.data();
    let mut out = Vec::with_capacity(cout * oh * ow);
    let mut widenings = 0u64;
    for o in 0..cout {
        let wo = &wd[o * cin * kh * kw..(o + 1) * cin * kh * kw];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * geometry.stride, ox * geometry.stride);
                let products = (0..cin).flat_map(|c| {
                    (0..kh).flat_map(move |ky| {
                        let row = (c * ph + y0 + ky) * pw + x0;
                        let wrow = (c * kh + ky) * kw;
                        padded[row..row + kw]
                            .iter()
                            .zip(&wo[wrow..wrow + kw])
                            .map(|(&x, &k)| x as i32 * k as i32)
                    })
                });
                match accumulate.run(products) {
                    Ok((v, n)) => {
                        out.push(v);
                        widenings += n;
                    }
                    Err((partial, bound)) => {
                        return Err(Error::Overflow(OverflowReport {
                            layer: None,
                            channel: o,
                            y: oy,
                            x: ox,
                            partial,
                            bound,
                        }))
                    }
                }
            }
        }
    }
    let macs = (cout * oh * ow * cin * kh * kw) as u64;
    Ok(IntConvOutput {
        output: Tensor::new(out_shape, out)?,
        widenings,
        macs,
    })
}

/// Cost counters of one quantized layer execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerCost {
    pub outputs: u64,
    pub macs: u64,
    pub widenings: u64,
}

/// Quantized forward pass: weighted layers run quantize, integer conv and
/// dequantize; relu and pooling run in FP32 on the dequantized values.
pub fn forward_quantized(
    model: &ModelGraph,
    scales: &NetworkScales,
    input: &Tensor<f32>,
    acc: &AccumulatorModel,
) -> Result<Vec<Tensor<f32>>> {
    forward_quantized_traced(model, scales, input, acc).map(|(outs, _)| outs)
}

/// [`forward_quantized`] plus per-layer cost counters (zero for FP32 layers).
pub fn forward_quantized_traced(
    model: &ModelGraph,
    scales: &NetworkScales,
    input: &Tensor<f32>,
    acc: &AccumulatorModel,
) -> Result<(Vec<Tensor<f32>>, Vec<LayerCost>)> {
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
    let mut costs = Vec::with_capacity(model.layers().len());
    for index in 0..model.layers().len() {
        let x = outputs.last().unwrap_or(input);
        let (y, cost) = run_layer_quantized(model, scales, index, x, acc)?;
        outputs.push(y);
        costs.push(cost);
    }
    Ok((outputs, costs))
}

/// Execute layer `index` of the quantized network on `input`.
pub fn run_layer_quantized(
    model: &ModelGraph,
    scales: &NetworkScales,
    index: usize,
    input: &Tensor<f32>,
    acc: &AccumulatorModel,
) -> Result<(Tensor<f32>, LayerCost)> {
    let Some(layer) = model.linear_layer(index) else {
        return Ok((model.run_layer_fp32(index, input)?, LayerCost::default()));
    };
    let params = scales
        .get(index)
        .ok_or_else(|| Error::config(format!("no quantization parameters for layer {index}")))?;
    let acc = acc.with_bits(params.bits);
    let x = layer.prepare_input(input)?;
    let qa = quantize(&x, params.activation_scale, params.bits, scales.rounding)?;
    let channel_scales = params.channel_scales(layer.out_channels())?;
    let qw = quantize_weights_per_channel(&layer.weight, &channel_scales, params.bits, scales.rounding)?;
    let raw = int_conv2d(&qa, &qw, layer.geometry, &acc).map_err(|e| e.at_layer(index))?;
    let mut out = dequantize_output(&raw.output, params.activation_scale, &channel_scales)?;
    add_bias(&mut out, layer.bias);
    let cost = LayerCost {
        outputs: raw.output.len() as u64,
        macs: raw.macs,
        widenings: raw.widenings,
    };
    Ok((out, cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(bits: u8) -> Bits {
        Bits::new(bits).unwrap()
    }

    fn i8t(shape: &[usize], data: Vec<i8>) -> Tensor<i8> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    // Exact integer convolution in i64 with bounds-checked padding.
    fn oracle_conv(a: &Tensor<i8>, w: &Tensor<i8>, g: ConvGeometry) -> Vec<i32> {
        let (cin, ih, iw) = (a.shape()[1], a.shape()[2], a.shape()[3]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (ih + 2 * g.padding - kh) / g.stride + 1;
        let ow = (iw + 2 * g.padding - kw) / g.stride + 1;
        let mut out = vec![];
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0i64;
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * g.stride + ky) as i64 - g.padding as i64;
                                let x = (ox * g.stride + kx) as i64 - g.padding as i64;
                                if y < 0 || x < 0 || y >= ih as i64 || x >= iw as i64 {
                                    continue;
                                }
                                let av = a.data()[(c * ih + y as usize) * iw + x as usize] as i64;
                                let wv = w.data()[((o * cin + c) * kh + ky) * kw + kx] as i64;
                                s += av * wv;
                            }
                        }
                    }
                    out.push(s as i32);
                }
            }
        }
        out
    }

    #[test]
    fn group_size_law() {
        assert_eq!(max_safe_group(b(7), 16), 8);
        assert_eq!(max_safe_group(b(8), 16), 2);
        assert_eq!(max_safe_group(b(4), 16), 668);
        assert_eq!(AccumulatorModel::narrow(b(7)).group_size(), Some(8));
        assert_eq!(AccumulatorModel::narrow(b(8)).group_size(), Some(2));
        assert_eq!(AccumulatorModel::wide(b(8)).group_size(), None);
        for bits in 2..=8 {
            assert!(max_safe_group(b(bits), 16) >= 1);
        }
    }

    #[test]
    fn eight_full_scale_int7_products_fit() {
        let a = i8t(&[1, 8, 1, 1], vec![63; 8]);
        let w = i8t(&[1, 8, 1, 1], vec![63; 8]);
        let out = int_conv2d(&a, &w, ConvGeometry::UNIT, &AccumulatorModel::narrow(b(7))).unwrap();
        assert_eq!(out.output.data(), &[8 * 3969]);
        assert_eq!(out.widenings, 1);
        let neg = i8t(&[1, 8, 1, 1], vec![-63; 8]);
        let out = int_conv2d(&neg, &w, ConvGeometry::UNIT, &AccumulatorModel::narrow(b(7))).unwrap();
        assert_eq!(out.output.data(), &[-8 * 3969]);
    }

    #[test]
    fn forced_group_of_three_int8_overflows() {
        let a = i8t(&[1, 3, 1, 1], vec![127; 3]);
        let w = i8t(&[1, 3, 1, 1], vec![127; 3]);
        let acc = AccumulatorModel::narrow(b(8)).with_forced_group(3).unwrap();
        match int_conv2d(&a, &w, ConvGeometry::UNIT, &acc) {
            Err(Error::Overflow(report)) => {
                assert_eq!(report.partial, 2 * 16129 + 16129);
                assert_eq!((report.channel, report.y, report.x), (0, 0, 0));
            }
            other => panic!("expected overflow, got {other:?}"),
        }
        // the derived group of two is safe on the same operands
        let ok = int_conv2d(&a, &w, ConvGeometry::UNIT, &AccumulatorModel::narrow(b(8))).unwrap();
        assert_eq!(ok.output.data(), &[3 * 16129]);
        assert_eq!(ok.widenings, 2);
    }

    #[test]
    fn saturate_policy_clamps_partial_sums() {
        let a = i8t(&[1, 3, 1, 1], vec![127; 3]);
        let w = i8t(&[1, 3, 1, 1], vec![127; 3]);
        let acc = AccumulatorModel::new(b(8), AccumulatorWidth::W16, OverflowPolicy::Saturate)
            .with_forced_group(3)
            .unwrap();
        let out = int_conv2d(&a, &w, ConvGeometry::UNIT, &acc).unwrap();
        assert_eq!(out.output.data(), &[i16::MAX as i32]);
    }

    #[test]
    fn operands_outside_range_rejected() {
        let a = i8t(&[1, 1, 1, 1], vec![64]);
        let w = i8t(&[1, 1, 1, 1], vec![1]);
        assert!(matches!(
            int_conv2d(&a, &w, ConvGeometry::UNIT, &AccumulatorModel::narrow(b(7))),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn narrow_matches_wide_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let cin = rng.gen_range(1..5);
            let cout = rng.gen_range(1..4);
            let k = rng.gen_range(1..4);
            let h = rng.gen_range(k..8);
            let g = ConvGeometry::new(rng.gen_range(1..3), rng.gen_range(0..2)).unwrap();
            let a = i8t(
                &[1, cin, h, h],
                (0..cin * h * h).map(|_| rng.gen_range(-63..=63)).collect(),
            );
            let w = i8t(
                &[cout, cin, k, k],
                (0..cout * cin * k * k).map(|_| rng.gen_range(-63..=63)).collect(),
            );
            let narrow = int_conv2d(&a, &w, g, &AccumulatorModel::narrow(b(7))).unwrap();
            let wide = int_conv2d(&a, &w, g, &AccumulatorModel::wide(b(7))).unwrap();
            assert_eq!(narrow.output, wide.output);
            assert_eq!(narrow.output.data(), oracle_conv(&a, &w, g).as_slice());
            let macs = cin * k * k;
            assert_eq!(narrow.widenings, (narrow.output.len() * macs.div_ceil(8)) as u64);
            assert_eq!(wide.widenings, (wide.output.len() * macs) as u64);
        }
    }

    #[test]
    fn widenings_proxy() {
        let m7 = AccumulatorModel::narrow(b(7));
        let m8 = AccumulatorModel::narrow(b(8));
        assert_eq!(m7.widenings_per_output(72), 9);
        assert_eq!(m8.widenings_per_output(72), 36);
        assert_eq!(m7.widenings_per_output(73), 10);
    }
}
