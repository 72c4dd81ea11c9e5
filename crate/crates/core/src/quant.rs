//! Symmetric linear quantization: `clip(round(x * S), -q, q)` with
//! `q = 2^(b-1) - 1`, and the matching dequantization of conv accumulators.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::intsim::{int_conv2d, AccumulatorModel};
use crate::model::LinearLayer;
use crate::tensor::Tensor;

/// Operand bit width, 2 through 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bits(u8);

impl Bits {
    pub const MIN: u8 = 2;
    pub const MAX: u8 = 8;

    pub fn new(bits: u8) -> Result<Self> {
        if !(Self::MIN..=Self::MAX).contains(&bits) {
            return Err(Error::param(format!(
                "bit width {bits} outside [{}, {}]",
                Self::MIN,
                Self::MAX
            )));
        }
        Ok(Self(bits))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Largest representable magnitude, `2^(b-1) - 1`.
    pub fn qmax(self) -> i32 {
        (1 << (self.0 - 1)) - 1
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RoundingMode {
    /// Round half away from zero.
    #[default]
    Nearest,
    Ceil,
    Floor,
}

impl RoundingMode {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            RoundingMode::Nearest => v.round(),
            RoundingMode::Ceil => v.ceil(),
            RoundingMode::Floor => v.floor(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoundingMode::Nearest => "nearest",
            RoundingMode::Ceil => "ceil",
            RoundingMode::Floor => "floor",
        }
    }
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoundingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(RoundingMode::Nearest),
            "ceil" => Ok(RoundingMode::Ceil),
            "floor" => Ok(RoundingMode::Floor),
            other => Err(Error::param(format!("unknown rounding mode '{other}'"))),
        }
    }
}

/// Scales of one weighted layer: a per-tensor activation scale and one weight
/// scale per output channel (a single entry means per-tensor weights).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub bits: Bits,
    pub activation_scale: f32,
    pub weight_scales: Vec<f32>,
}

impl QuantParams {
    pub fn new(bits: Bits, activation_scale: f32, weight_scales: Vec<f32>) -> Result<Self> {
        check_scale(activation_scale)?;
        if weight_scales.is_empty() {
            return Err(Error::param("weight scale list is empty"));
        }
        for &s in &weight_scales {
            check_scale(s)?;
        }
        Ok(Self {
            bits,
            activation_scale,
            weight_scales,
        })
    }

    /// Weight scales expanded to one per output channel.
    pub fn channel_scales(&self, channels: usize) -> Result<Vec<f32>> {
        match self.weight_scales.len() {
            1 => Ok(vec![self.weight_scales[0]; channels]),
            n if n == channels => Ok(self.weight_scales.clone()),
            n => Err(Error::config(format!(
                "{n} weight scales for a layer with {channels} output channels"
            ))),
        }
    }
}

/// Quantization parameters of every weighted layer, keyed by model layer index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkScales {
    pub rounding: RoundingMode,
    layers: BTreeMap<usize, QuantParams>,
}

impl NetworkScales {
    pub fn new(rounding: RoundingMode) -> Self {
        Self {
            rounding,
            layers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer: usize, params: QuantParams) {
        self.layers.insert(layer, params);
    }

    pub fn get(&self, layer: usize) -> Option<&QuantParams> {
        self.layers.get(&layer)
    }

    pub fn get_mut(&mut self, layer: usize) -> Option<&mut QuantParams> {
        self.layers.get_mut(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &QuantParams)> {
        self.layers.iter().map(|(&i, p)| (i, p))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

pub(crate) fn check_scale(scale: f32) -> Result<()> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!(
            "scale must be a positive finite real, got {scale}"
        )))
    }
}

/// Quantize one value. The product `x * scale` is formed in f64, where it is exact.
#[inline]
pub fn quantize_value(x: f32, scale: f32, qmax: i32, mode: RoundingMode) -> i8 {
    let v = mode.apply(x as f64 * scale as f64);
    v.clamp(-qmax as f64, qmax as f64) as i8
}

fn quantize_into(x: &[f32], scale: f32, bits: Bits, mode: RoundingMode, out: &mut Vec<i8>) -> Result<()> {
    let qmax = bits.qmax();
    for &v in x {
        if v.is_nan() {
            return Err(Error::data("NaN in quantizer input"));
        }
        out.push(quantize_value(v, scale, qmax, mode));
    }
    Ok(())
}

pub fn quantize(x: &Tensor<f32>, scale: f32, bits: Bits, mode: RoundingMode) -> Result<Tensor<i8>> {
    check_scale(scale)?;
    let mut out = Vec::with_capacity(x.len());
    quantize_into(x.data(), scale, bits, mode, &mut out)?;
    Tensor::new(x.shape().to_vec(), out)
}

/// Quantize each output channel (leading dimension) with its own scale.
pub fn quantize_weights_per_channel(
    w: &Tensor<f32>,
    scales: &[f32],
    bits: Bits,
    mode: RoundingMode,
) -> Result<Tensor<i8>> {
    let channels = w.dim0();
    if scales.len() != channels {
        return Err(Error::config(format!(
            "{} scales for {channels} output channels",
            scales.len()
        )));
    }
    let mut out = Vec::with_capacity(w.len());
    for (c, &s) in scales.iter().enumerate() {
        check_scale(s)?;
        quantize_into(w.outer_slice(c), s, bits, mode, &mut out)?;
    }
    Tensor::new(w.shape().to_vec(), out)
}

/// Divide channel `c` of an integer accumulator by `S_a * S_w[c]` (f32 arithmetic).
pub fn dequantize_output(acc: &Tensor<i32>, activation_scale: f32, weight_scales: &[f32]) -> Result<Tensor<f32>> {
    let channels = acc.channels();
    if weight_scales.len() != channels {
        return Err(Error::config(format!(
            "{} weight scales for {channels} accumulator channels",
            weight_scales.len()
        )));
    }
    let mut out = Vec::with_capacity(acc.len());
    for (c, &sw) in weight_scales.iter().enumerate() {
        let denom = activation_scale * sw;
        out.extend(acc.channel(c).iter().map(|&v| v as f32 / denom));
    }
    Tensor::new(acc.shape().to_vec(), out)
}

pub(crate) fn add_bias(out: &mut Tensor<f32>, bias: Option<&Tensor<f32>>) {
    let Some(bias) = bias else { return };
    let per: usize = out.shape().iter().skip(2).product();
    for (chunk, &b) in out.data_mut().chunks_mut(per).zip(bias.data()) {
        for v in chunk {
            *v += b;
        }
    }
}

/// Simulated quantized layer: quantize activation and weights, integer
/// convolution, dequantize, then add the FP32 bias.
pub fn quantized_layer_output(
    a: &Tensor<f32>,
    layer: &LinearLayer<'_>,
    params: &QuantParams,
    mode: RoundingMode,
    acc: &AccumulatorModel,
) -> Result<Tensor<f32>> {
    let x = layer.prepare_input(a)?;
    let qa = quantize(&x, params.activation_scale, params.bits, mode)?;
    let scales = params.channel_scales(layer.out_channels())?;
    let qw = quantize_weights_per_channel(&layer.weight, &scales, params.bits, mode)?;
    let raw = int_conv2d(&qa, &qw, layer.geometry, acc)?;
    let mut out = dequantize_output(&raw.output, params.activation_scale, &scales)?;
    add_bias(&mut out, layer.bias);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intsim::AccumulatorModel;
    use crate::model::ConvGeometry;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::borrow::Cow;

    fn b(bits: u8) -> Bits {
        Bits::new(bits).unwrap()
    }

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    // Element-wise scalar oracle.
    fn oracle(x: f32, s: f32, bits: u8) -> i8 {
        let q = (1i32 << (bits - 1)) - 1;
        let r = (x as f64 * s as f64).round() as i32;
        r.clamp(-q, q) as i8
    }

    #[test]
    fn bits_range() {
        assert!(Bits::new(1).is_err());
        assert!(Bits::new(9).is_err());
        assert_eq!(b(7).qmax(), 63);
        assert_eq!(b(8).qmax(), 127);
        assert_eq!(b(2).qmax(), 1);
    }

    #[test]
    fn clips_to_symmetric_range() {
        let q = quantize(&t(&[3], &[0.5, -1.0, 2.0]), 63.0, b(7), RoundingMode::Nearest).unwrap();
        assert_eq!(q.data(), &[32, -63, 63]);
    }

    #[test]
    fn zeros_stay_zero() {
        let q = quantize(&t(&[3], &[0.0; 3]), 17.3, b(5), RoundingMode::Ceil).unwrap();
        assert_eq!(q.data(), &[0, 0, 0]);
    }

    #[test]
    fn rounding_modes() {
        let x = t(&[4], &[0.25, -0.25, 0.5, -0.5]);
        let near = quantize(&x, 2.0, b(8), RoundingMode::Nearest).unwrap();
        let ceil = quantize(&x, 2.0, b(8), RoundingMode::Ceil).unwrap();
        let floor = quantize(&x, 2.0, b(8), RoundingMode::Floor).unwrap();
        assert_eq!(near.data(), &[1, -1, 1, -1]);
        assert_eq!(ceil.data(), &[1, 0, 1, -1]);
        assert_eq!(floor.data(), &[0, -1, 1, -1]);
    }

    #[test]
    fn bad_scale_and_nan() {
        let x = t(&[1], &[1.0]);
        assert!(matches!(
            quantize(&x, 0.0, b(8), RoundingMode::Nearest),
            Err(Error::Param(_))
        ));
        assert!(matches!(
            quantize(&x, -2.0, b(8), RoundingMode::Nearest),
            Err(Error::Param(_))
        ));
        let nan = t(&[1], &[f32::NAN]);
        assert!(matches!(
            quantize(&nan, 1.0, b(8), RoundingMode::Nearest),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn random_values_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..1000).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        let q = quantize(&t(&[1000], &data), 63.0, b(7), RoundingMode::Nearest).unwrap();
        for (&x, &v) in data.iter().zip(q.data()) {
            assert!((-63..=63).contains(&v));
            assert_eq!(v, oracle(x, 63.0, 7));
        }
    }

    #[test]
    fn per_channel_equal_scales_is_per_tensor() {
        let w = t(&[2, 1, 1, 2], &[0.1, -0.4, 0.9, 0.33]);
        let pc = quantize_weights_per_channel(&w, &[40.0, 40.0], b(8), RoundingMode::Nearest).unwrap();
        let pt = quantize(&w, 40.0, b(8), RoundingMode::Nearest).unwrap();
        assert_eq!(pc, pt);
    }

    #[test]
    fn per_channel_independence() {
        let w = t(&[2, 1, 1, 2], &[0.1, -0.4, 0.9, 0.33]);
        let a = quantize_weights_per_channel(&w, &[40.0, 40.0], b(8), RoundingMode::Nearest).unwrap();
        let c = quantize_weights_per_channel(&w, &[40.0, 3.0], b(8), RoundingMode::Nearest).unwrap();
        assert_eq!(a.outer_slice(0), c.outer_slice(0));
        assert_ne!(a.outer_slice(1), c.outer_slice(1));
    }

    #[test]
    fn per_channel_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..4).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let scales: Vec<f32> = (0..4).map(|_| rng.gen_range(1.0f32..80.0)).collect();
        let q = quantize_weights_per_channel(&t(&[4, 1, 1, 1], &data), &scales, b(7), RoundingMode::Nearest).unwrap();
        for c in 0..4 {
            assert_eq!(q.data()[c], oracle(data[c], scales[c], 7));
        }
    }

    #[test]
    fn per_channel_length_mismatch() {
        let w = t(&[2, 1, 1, 1], &[0.1, 0.2]);
        assert!(quantize_weights_per_channel(&w, &[1.0], b(8), RoundingMode::Nearest).is_err());
    }

    #[test]
    fn dequantize_divides_by_scale_product() {
        let acc = Tensor::new(vec![1, 1, 1, 1], vec![126i32]).unwrap();
        assert_eq!(dequantize_output(&acc, 3.0, &[2.0]).unwrap().data(), &[21.0]);
        let zero = Tensor::<i32>::zeros(vec![1, 2, 2, 2]);
        assert!(dequantize_output(&zero, 3.0, &[2.0, 5.0])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn dequantize_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<i32> = (0..24).map(|_| rng.gen_range(-40_000..40_000)).collect();
        let sw: Vec<f32> = (0..3).map(|_| rng.gen_range(0.5f32..100.0)).collect();
        let sa = 12.75f32;
        let out = dequantize_output(&Tensor::new(vec![1, 3, 2, 4], data.clone()).unwrap(), sa, &sw).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            let c = i / 8;
            assert_eq!(v, data[i] as f32 / (sa * sw[c]));
        }
    }

    #[test]
    fn representable_point_is_exact() {
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let layer = LinearLayer::from_parts(Cow::Borrowed(&w), None, ConvGeometry::UNIT);
        let params = QuantParams::new(b(7), 63.0, vec![63.0]).unwrap();
        let acc = AccumulatorModel::narrow(b(7));
        let out =
            quantized_layer_output(&t(&[1, 1, 1, 1], &[1.0]), &layer, &params, RoundingMode::Nearest, &acc).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    proptest! {
        #[test]
        fn range_bound_holds(
            data in prop::collection::vec(-1e4f32..1e4, 1..64),
            scale in 1e-3f32..1e3,
            bits in 2u8..=8,
        ) {
            let q = quantize(&t(&[data.len()], &data), scale, b(bits), RoundingMode::Nearest).unwrap();
            let qmax = (1i32 << (bits - 1)) - 1;
            prop_assert!(q.data().iter().all(|&v| (v as i32).abs() <= qmax));
        }

        #[test]
        fn nonnegative_monotone_in_scale(x in 0.0f32..10.0, s1 in 0.01f32..100.0, s2 in 0.01f32..100.0) {
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let a = quantize_value(x, lo, 127, RoundingMode::Nearest);
            let b = quantize_value(x, hi, 127, RoundingMode::Nearest);
            prop_assert!(a <= b);
        }
    }
}
