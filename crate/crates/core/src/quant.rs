//! Weight quantizers, the clipped straight-through estimator, baseline scale
//! estimators and the bit-packing codec for quantized codes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Latent weights with `|w|` above this receive no gradient through the STE.
pub const STE_CLIP: f64 = 1.0;

/// Ratio of the TWN threshold to the mean absolute weight.
pub const TWN_THRESHOLD_RATIO: f64 = 0.7;

/// Bit width of a quantized weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantDepth {
    Binary,
    Ternary,
}

impl QuantDepth {
    pub fn bits(self) -> u32 {
        match self {
            QuantDepth::Binary => 1,
            QuantDepth::Ternary => 2,
        }
    }
}

/// Storage precision of a weight layer: one of the quantized depths or full
/// 32-bit floats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Depth {
    Binary,
    Ternary,
    Full,
}

impl Depth {
    pub fn bits(self) -> u32 {
        match self {
            Depth::Binary => 1,
            Depth::Ternary => 2,
            Depth::Full => 32,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Depth> {
        match bits {
            1 => Some(Depth::Binary),
            2 => Some(Depth::Ternary),
            32 => Some(Depth::Full),
            _ => None,
        }
    }

    pub fn quantized(self) -> Option<QuantDepth> {
        match self {
            Depth::Binary => Some(QuantDepth::Binary),
            Depth::Ternary => Some(QuantDepth::Ternary),
            Depth::Full => None,
        }
    }
}

impl From<QuantDepth> for Depth {
    fn from(d: QuantDepth) -> Depth {
        match d {
            QuantDepth::Binary => Depth::Binary,
            QuantDepth::Ternary => Depth::Ternary,
        }
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Codes over `{-1, 0, +1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TernaryCode(Vec<i8>);

impl TernaryCode {
    pub fn new(codes: Vec<i8>) -> Result<Self> {
        if let Some(pos) = codes.iter().position(|c| !(-1..=1).contains(c)) {
            return Err(Error::invalid(format!(
                "code {} at index {pos} is not in {{-1, 0, +1}}",
                codes[pos]
            )));
        }
        Ok(TernaryCode(codes))
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.0.iter().all(|&c| c != 0)
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().filter(|&&c| c == 0).count() as f64 / self.0.len() as f64
    }

    pub fn to_tensor<T: Element>(&self, shape: &[usize]) -> Result<Tensor<T>> {
        Tensor::new(
            shape.to_vec(),
            self.0.iter().map(|&c| T::lit(c as f64)).collect(),
        )
    }
}

impl std::ops::Neg for TernaryCode {
    type Output = TernaryCode;

    fn neg(self) -> TernaryCode {
        TernaryCode(self.0.into_iter().map(|c| -c).collect())
    }
}

/// `+1` where `w >= 0`, `-1` elsewhere.
pub fn sign_binarize<T: Element>(w: &Tensor<T>) -> TernaryCode {
    TernaryCode(
        w.data()
            .iter()
            .map(|&v| if v >= T::zero() { 1 } else { -1 })
            .collect(),
    )
}

/// Symmetric threshold: `+1` above `delta`, `-1` below `-delta`, `0` within.
pub fn threshold_ternarize<T: Element>(w: &Tensor<T>, delta: T) -> Result<TernaryCode> {
    if !(delta > T::zero()) {
        return Err(Error::invalid(format!("threshold must be positive, got {delta}")));
    }
    Ok(TernaryCode(
        w.data()
            .iter()
            .map(|&v| {
                if v > delta {
                    1
                } else if v < -delta {
                    -1
                } else {
                    0
                }
            })
            .collect(),
    ))
}

/// Code function used by [`ste_quantize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Quantizer {
    Sign,
    Threshold(f64),
}

impl Quantizer {
    pub fn codes<T: Element>(&self, w: &Tensor<T>) -> Result<TernaryCode> {
        match *self {
            Quantizer::Sign => Ok(sign_binarize(w)),
            Quantizer::Threshold(delta) => threshold_ternarize(w, T::lit(delta)),
        }
    }
}

/// Number of filters along the leading axis and weights per filter.
fn filter_layout(shape: &[usize]) -> (usize, usize) {
    let k = shape.first().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (k, n / k.max(1))
}

/// `mu[k] * code(w[k, ..])` for every filter `k` of `w`.
pub fn materialize<T: Element>(w: &Tensor<T>, scales: &[T], codes: &TernaryCode) -> Result<Tensor<T>> {
    let (k, per) = filter_layout(w.shape());
    if scales.len() != k || codes.len() != w.len() {
        return Err(Error::shape(
            "materialize",
            format!(
                "{} scales and {} codes for weights of shape {:?}",
                scales.len(),
                codes.len(),
                w.shape()
            ),
        ));
    }
    let data = codes
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &c)| scales[i / per] * T::lit(c as f64))
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Differentiable quantization of filter-major weights `w` with per-filter
/// scales `mu` (shape `[K]`).
///
/// Forward: `mu[k] * code(w)`. Backward: the upstream gradient reaches `w`
/// scaled by `mu[k]` and masked by `|w| <= 1`; `mu[k]` receives
/// `sum(upstream * code)` over its filter.
pub fn ste_quantize<T: Element>(
    tape: &mut Tape<T>,
    w: Var,
    mu: Var,
    quantizer: Quantizer,
) -> Result<Var> {
    let (k, per) = filter_layout(tape.shape(w));
    if tape.shape(mu) != [k] {
        return Err(Error::shape(
            "ste_quantize",
            format!(
                "scales {:?} do not match {k} filters of {:?}",
                tape.shape(mu),
                tape.shape(w)
            ),
        ));
    }
    if let Some(bad) = tape.value(mu).data().iter().find(|&&m| !(m > T::zero())) {
        return Err(Error::invalid(format!("scale must be positive, got {bad}")));
    }
    let codes = quantizer.codes(tape.value(w))?;
    let code_f: Vec<T> = codes.as_slice().iter().map(|&c| T::lit(c as f64)).collect();
    let forward_codes = code_f.clone();
    tape.custom(
        &[w, mu],
        move |xs| {
            let scales = xs[1].data();
            let data = forward_codes
                .iter()
                .enumerate()
                .map(|(i, &c)| scales[i / per] * c)
                .collect();
            Tensor::new(xs[0].shape().to_vec(), data)
        },
        move |ctx| {
            let (wv, scales, up) = (ctx.inputs[0], ctx.inputs[1].data(), ctx.upstream.data());
            let clip = T::lit(STE_CLIP);
            let gw = wv
                .data()
                .iter()
                .zip(up)
                .enumerate()
                .map(|(i, (&x, &g))| if x.abs() <= clip { g * scales[i / per] } else { T::zero() })
                .collect();
            let mut gmu = vec![T::zero(); scales.len()];
            for (i, (&g, &c)) in up.iter().zip(&code_f).enumerate() {
                gmu[i / per] = gmu[i / per] + g * c;
            }
            vec![
                Tensor::from_parts(wv.shape().to_vec(), gw),
                Tensor::from_parts(vec![scales.len()], gmu),
            ]
        },
    )
}

/// Fixed BinaryConnect magnitude `sqrt(1.5 / (fan_in + fan_out))` for a
/// filter-major weight shape.
pub fn bc_scale(weight_shape: &[usize]) -> Result<f64> {
    if weight_shape.len() < 2 || weight_shape.contains(&0) {
        return Err(Error::invalid(format!("no BC scale for weight shape {weight_shape:?}")));
    }
    let receptive: usize = weight_shape[2..].iter().product();
    let fan_in = weight_shape[1] * receptive;
    let fan_out = weight_shape[0] * receptive;
    Ok((1.5 / (fan_in + fan_out) as f64).sqrt())
}

/// Mean absolute value.
pub fn bwn_scale<T: Element>(w: &Tensor<T>) -> Result<T> {
    if w.is_empty() {
        return Err(Error::invalid("scale of an empty tensor"));
    }
    Ok(w.data().iter().map(|v| v.abs()).sum::<T>() / T::lit(w.len() as f64))
}

/// Threshold `0.7 * E|w|` and the mean magnitude of the weights above it.
pub fn twn_threshold_and_scale<T: Element>(w: &Tensor<T>) -> Result<(T, T)> {
    let delta = bwn_scale(w)? * T::lit(TWN_THRESHOLD_RATIO);
    let (sum, count) = w
        .data()
        .iter()
        .map(|v| v.abs())
        .filter(|&a| a > delta)
        .fold((T::zero(), 0usize), |(s, c), a| (s + a, c + 1));
    if count == 0 {
        return Err(Error::DegenerateLayer(format!(
            "no weight exceeds the threshold {delta}"
        )));
    }
    Ok((delta, sum / T::lit(count as f64)))
}

/// Packs codes LSB-first into bytes: 1 bit per weight for binary (`1 => +1`,
/// `0 => -1`), 2 bits for ternary (`00 => 0`, `01 => +1`, `10 => -1`). The
/// final byte is zero-padded.
pub fn pack_codes(codes: &TernaryCode, depth: QuantDepth) -> Result<Vec<u8>> {
    let c = codes.as_slice();
    match depth {
        QuantDepth::Binary => {
            let mut out = vec![0u8; c.len().div_ceil(8)];
            for (i, &v) in c.iter().enumerate() {
                match v {
                    1 => out[i / 8] |= 1 << (i % 8),
                    -1 => {}
                    _ => return Err(Error::ZeroCodeInBinary(i)),
                }
            }
            Ok(out)
        }
        QuantDepth::Ternary => {
            let mut out = vec![0u8; c.len().div_ceil(4)];
            for (i, &v) in c.iter().enumerate() {
                let bits = match v {
                    0 => 0b00,
                    1 => 0b01,
                    _ => 0b10,
                };
                out[i / 4] |= bits << (2 * (i % 4));
            }
            Ok(out)
        }
    }
}

/// Number of payload bytes holding `count` codes at `depth`.
pub fn packed_len(count: usize, depth: QuantDepth) -> usize {
    match depth {
        QuantDepth::Binary => count.div_ceil(8),
        QuantDepth::Ternary => count.div_ceil(4),
    }
}

pub fn unpack_codes(bytes: &[u8], count: usize, depth: QuantDepth) -> Result<TernaryCode> {
    let need = packed_len(count, depth);
    if bytes.len() != need {
        return Err(Error::Format {
            offset: bytes.len().min(need),
            detail: format!("{count} codes need {need} bytes, got {}", bytes.len()),
        });
    }
    let codes = match depth {
        QuantDepth::Binary => (0..count)
            .map(|i| if bytes[i / 8] >> (i % 8) & 1 == 1 { 1 } else { -1 })
            .collect(),
        QuantDepth::Ternary => (0..count)
            .map(|i| match bytes[i / 4] >> (2 * (i % 4)) & 0b11 {
                0b00 => Ok(0),
                0b01 => Ok(1),
                0b10 => Ok(-1),
                _ => Err(Error::ReservedPattern(i)),
            })
            .collect::<Result<Vec<i8>>>()?,
    };
    Ok(TernaryCode(codes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bc_scale_is_the_glorot_bound() {
        assert_eq!(bc_scale(&[6, 1, 5, 5]).unwrap(), (1.5f64 / 175.0).sqrt());
        assert_eq!(bc_scale(&[10, 84]).unwrap(), (1.5f64 / 94.0).sqrt());
        assert!(bc_scale(&[3]).is_err());
        assert!(bc_scale(&[0, 4]).is_err());
    }

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn sign_examples() {
        assert_eq!(sign_binarize(&t(&[0.3, -0.2, 0.0])).as_slice(), &[1, -1, 1]);
        assert_eq!(sign_binarize(&t(&[-0.1, -3.0])).as_slice(), &[-1, -1]);
        let w = t(&[0.4, -1.2, 2.0]);
        assert_eq!(sign_binarize(&w.map(|v| -v)), -sign_binarize(&w));
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(
            threshold_ternarize(&t(&[0.5, 0.1, -0.5]), 0.2).unwrap().as_slice(),
            &[1, 0, -1]
        );
        assert_eq!(
            threshold_ternarize(&t(&[0.5, 0.1, -0.5]), 0.6).unwrap().as_slice(),
            &[0, 0, 0]
        );
        let w = t(&[0.3, -0.001, 2.0, -0.7]);
        assert_eq!(threshold_ternarize(&w, 1e-9).unwrap(), sign_binarize(&w));
        assert!(threshold_ternarize(&w, 0.0).is_err());
        assert!(threshold_ternarize(&w, -1.0).is_err());
    }

    #[test]
    fn boundary_is_zero() {
        assert_eq!(threshold_ternarize(&t(&[0.2, -0.2]), 0.2).unwrap().as_slice(), &[0, 0]);
    }

    #[test]
    fn scale_estimators() {
        assert_eq!(bwn_scale(&t(&[1.0, -1.0, 1.0, -1.0])).unwrap(), 1.0);
        assert_eq!(bwn_scale(&t(&[2.0, 0.0, -2.0, 0.0])).unwrap(), 1.0);
        let (d, m) = twn_threshold_and_scale(&t(&[1.0, 1.0, -1.0, -1.0])).unwrap();
        assert!((d - 0.7).abs() < 1e-15);
        assert_eq!(m, 1.0);
        let w = t(&[0.3, -1.1, 0.05, 2.2, -0.4]);
        let (d1, m1) = twn_threshold_and_scale(&w).unwrap();
        let (d3, m3) = twn_threshold_and_scale(&w.map(|v| 3.0 * v)).unwrap();
        assert!((d3 - 3.0 * d1).abs() < 1e-12 && (m3 - 3.0 * m1).abs() < 1e-12);
        assert!(matches!(
            twn_threshold_and_scale(&t(&[0.0, 0.0])),
            Err(Error::DegenerateLayer(_))
        ));
    }

    #[test]
    fn pack_examples() {
        let c = TernaryCode::new(vec![1, -1, -1, 1, 1, 1, 1, 1]).unwrap();
        assert_eq!(pack_codes(&c, QuantDepth::Binary).unwrap(), vec![0xF9]);
        let c = TernaryCode::new(vec![0, 1, -1, 0]).unwrap();
        assert_eq!(pack_codes(&c, QuantDepth::Ternary).unwrap(), vec![0x24]);
        let c = TernaryCode::new(vec![1, 0]).unwrap();
        assert!(matches!(
            pack_codes(&c, QuantDepth::Binary),
            Err(Error::ZeroCodeInBinary(1))
        ));
        assert!(matches!(
            unpack_codes(&[0b1100], 2, QuantDepth::Ternary),
            Err(Error::ReservedPattern(1))
        ));
        assert!(unpack_codes(&[0, 0], 3, QuantDepth::Binary).is_err());
    }

    #[test]
    fn padding_bits_are_zero() {
        let c = TernaryCode::new(vec![1, 1, 1]).unwrap();
        assert_eq!(pack_codes(&c, QuantDepth::Binary).unwrap(), vec![0b111]);
        let c = TernaryCode::new(vec![-1; 5]).unwrap();
        assert_eq!(pack_codes(&c, QuantDepth::Ternary).unwrap(), vec![0xAA, 0b10]);
    }

    fn ste_grads(w: f64, mu: f64, q: Quantizer, upstream: f64) -> (f64, f64, f64) {
        let mut tape = Tape::<f64>::new();
        let wv = tape.param(Tensor::new(vec![1], vec![w]).unwrap());
        let mv = tape.param(Tensor::new(vec![1], vec![mu]).unwrap());
        let y = ste_quantize(&mut tape, wv, mv, q).unwrap();
        let fwd = tape.value(y).item();
        let s = tape.scale(y, upstream);
        let root = tape.sum(s);
        let g = tape.backward(root).unwrap();
        (fwd, g.get(wv).unwrap().item(), g.get(mv).unwrap().item())
    }

    #[test]
    fn ste_examples() {
        assert_eq!(ste_grads(0.5, 2.0, Quantizer::Threshold(0.2), 1.0), (2.0, 2.0, 1.0));
        let (_, gw, _) = ste_grads(1.5, 2.0, Quantizer::Threshold(0.2), 3.0);
        assert_eq!(gw, 0.0);
        let (f, _, gm) = ste_grads(0.1, 2.0, Quantizer::Threshold(0.2), 1.0);
        assert_eq!((f, gm), (0.0, 0.0));
        let (f, gw, gm) = ste_grads(-0.3, 1.0, Quantizer::Sign, 2.0);
        assert_eq!((f, gw, gm), (-1.0, 2.0, -2.0));
    }

    #[test]
    fn ste_rejects_bad_scales() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Tensor::new(vec![2, 1], vec![0.1, 0.2]).unwrap());
        let mu = tape.param(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(ste_quantize(&mut tape, w, mu, Quantizer::Sign).is_err());
        let mu = tape.param(Tensor::new(vec![1], vec![1.0]).unwrap());
        assert!(ste_quantize(&mut tape, w, mu, Quantizer::Sign).is_err());
    }
}
