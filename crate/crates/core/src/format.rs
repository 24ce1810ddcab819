//! Binary container for exported models.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "STQW" | version u16 | layer count u16
//! per layer:
//!   kind u8 | depth u8 (1, 2 or 32) | rank u8 | extents u32 x rank | delta f32
//!   | filter count u32 | scales f32 x filter count
//!   | payload length u64 | payload (packed codes, or raw f32 for depth 32)
//!   | block count u8 | (length u64 | f32 x length) x block count
//!   | attribute count u8 | u32 x attribute count
//! ```
//!
//! Weight layers carry their bias as the single block; batchnorm carries
//! gamma, shift, running mean and running variance. Convolutions store
//! `[stride, padding]` as attributes and pooling stores `[kernel, stride]`.
//! Layers without weights use depth 32, an empty payload and no scales.

use std::path::Path;

use crate::error::{Error, Result};
use crate::inference::{InferLayer, InferWeights, InferenceModel, Payload};
use crate::quant::{self, Depth};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STQW";
pub const VERSION: u16 = 1;

pub type PackedModel = InferenceModel<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum LayerKind {
    Conv2d = 1,
    Dense = 2,
    BatchNorm = 3,
    Relu = 4,
    MaxPool2d = 5,
    Flatten = 6,
}

impl LayerKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => LayerKind::Conv2d,
            2 => LayerKind::Dense,
            3 => LayerKind::BatchNorm,
            4 => LayerKind::Relu,
            5 => LayerKind::MaxPool2d,
            6 => LayerKind::Flatten,
            _ => return None,
        })
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend(v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
    fn blocks(&mut self, blocks: &[&[f32]]) {
        self.u8(blocks.len() as u8);
        for b in blocks {
            self.u64(b.len() as u64);
            self.f32s(b);
        }
    }
    fn attrs(&mut self, attrs: &[usize]) -> Result<()> {
        self.u8(attrs.len() as u8);
        for &a in attrs {
            self.u32(to_u32(a, "attribute")?);
        }
        Ok(())
    }
    fn empty_header(&mut self, kind: LayerKind, shape: &[usize]) -> Result<()> {
        self.u8(kind as u8);
        self.u8(32);
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(to_u32(d, "extent")?);
        }
        self.f32s(&[0.0]);
        self.u32(0);
        self.u64(0);
        Ok(())
    }
    fn weights(&mut self, kind: LayerKind, w: &InferWeights<f32>) -> Result<()> {
        w.validate()?;
        self.u8(kind as u8);
        self.u8(w.depth().bits() as u8);
        if w.shape.len() > u8::MAX as usize {
            return Err(Error::invalid("weight rank exceeds 255"));
        }
        self.u8(w.shape.len() as u8);
        for &d in &w.shape {
            self.u32(to_u32(d, "extent")?);
        }
        self.f32s(&[w.delta]);
        self.u32(to_u32(w.scales.len(), "filter count")?);
        self.f32s(&w.scales);
        match &w.payload {
            Payload::Codes { depth, codes } => {
                let bytes = quant::pack_codes(codes, *depth)?;
                self.u64(bytes.len() as u64);
                self.0.extend(bytes);
            }
            Payload::Full(t) => {
                self.u64(4 * t.len() as u64);
                self.f32s(t.data());
            }
        }
        self.blocks(&[&w.bias]);
        Ok(())
    }
}

/// Serializes a model. Fails if any layer is internally inconsistent.
pub fn encode(model: &PackedModel) -> Result<Vec<u8>> {
    let count = u16::try_from(model.layers.len())
        .map_err(|_| Error::invalid("more than 65535 layers"))?;
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u16(VERSION);
    w.u16(count);
    for l in &model.layers {
        match l {
            InferLayer::Conv2d { weights, stride, padding } => {
                w.weights(LayerKind::Conv2d, weights)?;
                w.attrs(&[*stride, *padding])?;
            }
            InferLayer::Dense { weights } => {
                w.weights(LayerKind::Dense, weights)?;
                w.attrs(&[])?;
            }
            InferLayer::BatchNorm {
                gamma,
                shift,
                running_mean,
                running_var,
            } => {
                w.empty_header(LayerKind::BatchNorm, &[gamma.len()])?;
                w.blocks(&[gamma, shift, running_mean, running_var]);
                w.attrs(&[])?;
            }
            InferLayer::Relu => {
                w.empty_header(LayerKind::Relu, &[])?;
                w.blocks(&[]);
                w.attrs(&[])?;
            }
            InferLayer::MaxPool2d { kernel, stride } => {
                w.empty_header(LayerKind::MaxPool2d, &[])?;
                w.blocks(&[]);
                w.attrs(&[*kernel, *stride])?;
            }
            InferLayer::Flatten => {
                w.empty_header(LayerKind::Flatten, &[])?;
                w.blocks(&[]);
                w.attrs(&[])?;
            }
        }
    }
    Ok(w.0)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!(
                "truncated: {what} needs {n} bytes, {} remain",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Format {
            offset: at,
            detail: format!("{what} {v} too large"),
        })
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.err(format!("{what} length overflows")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
    fn blocks(&mut self) -> Result<Vec<Vec<f32>>> {
        let n = self.u8("block count")?;
        (0..n)
            .map(|_| {
                let len = self.len("block length")?;
                self.f32s(len, "block")
            })
            .collect()
    }
    fn attrs(&mut self) -> Result<Vec<usize>> {
        let n = self.u8("attribute count")?;
        (0..n).map(|_| Ok(self.u32("attribute")? as usize)).collect()
    }
}

/// Parses a model written by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<PackedModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}, expected \"STQW\""),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = r.u16("layer count")?;
    let mut layers = Vec::with_capacity(count as usize);
    for i in 0..count {
        let at = r.pos;
        let kind_byte = r.u8("layer kind")?;
        let kind = LayerKind::from_u8(kind_byte)
            .ok_or_else(|| Error::Format {
                offset: at,
                detail: format!("layer {i}: unknown kind {kind_byte}"),
            })?;
        let depth_at = r.pos;
        let depth_bits = r.u8("depth")?;
        let depth = Depth::from_bits(depth_bits as u32).ok_or_else(|| Error::Format {
            offset: depth_at,
            detail: format!("layer {i}: invalid depth code {depth_bits}"),
        })?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| Ok(r.u32("extent")? as usize))
            .collect::<Result<Vec<_>>>()?;
        let delta = r.f32s(1, "delta")?[0];
        let filters = r.u32("filter count")? as usize;
        let scales = r.f32s(filters, "scales")?;
        let payload_at = r.pos;
        let payload_len = r.len("payload length")?;
        let payload = r.take(payload_len, "payload")?;
        let blocks_at = r.pos;
        let blocks = r.blocks()?;
        let attrs_at = r.pos;
        let attrs = r.attrs()?;
        let layer_err = |offset: usize, detail: String| Error::Format {
            offset,
            detail: format!("layer {i}: {detail}"),
        };

        let layer = match kind {
            LayerKind::Conv2d | LayerKind::Dense => {
                if shape.len() < 2 || shape.contains(&0) {
                    return Err(layer_err(at, format!("invalid weight shape {shape:?}")));
                }
                let numel: usize = shape.iter().product();
                let payload = match depth.quantized() {
                    Some(q) => {
                        let need = quant::packed_len(numel, q);
                        if payload_len != need {
                            return Err(layer_err(
                                payload_at,
                                format!("payload of {payload_len} bytes, {numel} codes at {depth} bits need {need}"),
                            ));
                        }
                        let codes = quant::unpack_codes(payload, numel, q).map_err(|e| match e {
                            Error::ReservedPattern(j) => layer_err(payload_at + 8 + j / 4, format!("reserved code pattern at weight {j}")),
                            other => other,
                        })?;
                        if quant::pack_codes(&codes, q)? != payload {
                            return Err(layer_err(payload_at + 8 + payload_len - 1, "nonzero padding bits".into()));
                        }
                        if scales.len() != shape[0] {
                            return Err(layer_err(payload_at, format!("{} scales for {} filters", scales.len(), shape[0])));
                        }
                        Payload::Codes { depth: q, codes }
                    }
                    None => {
                        if payload_len != 4 * numel {
                            return Err(layer_err(
                                payload_at,
                                format!("payload of {payload_len} bytes, {numel} floats need {}", 4 * numel),
                            ));
                        }
                        if !scales.is_empty() {
                            return Err(layer_err(payload_at, "full-precision layer carries scales".into()));
                        }
                        let data = payload
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect();
                        Payload::Full(Tensor::new(shape.clone(), data)?)
                    }
                };
                let [bias] = <[Vec<f32>; 1]>::try_from(blocks)
                    .map_err(|b| layer_err(blocks_at, format!("expected 1 bias block, found {}", b.len())))?;
                if bias.len() != shape[0] {
                    return Err(layer_err(blocks_at, format!("{} biases for {} filters", bias.len(), shape[0])));
                }
                let weights = InferWeights {
                    shape,
                    delta,
                    scales,
                    payload,
                    bias,
                };
                if kind == LayerKind::Conv2d {
                    let [stride, padding] = <[usize; 2]>::try_from(attrs)
                        .map_err(|_| layer_err(attrs_at, "conv2d needs [stride, padding]".into()))?;
                    if stride == 0 {
                        return Err(layer_err(attrs_at, "zero stride".into()));
                    }
                    InferLayer::Conv2d { weights, stride, padding }
                } else {
                    if !attrs.is_empty() {
                        return Err(layer_err(attrs_at, "dense takes no attributes".into()));
                    }
                    InferLayer::Dense { weights }
                }
            }
            _ => {
                if depth != Depth::Full || filters != 0 || payload_len != 0 || delta.to_bits() != 0 {
                    return Err(layer_err(at, "non-weight layer with weight data".into()));
                }
                match kind {
                    LayerKind::BatchNorm => {
                        let [gamma, shift, running_mean, running_var] = <[Vec<f32>; 4]>::try_from(blocks)
                            .map_err(|b| layer_err(blocks_at, format!("batchnorm needs 4 blocks, found {}", b.len())))?;
                        let c = gamma.len();
                        if shape != [c] || c == 0 || shift.len() != c || running_mean.len() != c || running_var.len() != c {
                            return Err(layer_err(blocks_at, "batchnorm block lengths disagree".into()));
                        }
                        if !attrs.is_empty() {
                            return Err(layer_err(attrs_at, "batchnorm takes no attributes".into()));
                        }
                        InferLayer::BatchNorm {
                            gamma,
                            shift,
                            running_mean,
                            running_var,
                        }
                    }
                    LayerKind::MaxPool2d => {
                        if !shape.is_empty() || !blocks.is_empty() {
                            return Err(layer_err(at, "maxpool carries data".into()));
                        }
                        let [kernel, stride] = <[usize; 2]>::try_from(attrs)
                            .map_err(|_| layer_err(attrs_at, "maxpool needs [kernel, stride]".into()))?;
                        if kernel == 0 || stride == 0 {
                            return Err(layer_err(attrs_at, "zero pooling extent".into()));
                        }
                        InferLayer::MaxPool2d { kernel, stride }
                    }
                    _ => {
                        if !shape.is_empty() || !blocks.is_empty() || !attrs.is_empty() {
                            return Err(layer_err(at, "parameterless layer carries data".into()));
                        }
                        if kind == LayerKind::Relu {
                            InferLayer::Relu
                        } else {
                            InferLayer::Flatten
                        }
                    }
                }
            }
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(InferenceModel { layers })
}

pub fn write_file(model: &PackedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<PackedModel> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{QuantDepth, TernaryCode};

    fn small_model() -> PackedModel {
        InferenceModel {
            layers: vec![
                InferLayer::Conv2d {
                    weights: InferWeights {
                        shape: vec![2, 1, 3, 3],
                        delta: 0.05,
                        scales: vec![0.5, 0.25],
                        payload: Payload::Codes {
                            depth: QuantDepth::Ternary,
                            codes: TernaryCode::new((0..18).map(|i| (i % 3) as i8 - 1).collect()).unwrap(),
                        },
                        bias: vec![0.1, -0.1],
                    },
                    stride: 1,
                    padding: 1,
                },
                InferLayer::BatchNorm {
                    gamma: vec![1.0, 2.0],
                    shift: vec![0.0, 0.5],
                    running_mean: vec![0.1, 0.2],
                    running_var: vec![1.5, 0.7],
                },
                InferLayer::Relu,
                InferLayer::MaxPool2d { kernel: 2, stride: 2 },
                InferLayer::Flatten,
                InferLayer::Dense {
                    weights: InferWeights {
                        shape: vec![3, 8],
                        delta: 0.0,
                        scales: vec![],
                        payload: Payload::Full(Tensor::from_fn(&[3, 8], |i| i as f32 * 0.1)),
                        bias: vec![0.0; 3],
                    },
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = small_model();
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[..4], b"STQW");
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = encode(&small_model()).unwrap();
        for cut in [3, 9, 20, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            match err {
                Error::Format { offset, .. } => assert!(offset <= cut),
                other => panic!("unexpected {other}"),
            }
        }
    }

    #[test]
    fn rejects_bad_version_and_trailing_bytes() {
        let mut bytes = encode(&small_model()).unwrap();
        bytes.push(0);
        assert!(decode(&bytes).unwrap_err().to_string().contains("trailing"));
        bytes.pop();
        bytes[4] = 9;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version"));
    }
}
