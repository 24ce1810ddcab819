//! Quantized layers, model specifications and the trainable model.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::quant::{self, Depth, Quantizer};
use crate::regularizer::{self, RegularizerConfig, BETA_INIT};
use crate::tensor::{Element, Tensor};

/// Fixed STQ threshold as a multiple of the initial weight standard deviation.
pub const DELTA_RATIO: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// How a weight layer is quantized during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Adaptive binary/ternary with trainable per-filter scales and per-layer angle.
    Stq,
    /// BinaryConnect: `sign(w)` without a scale.
    Bc,
    /// Binary weights scaled by the mean magnitude.
    Bwn,
    /// Ternary weights with a weight-dependent threshold and scale.
    Twn,
    /// Full precision.
    Fp,
}

impl QuantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::Stq => "stq",
            QuantMode::Bc => "bc",
            QuantMode::Bwn => "bwn",
            QuantMode::Twn => "twn",
            QuantMode::Fp => "fp",
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stq" => Ok(QuantMode::Stq),
            "bc" => Ok(QuantMode::Bc),
            "bwn" => Ok(QuantMode::Bwn),
            "twn" => Ok(QuantMode::Twn),
            "fp" => Ok(QuantMode::Fp),
            other => Err(Error::invalid(format!("unknown quantization mode `{other}`"))),
        }
    }
}

/// Granularity of the trainable STQ scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleScope {
    #[default]
    PerFilter,
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        quantize: bool,
    },
    Dense {
        in_features: usize,
        out_features: usize,
        quantize: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn is_weight_layer(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Output shape (without the batch axis) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: String| Err(Error::shape("model_spec", what));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let &[c, h, w] = input else {
                    return bad(format!("conv2d expects [C, H, W], got {input:?}"));
                };
                if c != in_channels || stride == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return bad(format!(
                        "conv2d({in_channels}->{out_channels}, k{kernel}) cannot take {input:?}"
                    ));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => {
                if input != [in_features] {
                    return bad(format!("dense({in_features}->{out_features}) cannot take {input:?}"));
                }
                Ok(vec![out_features])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.first() != Some(&channels) {
                    return bad(format!("batchnorm({channels}) cannot take {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { kernel, stride } => {
                let &[c, h, w] = input else {
                    return bad(format!("maxpool2d expects [C, H, W], got {input:?}"));
                };
                if kernel == 0 || stride == 0 || kernel > h || kernel > w {
                    return bad(format!("maxpool2d(k{kernel}, s{stride}) cannot take {input:?}"));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `[C, H, W]`
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Checks that consecutive layers conform and returns the output shape.
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.layers.is_empty() {
            return Err(Error::shape("model_spec", "model has no layers"));
        }
        self.layers
            .iter()
            .try_fold(self.input_shape.clone(), |shape, l| l.output_shape(&shape))
    }

    pub fn weight_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_weight_layer()).count()
    }

    /// Weight-tensor element counts, in layer order.
    pub fn weight_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => Some(in_channels * out_channels * kernel * kernel),
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    ..
                } => Some(in_features * out_features),
                _ => None,
            })
            .collect()
    }
}

/// LeNet-5 for 1x28x28 inputs: two 5x5 convolutions each followed by 2x2 max
/// pooling, then dense 400-120-84-10. The first convolution pads by 2 so the
/// second pooling stage yields 16x5x5 = 400 features.
pub fn build_lenet5() -> ModelSpec {
    use LayerSpec::*;
    ModelSpec {
        name: "lenet5".into(),
        input_shape: vec![1, 28, 28],
        layers: vec![
            Conv2d { in_channels: 1, out_channels: 6, kernel: 5, stride: 1, padding: 2, quantize: true },
            Relu,
            MaxPool2d { kernel: 2, stride: 2 },
            Conv2d { in_channels: 6, out_channels: 16, kernel: 5, stride: 1, padding: 0, quantize: true },
            Relu,
            MaxPool2d { kernel: 2, stride: 2 },
            Flatten,
            Dense { in_features: 400, out_features: 120, quantize: true },
            Relu,
            Dense { in_features: 120, out_features: 84, quantize: true },
            Relu,
            Dense { in_features: 84, out_features: 10, quantize: true },
        ],
    }
}

fn scaled_width(base: usize, factor: f64) -> usize {
    ((base as f64 * factor).round() as usize).max(1)
}

fn vgg_blocks(
    name: &str,
    stages: &[&[usize]],
    width: f64,
    fp_first: bool,
    fp_last: bool,
) -> ModelSpec {
    let mut layers = Vec::new();
    let mut ch = 3;
    let mut first = true;
    let mut hw = 32;
    for stage in stages {
        for &base in *stage {
            let out = scaled_width(base, width);
            layers.push(LayerSpec::Conv2d {
                in_channels: ch,
                out_channels: out,
                kernel: 3,
                stride: 1,
                padding: 1,
                quantize: !(first && fp_first),
            });
            layers.push(LayerSpec::BatchNorm { channels: out });
            layers.push(LayerSpec::Relu);
            ch = out;
            first = false;
        }
        layers.push(LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
        hw /= 2;
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense {
        in_features: ch * hw * hw,
        out_features: 10,
        quantize: !fp_last,
    });
    ModelSpec {
        name: name.into(),
        input_shape: vec![3, 32, 32],
        layers,
    }
}

/// VGG-7 for 3x32x32 inputs: conv pairs of widths 128/256/512 (times `width`),
/// each conv followed by batchnorm and ReLU, 2x2 max pooling after each pair,
/// and a dense classifier. All seven weight layers are quantized.
pub fn build_vgg7(width: f64) -> ModelSpec {
    vgg_blocks("vgg7", &[&[128, 128], &[256, 256], &[512, 512]], width, false, false)
}

/// VGG-16 (13 convolutions and a dense classifier) with the first and last
/// weight layers kept at full precision.
pub fn build_vgg16(width: f64) -> ModelSpec {
    vgg_blocks(
        "vgg16",
        &[
            &[64, 64],
            &[128, 128],
            &[256, 256, 256],
            &[512, 512, 512],
            &[512, 512, 512],
        ],
        width,
        true,
        true,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct QuantLayerState<T: Element> {
    /// Latent full-precision weights, filter-major.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// STQ scales, shape `[K]` (per filter) or `[1]` (per layer).
    pub scales: Tensor<T>,
    /// STQ angle, shape `[1]`.
    pub beta: Tensor<T>,
    /// STQ zero threshold, frozen at initialization.
    pub delta: f64,
    pub sigma_init: f64,
    pub mode: QuantMode,
}

/// Per-filter mean absolute value, or a single layer-wide mean.
fn mean_abs_scales<T: Element>(w: &Tensor<T>, scope: ScaleScope) -> Vec<T> {
    let k = w.shape()[0];
    let per = w.len() / k;
    let floor = T::lit(regularizer::MU_FLOOR);
    match scope {
        ScaleScope::PerFilter => w
            .data()
            .chunks(per)
            .map(|f| {
                let m = f.iter().map(|v| v.abs()).sum::<T>() / T::lit(per as f64);
                m.max(floor)
            })
            .collect(),
        ScaleScope::PerLayer => {
            let m = w.data().iter().map(|v| v.abs()).sum::<T>() / T::lit(w.len() as f64);
            vec![m.max(floor)]
        }
    }
}

impl<T: Element> QuantLayerState<T> {
    /// He-initialized layer: weights `N(0, 2/fan_in)`, zero bias, scales at
    /// the mean weight magnitude, `beta` at `3pi/8`, `delta = 0.2 sigma`.
    pub fn init<R: Rng>(
        weight_shape: &[usize],
        mode: QuantMode,
        scope: ScaleScope,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in: usize = weight_shape[1..].iter().product();
        let sigma = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let weight = Tensor::from_fn(weight_shape, |_| T::lit(normal.sample(rng)));
        Self::from_weights(weight, mode, scope, sigma)
    }

    pub fn from_weights(weight: Tensor<T>, mode: QuantMode, scope: ScaleScope, sigma: f64) -> Result<Self> {
        if weight.rank() < 2 {
            return Err(Error::shape(
                "quant_layer",
                format!("weights must be filter-major with rank >= 2, got {:?}", weight.shape()),
            ));
        }
        let k = weight.shape()[0];
        let scales = mean_abs_scales(&weight, scope);
        let ns = scales.len();
        Ok(QuantLayerState {
            bias: Tensor::zeros(&[k]),
            scales: Tensor::from_parts(vec![ns], scales),
            beta: Tensor::from_parts(vec![1], vec![T::lit(BETA_INIT)]),
            delta: DELTA_RATIO * sigma,
            sigma_init: sigma,
            weight,
            mode,
        })
    }

    pub fn filters(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn beta_value(&self) -> f64 {
        self.beta.item().as_f64()
    }

    /// Scale applied to each filter in the training-time forward pass.
    pub fn effective_scales(&self) -> Result<Vec<T>> {
        let k = self.filters();
        Ok(match self.mode {
            QuantMode::Stq => {
                let s = self.scales.data();
                if s.len() == 1 {
                    vec![s[0]; k]
                } else {
                    s.to_vec()
                }
            }
            QuantMode::Bc => vec![T::lit(quant::bc_scale(self.weight.shape())?); k],
            QuantMode::Bwn => vec![quant::bwn_scale(&self.weight)?; k],
            QuantMode::Twn => vec![quant::twn_threshold_and_scale(&self.weight)?.1; k],
            QuantMode::Fp => vec![T::one(); k],
        })
    }

    /// Code function used in the training-time forward pass, `None` for FP.
    pub fn training_quantizer(&self) -> Result<Option<Quantizer>> {
        Ok(match self.mode {
            QuantMode::Stq => Some(Quantizer::Threshold(self.delta)),
            QuantMode::Bc | QuantMode::Bwn => Some(Quantizer::Sign),
            QuantMode::Twn => Some(Quantizer::Threshold(
                quant::twn_threshold_and_scale(&self.weight)?.0.as_f64(),
            )),
            QuantMode::Fp => None,
        })
    }

    /// Depth implied by the mode alone; STQ layers report ternary until a
    /// depth is decided from `beta`.
    pub fn training_depth(&self) -> Depth {
        match self.mode {
            QuantMode::Bc | QuantMode::Bwn => Depth::Binary,
            QuantMode::Stq | QuantMode::Twn => Depth::Ternary,
            QuantMode::Fp => Depth::Full,
        }
    }

    /// The weights the training-time forward pass convolves with.
    pub fn quantized_weight(&self) -> Result<Tensor<T>> {
        match self.training_quantizer()? {
            None => Ok(self.weight.clone()),
            Some(q) => quant::materialize(&self.weight, &self.effective_scales()?, &q.codes(&self.weight)?),
        }
    }

    /// Fraction of latent weights inside the STQ zero band `|w| <= delta`.
    pub fn zero_band_fraction(&self) -> f64 {
        let d = self.delta;
        self.weight
            .data()
            .iter()
            .filter(|v| v.as_f64().abs() <= d)
            .count() as f64
            / self.weight.len() as f64
    }

    /// Registers the weight on the tape and returns the effective weight var.
    fn record(&self, tape: &mut Tape<T>, layer: usize, params: &mut Vec<(ParamRef, Var)>) -> Result<(Var, Option<QuantVars>)> {
        let w = tape.param(self.weight.clone());
        params.push((ParamRef::new(layer, ParamKind::Weight), w));
        match self.mode {
            QuantMode::Fp => Ok((w, None)),
            QuantMode::Stq => {
                let mu = tape.param(self.scales.clone());
                let beta = tape.param(self.beta.clone());
                params.push((ParamRef::new(layer, ParamKind::Scale), mu));
                params.push((ParamRef::new(layer, ParamKind::Beta), beta));
                let k = self.filters();
                let mu_k = if self.scales.len() == 1 && k > 1 {
                    let ones = tape.constant(Tensor::full(&[k], T::one()));
                    tape.mul(ones, mu)?
                } else {
                    mu
                };
                let q = quant::ste_quantize(tape, w, mu_k, Quantizer::Threshold(self.delta))?;
                Ok((q, Some(QuantVars { layer, weight: w, scales: mu, beta })))
            }
            _ => {
                let quantizer = self.training_quantizer()?.expect("quantized mode");
                let scales = self.effective_scales()?;
                let mu = tape.constant(Tensor::from_parts(vec![scales.len()], scales));
                Ok((quant::ste_quantize(tape, w, mu, quantizer)?, None))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct BatchNormState<T: Element> {
    pub gamma: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    /// Exponential moving average update; the variance uses the unbiased
    /// estimate of the batch.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::lit(BN_MOMENTUM);
        let correction = if stats.count > 1 {
            T::lit(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = m * self.running_mean[c] + (T::one() - m) * stats.mean[c];
            self.running_var[c] = m * self.running_var[c] + (T::one() - m) * stats.var[c] * correction;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "type",
    rename_all = "snake_case",
    bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>")
)]
pub enum Layer<T: Element> {
    Conv2d {
        state: QuantLayerState<T>,
        stride: usize,
        padding: usize,
    },
    Dense {
        state: QuantLayerState<T>,
    },
    BatchNorm(BatchNormState<T>),
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl<T: Element> Layer<T> {
    pub fn quant_state(&self) -> Option<&QuantLayerState<T>> {
        match self {
            Layer::Conv2d { state, .. } | Layer::Dense { state } => Some(state),
            _ => None,
        }
    }

    pub fn quant_state_mut(&mut self) -> Option<&mut QuantLayerState<T>> {
        match self {
            Layer::Conv2d { state, .. } | Layer::Dense { state } => Some(state),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Beta,
    BnGamma,
    BnShift,
}

/// Identifies one trainable tensor of a [`Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamRef {
    pub layer: usize,
    pub kind: ParamKind,
}

impl ParamRef {
    pub fn new(layer: usize, kind: ParamKind) -> Self {
        ParamRef { layer, kind }
    }
}

/// Tape handles of one STQ layer's regularized parameters.
#[derive(Clone, Copy, Debug)]
pub struct QuantVars {
    pub layer: usize,
    pub weight: Var,
    pub scales: Var,
    pub beta: Var,
}

/// Result of recording a forward pass.
pub struct Forward<T> {
    pub logits: Var,
    pub params: Vec<(ParamRef, Var)>,
    pub quant: Vec<QuantVars>,
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Batchnorm uses batch statistics.
    Train,
    /// Batchnorm uses running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Model<T: Element = f32> {
    pub spec: ModelSpec,
    pub mode: QuantMode,
    pub layers: Vec<Layer<T>>,
}

impl<T: Element> Model<T> {
    /// Instantiates `spec`. Weight layers with `quantize: false` use
    /// [`QuantMode::Fp`] regardless of `mode`.
    pub fn new<R: Rng>(spec: &ModelSpec, mode: QuantMode, scope: ScaleScope, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                Ok(match *l {
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        quantize,
                    } => Layer::Conv2d {
                        state: QuantLayerState::init(
                            &[out_channels, in_channels, kernel, kernel],
                            if quantize { mode } else { QuantMode::Fp },
                            scope,
                            rng,
                        )?,
                        stride,
                        padding,
                    },
                    LayerSpec::Dense {
                        in_features,
                        out_features,
                        quantize,
                    } => Layer::Dense {
                        state: QuantLayerState::init(
                            &[out_features, in_features],
                            if quantize { mode } else { QuantMode::Fp },
                            scope,
                            rng,
                        )?,
                    },
                    LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNormState::new(channels)),
                    LayerSpec::Relu => Layer::Relu,
                    LayerSpec::MaxPool2d { kernel, stride } => Layer::MaxPool2d { kernel, stride },
                    LayerSpec::Flatten => Layer::Flatten,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            spec: spec.clone(),
            mode,
            layers,
        })
    }

    /// Indices of weight layers, in order.
    pub fn weight_layers(&self) -> impl Iterator<Item = (usize, &QuantLayerState<T>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.quant_state().map(|s| (i, s)))
    }

    pub fn betas(&self) -> Vec<f64> {
        self.weight_layers().map(|(_, s)| s.beta_value()).collect()
    }

    pub fn param(&self, r: ParamRef) -> Option<&Tensor<T>> {
        match (self.layers.get(r.layer)?, r.kind) {
            (Layer::Conv2d { state, .. } | Layer::Dense { state }, kind) => match kind {
                ParamKind::Weight => Some(&state.weight),
                ParamKind::Bias => Some(&state.bias),
                ParamKind::Scale => Some(&state.scales),
                ParamKind::Beta => Some(&state.beta),
                _ => None,
            },
            (Layer::BatchNorm(bn), ParamKind::BnGamma) => Some(&bn.gamma),
            (Layer::BatchNorm(bn), ParamKind::BnShift) => Some(&bn.shift),
            _ => None,
        }
    }

    pub fn param_mut(&mut self, r: ParamRef) -> Option<&mut Tensor<T>> {
        match (self.layers.get_mut(r.layer)?, r.kind) {
            (Layer::Conv2d { state, .. } | Layer::Dense { state }, kind) => match kind {
                ParamKind::Weight => Some(&mut state.weight),
                ParamKind::Bias => Some(&mut state.bias),
                ParamKind::Scale => Some(&mut state.scales),
                ParamKind::Beta => Some(&mut state.beta),
                _ => None,
            },
            (Layer::BatchNorm(bn), ParamKind::BnGamma) => Some(&mut bn.gamma),
            (Layer::BatchNorm(bn), ParamKind::BnShift) => Some(&mut bn.shift),
            _ => None,
        }
    }

    /// Records the forward pass of a `[N, C, H, W]` batch.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, phase: Phase) -> Result<Forward<T>> {
        let expect = &self.spec.input_shape;
        if tape.shape(x).len() != 4 || tape.shape(x)[1..] != expect[..] {
            return Err(Error::shape(
                "model_forward",
                format!("expected [N, {expect:?}], got {:?}", tape.shape(x)),
            ));
        }
        let mut params = Vec::new();
        let mut quant = Vec::new();
        let mut bn_stats = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Conv2d { state, stride, padding } => {
                    let (w, qv) = state.record(tape, i, &mut params)?;
                    quant.extend(qv);
                    let y = tape.conv2d(h, w, *stride, *padding)?;
                    let b = tape.param(state.bias.reshape(&[1, state.filters(), 1, 1])?);
                    params.push((ParamRef::new(i, ParamKind::Bias), b));
                    tape.add(y, b)?
                }
                Layer::Dense { state } => {
                    let (w, qv) = state.record(tape, i, &mut params)?;
                    quant.extend(qv);
                    let wt = tape.transpose(w)?;
                    let y = tape.matmul(h, wt)?;
                    let b = tape.param(state.bias.reshape(&[1, state.filters()])?);
                    params.push((ParamRef::new(i, ParamKind::Bias), b));
                    tape.add(y, b)?
                }
                Layer::BatchNorm(bn) => {
                    let g = tape.param(bn.gamma.clone());
                    let s = tape.param(bn.shift.clone());
                    params.push((ParamRef::new(i, ParamKind::BnGamma), g));
                    params.push((ParamRef::new(i, ParamKind::BnShift), s));
                    match phase {
                        Phase::Train => {
                            let (y, stats) = tape.batchnorm_train(h, g, s, T::lit(BN_EPS))?;
                            bn_stats.push((i, stats));
                            y
                        }
                        Phase::Eval => tape.batchnorm_eval(
                            h,
                            g,
                            s,
                            &bn.running_mean,
                            &bn.running_var,
                            T::lit(BN_EPS),
                        )?,
                    }
                }
                Layer::Relu => tape.relu(h),
                Layer::MaxPool2d { kernel, stride } => tape.maxpool2d(h, *kernel, *stride)?,
                Layer::Flatten => {
                    let n = tape.shape(h)[0];
                    let rest = tape.value(h).len() / n;
                    tape.reshape(h, &[n, rest])?
                }
            };
        }
        Ok(Forward {
            logits: h,
            params,
            quant,
            bn_stats,
        })
    }

    /// Sum of the STQ layer penalties, or `None` when no layer is in STQ mode.
    pub fn regularization(
        &self,
        tape: &mut Tape<T>,
        fwd: &Forward<T>,
        cfg: &RegularizerConfig,
    ) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for q in &fwd.quant {
            let r = regularizer::reg_layer_on_tape(tape, q.weight, q.scales, q.beta, cfg)?;
            total = Some(match total {
                Some(t) => tape.add(t, r)?,
                None => r,
            });
        }
        Ok(total)
    }

    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        for (i, s) in stats {
            if let Some(Layer::BatchNorm(bn)) = self.layers.get_mut(*i) {
                bn.update_running(s);
            }
        }
    }

    /// Evaluation-mode logits for a batch.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let fwd = self.forward(&mut tape, xv, Phase::Eval)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Same model with every tensor converted to another element type.
    pub fn cast<U: Element>(&self) -> Model<U> {
        let qs = |s: &QuantLayerState<T>| QuantLayerState {
            weight: s.weight.cast(),
            bias: s.bias.cast(),
            scales: s.scales.cast(),
            beta: s.beta.cast(),
            delta: s.delta,
            sigma_init: s.sigma_init,
            mode: s.mode,
        };
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        Model {
            spec: self.spec.clone(),
            mode: self.mode,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv2d { state, stride, padding } => Layer::Conv2d {
                        state: qs(state),
                        stride: *stride,
                        padding: *padding,
                    },
                    Layer::Dense { state } => Layer::Dense { state: qs(state) },
                    Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNormState {
                        gamma: bn.gamma.cast(),
                        shift: bn.shift.cast(),
                        running_mean: conv(&bn.running_mean),
                        running_var: conv(&bn.running_var),
                    }),
                    Layer::Relu => Layer::Relu,
                    Layer::MaxPool2d { kernel, stride } => Layer::MaxPool2d {
                        kernel: *kernel,
                        stride: *stride,
                    },
                    Layer::Flatten => Layer::Flatten,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lenet_shapes_and_counts() {
        let spec = build_lenet5();
        assert_eq!(spec.validate().unwrap(), vec![10]);
        assert_eq!(spec.weight_layer_count(), 5);
        let counts = spec.weight_counts();
        assert_eq!(counts, vec![150, 2400, 48000, 10080, 840]);
        let conv: usize = counts[..2].iter().sum();
        let dense: usize = counts[2..].iter().sum();
        assert!(conv * 10 < dense);
    }

    #[test]
    fn vgg_shapes() {
        let spec = build_vgg7(1.0);
        assert_eq!(spec.validate().unwrap(), vec![10]);
        assert_eq!(spec.weight_layer_count(), 7);
        let small = build_vgg7(0.25);
        assert_eq!(small.validate().unwrap(), vec![10]);
        assert_eq!(small.weight_layer_count(), 7);
        let v16 = build_vgg16(0.125);
        assert_eq!(v16.validate().unwrap(), vec![10]);
        assert_eq!(v16.weight_layer_count(), 14);
    }

    #[test]
    fn spec_rejects_nonconforming_layers() {
        let mut spec = build_lenet5();
        spec.layers[7] = LayerSpec::Dense {
            in_features: 256,
            out_features: 120,
            quantize: true,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn vgg16_keeps_ends_full_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::<f32>::new(&build_vgg16(0.0625), QuantMode::Stq, ScaleScope::PerFilter, &mut rng).unwrap();
        let modes: Vec<QuantMode> = m.weight_layers().map(|(_, s)| s.mode).collect();
        assert_eq!(modes[0], QuantMode::Fp);
        assert_eq!(modes[13], QuantMode::Fp);
        assert!(modes[1..13].iter().all(|&m| m == QuantMode::Stq));
    }

    #[test]
    fn lenet_forward_gives_ten_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::<f32>::new(&build_lenet5(), QuantMode::Stq, ScaleScope::PerFilter, &mut rng).unwrap();
        let x = Tensor::full(&[2, 1, 28, 28], 0.5f32);
        let y = m.logits(&x).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
        assert!(y.all_finite());
    }

    #[test]
    fn stq_init_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = QuantLayerState::<f32>::init(&[16, 6, 5, 5], QuantMode::Stq, ScaleScope::PerFilter, &mut rng).unwrap();
        assert!((s.delta - 0.2 * s.sigma_init).abs() < 1e-15);
        assert!((s.sigma_init - (2.0f64 / 150.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.scales.shape(), &[16]);
        assert!((s.beta_value() - BETA_INIT).abs() < 1e-6);
        let layer = QuantLayerState::<f32>::init(&[4, 3], QuantMode::Stq, ScaleScope::PerLayer, &mut rng).unwrap();
        assert_eq!(layer.scales.shape(), &[1]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("TWN".parse::<QuantMode>().unwrap(), QuantMode::Twn);
        assert!("ttq".parse::<QuantMode>().is_err());
    }
}
