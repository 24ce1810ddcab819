//! Deployment-form models: weight layers hold quantized codes with per-filter
//! scales that are applied to the layer output, or full-precision weights.

use crate::autograd::{Tape, Var};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Layer, Model, Phase, QuantLayerState, BN_EPS};
use crate::quant::{self, Depth, QuantDepth, Quantizer, TernaryCode};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Payload<T: Element> {
    Codes { depth: QuantDepth, codes: TernaryCode },
    Full(Tensor<T>),
}

/// Exported weights of one conv or dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct InferWeights<T: Element> {
    /// Filter-major weight shape.
    pub shape: Vec<usize>,
    /// Threshold used to produce ternary codes (0 when not applicable).
    pub delta: f32,
    /// Per-filter scales; empty for full-precision layers.
    pub scales: Vec<T>,
    pub payload: Payload<T>,
    pub bias: Vec<T>,
}

impl<T: Element> InferWeights<T> {
    pub fn depth(&self) -> Depth {
        match &self.payload {
            Payload::Codes { depth, .. } => (*depth).into(),
            Payload::Full(_) => Depth::Full,
        }
    }

    pub fn filters(&self) -> usize {
        self.shape[0]
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Checks internal consistency of shapes, scales, codes and bias.
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::shape("infer_weights", d));
        if self.shape.len() < 2 || self.shape.contains(&0) {
            return bad(format!("invalid weight shape {:?}", self.shape));
        }
        let k = self.filters();
        if self.bias.len() != k {
            return bad(format!("{} biases for {k} filters", self.bias.len()));
        }
        match &self.payload {
            Payload::Full(w) => {
                if w.shape() != self.shape.as_slice() {
                    return bad(format!("weights {:?} vs declared {:?}", w.shape(), self.shape));
                }
                if !self.scales.is_empty() {
                    return bad("full-precision layer carries scales".into());
                }
            }
            Payload::Codes { depth, codes } => {
                if codes.len() != self.numel() {
                    return bad(format!("{} codes for shape {:?}", codes.len(), self.shape));
                }
                if self.scales.len() != k {
                    return bad(format!("{} scales for {k} filters", self.scales.len()));
                }
                if *depth == QuantDepth::Binary && !codes.is_binary() {
                    let i = codes.as_slice().iter().position(|&c| c == 0).unwrap_or(0);
                    return Err(Error::ZeroCodeInBinary(i));
                }
            }
        }
        Ok(())
    }

    /// Full-precision weights, or codes scaled by their filter's scale.
    pub fn materialize(&self) -> Result<Tensor<T>> {
        match &self.payload {
            Payload::Full(w) => Ok(w.clone()),
            Payload::Codes { codes, .. } => {
                let w = codes.to_tensor::<T>(&self.shape)?;
                quant::materialize(&w, &self.scales, codes)
            }
        }
    }

    /// Applies the layer on the tape: the operator runs on the raw codes and
    /// the per-filter scales multiply the output channels afterwards.
    fn apply(&self, tape: &mut Tape<T>, x: Var, op: impl Fn(&mut Tape<T>, Var, Var) -> Result<Var>, chan_shape: &[usize]) -> Result<Var> {
        let y = match &self.payload {
            Payload::Full(w) => {
                let w = tape.constant(w.clone());
                op(tape, x, w)?
            }
            Payload::Codes { codes, .. } => {
                let w = tape.constant(codes.to_tensor(&self.shape)?);
                let y = op(tape, x, w)?;
                let s = tape.constant(Tensor::new(chan_shape.to_vec(), self.scales.clone())?);
                tape.mul(y, s)?
            }
        };
        let b = tape.constant(Tensor::new(chan_shape.to_vec(), self.bias.clone())?);
        tape.add(y, b)
    }

    pub fn cast<U: Element>(&self) -> InferWeights<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        InferWeights {
            shape: self.shape.clone(),
            delta: self.delta,
            scales: conv(&self.scales),
            payload: match &self.payload {
                Payload::Codes { depth, codes } => Payload::Codes {
                    depth: *depth,
                    codes: codes.clone(),
                },
                Payload::Full(w) => Payload::Full(w.cast()),
            },
            bias: conv(&self.bias),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InferLayer<T: Element> {
    Conv2d {
        weights: InferWeights<T>,
        stride: usize,
        padding: usize,
    },
    Dense {
        weights: InferWeights<T>,
    },
    BatchNorm {
        gamma: Vec<T>,
        shift: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl<T: Element> InferLayer<T> {
    pub fn weights(&self) -> Option<&InferWeights<T>> {
        match self {
            InferLayer::Conv2d { weights, .. } | InferLayer::Dense { weights } => Some(weights),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceModel<T: Element = f32> {
    pub layers: Vec<InferLayer<T>>,
}

/// Codes and threshold a layer is exported with at the given depth.
/// Binary layers use `sign(W)`; ternary layers use the threshold the layer
/// trained with (the fixed STQ threshold, or the TWN threshold).
pub fn export_codes<T: Element>(state: &QuantLayerState<T>, depth: QuantDepth) -> Result<(TernaryCode, f64)> {
    let trained = state.training_quantizer()?;
    let delta = match trained {
        Some(Quantizer::Threshold(d)) => d,
        _ => state.delta,
    };
    let codes = match depth {
        QuantDepth::Binary => quant::sign_binarize(&state.weight),
        QuantDepth::Ternary => quant::threshold_ternarize(&state.weight, T::lit(delta))?,
    };
    let delta = match (depth, trained) {
        (QuantDepth::Binary, Some(Quantizer::Sign)) => 0.0,
        _ => delta,
    };
    Ok((codes, delta))
}

pub fn export_weights<T: Element>(state: &QuantLayerState<T>, depth: Depth) -> Result<InferWeights<T>> {
    let bias = state.bias.data().to_vec();
    let shape = state.weight.shape().to_vec();
    Ok(match depth.quantized() {
        None => InferWeights {
            shape,
            delta: 0.0,
            scales: Vec::new(),
            payload: Payload::Full(state.weight.clone()),
            bias,
        },
        Some(q) => {
            let (codes, delta) = export_codes(state, q)?;
            InferWeights {
                shape,
                delta: delta as f32,
                scales: state.effective_scales()?,
                payload: Payload::Codes { depth: q, codes },
                bias,
            }
        }
    })
}

impl<T: Element> InferenceModel<T> {
    /// Exports `model` with one depth per weight layer, in layer order.
    pub fn from_model(model: &Model<T>, depths: &[Depth]) -> Result<Self> {
        let n = model.weight_layers().count();
        if depths.len() != n {
            return Err(Error::invalid(format!("{} depths for {n} weight layers", depths.len())));
        }
        let mut d = depths.iter();
        let layers = model
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    Layer::Conv2d { state, stride, padding } => InferLayer::Conv2d {
                        weights: export_weights(state, *d.next().expect("depth count checked"))?,
                        stride: *stride,
                        padding: *padding,
                    },
                    Layer::Dense { state } => InferLayer::Dense {
                        weights: export_weights(state, *d.next().expect("depth count checked"))?,
                    },
                    Layer::BatchNorm(bn) => InferLayer::BatchNorm {
                        gamma: bn.gamma.data().to_vec(),
                        shift: bn.shift.data().to_vec(),
                        running_mean: bn.running_mean.clone(),
                        running_var: bn.running_var.clone(),
                    },
                    Layer::Relu => InferLayer::Relu,
                    Layer::MaxPool2d { kernel, stride } => InferLayer::MaxPool2d {
                        kernel: *kernel,
                        stride: *stride,
                    },
                    Layer::Flatten => InferLayer::Flatten,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InferenceModel { layers })
    }

    pub fn weights(&self) -> impl Iterator<Item = &InferWeights<T>> {
        self.layers.iter().filter_map(|l| l.weights())
    }

    pub fn depths(&self) -> Vec<Depth> {
        self.weights().map(|w| w.depth()).collect()
    }

    pub fn weight_counts(&self) -> Vec<usize> {
        self.weights().map(|w| w.numel()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            match l {
                InferLayer::Conv2d { weights, .. } | InferLayer::Dense { weights } => weights.validate()?,
                InferLayer::BatchNorm {
                    gamma,
                    shift,
                    running_mean,
                    running_var,
                } => {
                    let c = gamma.len();
                    if c == 0 || shift.len() != c || running_mean.len() != c || running_var.len() != c {
                        return Err(Error::shape("infer_batchnorm", "parameter lengths differ"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let mut h = tape.constant(x.clone());
        for l in &self.layers {
            h = match l {
                InferLayer::Conv2d { weights, stride, padding } => {
                    let (s, p) = (*stride, *padding);
                    weights.apply(&mut tape, h, |t, a, b| t.conv2d(a, b, s, p), &[1, weights.filters(), 1, 1])?
                }
                InferLayer::Dense { weights } => weights.apply(
                    &mut tape,
                    h,
                    |t, a, b| {
                        let bt = t.transpose(b)?;
                        t.matmul(a, bt)
                    },
                    &[1, weights.filters()],
                )?,
                InferLayer::BatchNorm {
                    gamma,
                    shift,
                    running_mean,
                    running_var,
                } => {
                    let c = gamma.len();
                    let g = tape.constant(Tensor::new(vec![c], gamma.clone())?);
                    let b = tape.constant(Tensor::new(vec![c], shift.clone())?);
                    tape.batchnorm_eval(h, g, b, running_mean, running_var, T::lit(BN_EPS))?
                }
                InferLayer::Relu => tape.relu(h),
                InferLayer::MaxPool2d { kernel, stride } => tape.maxpool2d(h, *kernel, *stride)?,
                InferLayer::Flatten => {
                    let n = tape.shape(h)[0];
                    let rest = tape.value(h).len() / n;
                    tape.reshape(h, &[n, rest])?
                }
            };
        }
        Ok(tape.value(h).clone())
    }

    pub fn cast<U: Element>(&self) -> InferenceModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        InferenceModel {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    InferLayer::Conv2d { weights, stride, padding } => InferLayer::Conv2d {
                        weights: weights.cast(),
                        stride: *stride,
                        padding: *padding,
                    },
                    InferLayer::Dense { weights } => InferLayer::Dense { weights: weights.cast() },
                    InferLayer::BatchNorm {
                        gamma,
                        shift,
                        running_mean,
                        running_var,
                    } => InferLayer::BatchNorm {
                        gamma: conv(gamma),
                        shift: conv(shift),
                        running_mean: conv(running_mean),
                        running_var: conv(running_var),
                    },
                    InferLayer::Relu => InferLayer::Relu,
                    InferLayer::MaxPool2d { kernel, stride } => InferLayer::MaxPool2d {
                        kernel: *kernel,
                        stride: *stride,
                    },
                    InferLayer::Flatten => InferLayer::Flatten,
                })
                .collect(),
        }
    }
}

/// Anything that maps a batch of images to class logits.
pub trait Classifier<T: Element> {
    fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Element> Classifier<T> for InferenceModel<T> {
    fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits(x)
    }
}

impl<T: Element> Classifier<T> for Model<T> {
    fn classify(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let fwd = self.forward(&mut tape, xv, Phase::Eval)?;
        Ok(tape.value(fwd.logits).clone())
    }
}

/// Index of the first maximum in each row of `[N, C]` logits.
pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let &[_, c] = logits.shape() else {
        return Err(Error::shape("argmax", format!("expected [N, C], got {:?}", logits.shape())));
    };
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect())
}

/// Number of correctly classified examples.
pub fn count_correct<T: Element, C: Classifier<T> + ?Sized>(
    model: &C,
    data: &Dataset,
    batch_size: usize,
) -> Result<usize> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut correct = 0;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let x = data.images.slice_outer(start, end)?.cast::<T>();
        let pred = argmax_rows(&model.classify(&x)?)?;
        correct += pred
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, &y)| **p == y as usize)
            .count();
        start = end;
    }
    Ok(correct)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn accuracy<T: Element, C: Classifier<T> + ?Sized>(model: &C, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    Ok(count_correct(model, data, batch_size)? as f64 / data.len() as f64)
}
