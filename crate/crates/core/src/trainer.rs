//! Objective, optimizer, training loop, depth decision and compression
//! accounting.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dataio::{self, Dataset};
use crate::error::{Error, Result};
use crate::inference::{self, InferenceModel};
use crate::nn::{Forward, Layer, Model, ModelSpec, ParamKind, ParamRef, Phase, QuantMode, ScaleScope};
use crate::quant::Depth;
use crate::regularizer::{RegularizerConfig, MU_FLOOR};
use crate::report::{self, Histogram, LayerSummary};
use crate::tensor::{Element, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// RNG stream used for model initialization; shuffling and augmentation use
/// their own streams of the same seed.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Zero-based epochs from which the learning rate is divided once more.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    /// L2 coefficient on weights, used only in BC, BWN and TWN modes.
    pub weight_decay: f64,
    pub mode: QuantMode,
    pub seed: u64,
    pub scale_scope: ScaleScope,
    /// Clip latent weights to `[-1, 1]` after each step; unset means on for
    /// BC and off otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_latent: Option<bool>,
    /// Random pad-crop-flip augmentation of training batches.
    pub augment: bool,
    pub eval_batch_size: usize,
    /// Zero-based epochs after which weight histograms are captured, in
    /// addition to the final epoch.
    pub histogram_epochs: Vec<usize>,
    pub regularizer: RegularizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            initial_lr: 0.01,
            lr_drop_epochs: vec![15, 30],
            lr_drop_factor: 10.0,
            weight_decay: 1e-4,
            mode: QuantMode::Stq,
            seed: 0,
            scale_scope: ScaleScope::PerFilter,
            clip_latent: None,
            augment: false,
            eval_batch_size: 500,
            histogram_epochs: Vec::new(),
            regularizer: RegularizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::invalid(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if !(self.lr_drop_factor > 1.0) {
            return Err(Error::invalid(format!("lr_drop_factor must exceed 1, got {}", self.lr_drop_factor)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        self.regularizer.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| epoch >= d).count();
        self.initial_lr / self.lr_drop_factor.powi(drops as i32)
    }

    pub fn clips_latent(&self) -> bool {
        self.clip_latent.unwrap_or(self.mode == QuantMode::Bc)
    }

    pub fn decays(&self, mode: QuantMode) -> bool {
        matches!(mode, QuantMode::Bc | QuantMode::Bwn | QuantMode::Twn)
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One bias-corrected Adam update. `weight_decay` adds `wd * p` to the
/// gradient. An empty state is initialized to zeros.
pub fn adam_step<T: Element>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != param.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grad.len(), param.len()),
        ));
    }
    if state.t == 0 && state.m.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    if state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::shape(
            "adam_step",
            format!("state holds {} moments for {} parameters", state.m.len(), param.len()),
        ));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..param.len() {
        let p = param[i].as_f64();
        let g = grad[i].as_f64() + weight_decay * p;
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        param[i] = T::lit(p - lr * mhat / (vhat.sqrt() + ADAM_EPS));
    }
    Ok(())
}

/// A recorded objective: cross-entropy plus the STQ penalty of every STQ layer.
pub struct Objective<T: Element> {
    pub tape: Tape<T>,
    pub forward: Forward<T>,
    pub loss: Var,
    pub regularization: Option<Var>,
    pub total: Var,
}

impl<T: Element> Objective<T> {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).item().as_f64()
    }

    pub fn total_value(&self) -> f64 {
        self.tape.value(self.total).item().as_f64()
    }
}

pub fn total_objective<T: Element>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    reg: &RegularizerConfig,
    phase: Phase,
) -> Result<Objective<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let forward = model.forward(&mut tape, xv, phase)?;
    let logp = tape.log_softmax(forward.logits)?;
    let loss = tape.nll_loss(logp, labels)?;
    let regularization = model.regularization(&mut tape, &forward, reg)?;
    let total = match regularization {
        Some(r) => tape.add(loss, r)?,
        None => loss,
    };
    Ok(Objective {
        tape,
        forward,
        loss,
        regularization,
        total,
    })
}

/// Per quantizable layer: STQ layers are binary when `beta >= delta` and
/// ternary otherwise; BC/BWN are binary, TWN ternary, FP layers full.
pub fn decide_depths<T: Element>(model: &Model<T>, delta: f64) -> Vec<Depth> {
    model
        .weight_layers()
        .map(|(_, s)| match s.mode {
            QuantMode::Stq => {
                if s.beta_value() >= delta {
                    Depth::Binary
                } else {
                    Depth::Ternary
                }
            }
            QuantMode::Bc | QuantMode::Bwn => Depth::Binary,
            QuantMode::Twn => Depth::Ternary,
            QuantMode::Fp => Depth::Full,
        })
        .collect()
}

/// `sum(n_l * 32) / sum(n_l * bits_l)` over weight tensors.
pub fn compression_ratio(weight_counts: &[usize], depths: &[Depth]) -> Result<f64> {
    if weight_counts.len() != depths.len() || weight_counts.is_empty() {
        return Err(Error::invalid(format!(
            "{} weight counts for {} depths",
            weight_counts.len(),
            depths.len()
        )));
    }
    let full: f64 = weight_counts.iter().map(|&n| n as f64 * 32.0).sum();
    let packed: f64 = weight_counts
        .iter()
        .zip(depths)
        .map(|(&n, d)| n as f64 * d.bits() as f64)
        .sum();
    Ok(full / packed)
}

pub fn depth_string(depths: &[Depth]) -> String {
    depths.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over training batches.
    pub train_loss: f64,
    /// Mean of cross-entropy plus regularization.
    pub train_objective: f64,
    pub val_accuracy: f64,
    pub betas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSnapshot {
    pub epoch: usize,
    /// Position among the weight layers.
    pub layer: usize,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub model: String,
    pub mode: QuantMode,
    pub epochs: Vec<EpochRecord>,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    /// Accuracy of the exported model (decided depths) on the validation split.
    pub quantized_accuracy: f64,
    pub depths: Vec<u32>,
    pub depth_string: String,
    pub compression_ratio: f64,
    pub weight_counts: Vec<usize>,
    pub layers: Vec<LayerSummary>,
    pub histograms: Vec<HistogramSnapshot>,
}

impl TrainingReport {
    /// `beta[epoch][layer]` as CSV with one row per epoch.
    pub fn beta_trajectory_csv(&self) -> String {
        let n = self.depths.len();
        let mut s = String::from("epoch");
        for l in 0..n {
            s.push_str(&format!(",beta_{l}"));
        }
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&e.epoch.to_string());
            for b in &e.betas {
                s.push_str(&format!(",{b}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_objective,val_accuracy\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.lr, e.train_loss, e.train_objective, e.val_accuracy
            ));
        }
        s
    }
}

pub fn init_model<T: Element>(spec: &ModelSpec, cfg: &TrainConfig) -> Result<Model<T>> {
    let mut rng = seeded_rng(cfg.seed, INIT_STREAM);
    Model::new(spec, cfg.mode, cfg.scale_scope, &mut rng)
}

/// Keeps STQ angles in `[beta_min, beta_max]`, scales above the floor and,
/// when requested, latent weights in `[-1, 1]`.
pub fn apply_constraints<T: Element>(model: &mut Model<T>, reg: &RegularizerConfig, clip_latent: bool) {
    let floor = T::lit(MU_FLOOR);
    for layer in &mut model.layers {
        let Some(s) = layer.quant_state_mut() else { continue };
        if s.mode == QuantMode::Stq {
            let b = reg.clamp_beta(s.beta.item().as_f64());
            s.beta.data_mut()[0] = T::lit(b);
            for m in s.scales.data_mut() {
                if !(*m >= floor) {
                    *m = floor;
                }
            }
        }
        if clip_latent && s.mode != QuantMode::Fp {
            for w in s.weight.data_mut() {
                *w = w.max(-T::one()).min(T::one());
            }
        }
    }
}

fn snapshot<T: Element>(model: &Model<T>, epoch: usize) -> Result<Vec<HistogramSnapshot>> {
    model
        .weight_layers()
        .enumerate()
        .map(|(layer, (_, s))| {
            Ok(HistogramSnapshot {
                epoch,
                layer,
                histogram: report::weight_histogram(s)?,
            })
        })
        .collect()
}

/// Adam over every trainable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct Optimizer {
    states: BTreeMap<ParamRef, AdamState>,
}

impl Optimizer {
    pub fn step<T: Element>(
        &mut self,
        model: &mut Model<T>,
        params: &[(ParamRef, Var)],
        grads: &mut crate::autograd::Gradients<T>,
        lr: f64,
        decay: impl Fn(ParamRef, QuantMode) -> f64,
    ) -> Result<()> {
        for &(r, v) in params {
            let Some(g) = grads.take(v) else { continue };
            let mode = model.layers[r.layer]
                .quant_state()
                .map(|s| s.mode)
                .unwrap_or(QuantMode::Fp);
            let wd = decay(r, mode);
            let p = model
                .param_mut(r)
                .ok_or_else(|| Error::invalid(format!("no parameter {r:?}")))?;
            let state = self.states.entry(r).or_default();
            adam_step(p.data_mut(), g.data(), state, lr, wd)?;
        }
        Ok(())
    }
}

fn batch_input<T: Element>(x: Tensor<f32>) -> Tensor<T> {
    x.cast()
}

/// Trains `model` in place and returns the report. `progress` is called after
/// every epoch.
pub fn train<T: Element>(
    model: &mut Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainingReport> {
    cfg.validate()?;
    for d in [train_set, val_set] {
        if d.image_shape() != model.spec.input_shape.as_slice() {
            return Err(Error::shape(
                "train",
                format!(
                    "{} split has images {:?}, model expects {:?}",
                    d.split,
                    d.image_shape(),
                    model.spec.input_shape
                ),
            ));
        }
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mut shuffle_rng = seeded_rng(cfg.seed, SHUFFLE_STREAM);
    let mut augment_rng = seeded_rng(cfg.seed, AUGMENT_STREAM);
    let mut opt = Optimizer::default();
    let clip = cfg.clips_latent();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut histograms = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut obj_sum) = (0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, y) = train_set.batch(idx)?;
            if cfg.augment {
                x = dataio::augment_cifar(&x, &mut augment_rng)?;
            }
            let obj = total_objective(model, &batch_input::<T>(x), &y, &cfg.regularizer, Phase::Train)?;
            let total = obj.total_value();
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss: total });
            }
            loss_sum += obj.loss_value() * idx.len() as f64;
            obj_sum += total * idx.len() as f64;
            let mut grads = obj.tape.backward(obj.total)?;
            model.apply_bn_stats(&obj.forward.bn_stats);
            opt.step(model, &obj.forward.params, &mut grads, lr, |r, mode| {
                if r.kind == ParamKind::Weight && cfg.decays(mode) {
                    cfg.weight_decay
                } else {
                    0.0
                }
            })?;
            apply_constraints(model, &cfg.regularizer, clip);
        }
        let val_accuracy = inference::accuracy(&*model, val_set, cfg.eval_batch_size)?;
        if val_accuracy > best.0 {
            best = (val_accuracy, epoch);
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_objective: obj_sum / train_set.len() as f64,
            val_accuracy,
            betas: model.betas(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} objective {:.4} val {:.4} betas {:?}",
            rec.train_loss,
            rec.train_objective,
            val_accuracy,
            rec.betas.iter().map(|b| (b * 1e3).round() / 1e3).collect::<Vec<_>>()
        );
        progress(&rec);
        epochs.push(rec);
        if cfg.histogram_epochs.contains(&epoch) && epoch + 1 != cfg.epochs {
            histograms.extend(snapshot(model, epoch)?);
        }
    }
    histograms.extend(snapshot(model, cfg.epochs - 1)?);

    let depths = decide_depths(model, cfg.regularizer.delta);
    let exported = InferenceModel::from_model(model, &depths)?;
    let quantized_accuracy = inference::accuracy(&exported, val_set, cfg.eval_batch_size)?;
    let weight_counts = exported.weight_counts();
    let layers = model
        .layers
        .iter()
        .filter(|l| l.quant_state().is_some())
        .zip(&depths)
        .enumerate()
        .map(|(i, (l, d))| {
            let kind = if matches!(l, Layer::Conv2d { .. }) { "conv2d" } else { "dense" };
            report::summarize_layer(i, kind, l.quant_state().expect("weight layer"), *d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingReport {
        model: model.spec.name.clone(),
        mode: cfg.mode,
        epochs,
        best_val_accuracy: best.0,
        best_epoch: best.1,
        quantized_accuracy,
        depths: depths.iter().map(|d| d.bits()).collect(),
        depth_string: depth_string(&depths),
        compression_ratio: compression_ratio(&weight_counts, &depths)?,
        weight_counts,
        layers,
        histograms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_lenet5, LayerSpec, ModelSpec};
    use crate::regularizer::{BETA_MAX, BETA_MIN};

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![0.3f64, -1.0];
        let mut s = AdamState::default();
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![0.3, -1.0]);
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let mut p = vec![0.0f64];
        let mut s = AdamState::default();
        let lr = 1e-3;
        let mut prev = 0.0;
        for _ in 0..2000 {
            adam_step(&mut p, &[0.5], &mut s, lr, 0.0).unwrap();
            let step = prev - p[0];
            prev = p[0];
            assert!((step - lr).abs() < 1e-6 * lr + 1e-12, "{step}");
        }
    }

    #[test]
    fn adam_rejects_mismatched_state() {
        let mut p = vec![0.0f32; 3];
        let mut s = AdamState::default();
        assert!(adam_step(&mut p, &[0.0; 2], &mut s, 0.1, 0.0).is_err());
        adam_step(&mut p, &[0.0; 3], &mut s, 0.1, 0.0).unwrap();
        let mut q = vec![0.0f32; 4];
        assert!(adam_step(&mut q, &[0.0; 4], &mut s, 0.1, 0.0).is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert_eq!(cfg.lr_at(14), 0.01);
        assert!((cfg.lr_at(15) - 0.001).abs() < 1e-15);
        assert!((cfg.lr_at(59) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn ratios() {
        let spec = build_lenet5();
        let c = spec.weight_counts();
        assert_eq!(compression_ratio(&c, &[Depth::Binary; 5]).unwrap(), 32.0);
        assert_eq!(compression_ratio(&c, &[Depth::Ternary; 5]).unwrap(), 16.0);
        assert_eq!(compression_ratio(&c, &[Depth::Full; 5]).unwrap(), 1.0);
        let mixed = [Depth::Binary, Depth::Binary, Depth::Ternary, Depth::Ternary, Depth::Ternary];
        let r = compression_ratio(&c, &mixed).unwrap();
        assert!((r - 1_967_040.0 / 120_390.0).abs() < 1e-12);
        assert_eq!(depth_string(&mixed), "1-1-2-2-2");
        assert_eq!(compression_ratio(&[9], &[Depth::Ternary]).unwrap(), 16.0);
        assert!(compression_ratio(&c, &mixed[..3]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.lr_drop_factor = 1.0;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig { mode: QuantMode::Bc, ..Default::default() }.clips_latent());
        assert!(!TrainConfig::default().clips_latent());
    }

    #[test]
    fn depths_follow_beta() {
        let cfg = TrainConfig::default();
        let mut m: Model<f32> = init_model(&build_lenet5(), &cfg).unwrap();
        let betas = [1.56, 1.57, 1.0, 0.86, 0.98];
        let mut i = 0;
        for l in &mut m.layers {
            if let Some(s) = l.quant_state_mut() {
                s.beta = Tensor::new(vec![1], vec![betas[i]]).unwrap();
                i += 1;
            }
        }
        assert_eq!(depth_string(&decide_depths(&m, 1.55)), "1-1-2-2-2");

        let mut v: Model<f32> = init_model(&crate::nn::build_vgg7(0.25), &cfg).unwrap();
        let betas = [1.56, 1.57, 1.57, 1.57, 1.00, 0.86, 0.98];
        for (s, b) in v.layers.iter_mut().filter_map(|l| l.quant_state_mut()).zip(betas) {
            s.beta = Tensor::new(vec![1], vec![b]).unwrap();
        }
        assert_eq!(depth_string(&decide_depths(&v, 1.55)), "1-1-1-1-2-2-2");
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            name: "tiny".into(),
            input_shape: vec![1, 1, 6],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 6,
                    out_features: 5,
                    quantize: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_features: 5,
                    out_features: 3,
                    quantize: true,
                },
            ],
        }
    }

    fn tiny_batch() -> (Tensor<f64>, Vec<usize>) {
        let x = Tensor::from_fn(&[4, 1, 1, 6], |i| ((i * 7 % 11) as f64 - 5.0) / 4.0);
        (x, vec![0, 1, 2, 1])
    }

    #[test]
    fn objective_reduces_to_the_loss() {
        let (x, y) = tiny_batch();
        let m: Model<f64> = init_model(&tiny_spec(), &TrainConfig::default()).unwrap();
        let no_reg = RegularizerConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let o = total_objective(&m, &x, &y, &no_reg, Phase::Train).unwrap();
        assert_eq!(o.total_value(), o.loss_value());

        // latent weights already on {-mu, 0, +mu}
        let mut q = m.clone();
        for s in q.layers.iter_mut().filter_map(|l| l.quant_state_mut()) {
            let mu = s.scales.data().to_vec();
            let per = s.weight.len() / s.filters();
            s.weight = Tensor::from_fn(s.weight.shape(), |i| mu[i / per] * [1.0, 0.0, -1.0][i % 3]);
        }
        let flat = RegularizerConfig {
            gamma: 0.0,
            ..Default::default()
        };
        let o = total_objective(&q, &x, &y, &flat, Phase::Train).unwrap();
        assert_eq!(o.total_value(), o.loss_value());
        assert!(o.regularization.is_some());
    }

    #[test]
    fn no_weight_decay_in_stq_mode() {
        let cfg = TrainConfig::default();
        assert!(!cfg.decays(QuantMode::Stq));
        assert!(!cfg.decays(QuantMode::Fp));
        for mode in [QuantMode::Bc, QuantMode::Bwn, QuantMode::Twn] {
            assert!(cfg.decays(mode));
        }
    }

    #[test]
    fn identical_seed_gives_identical_report() {
        let train_set = dataio::synthetic_clusters(120, 6, 3, 0.5, 1, dataio::Split::Train).unwrap();
        let val_set = dataio::synthetic_clusters(40, 6, 3, 0.5, 1, dataio::Split::Test).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut m: Model<f32> = init_model(&tiny_spec(), &cfg).unwrap();
            let r = train(&mut m, &train_set, &val_set, &cfg, |_| {}).unwrap();
            (m, r)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        for b in m1.betas() {
            assert!((BETA_MIN..=BETA_MAX).contains(&b));
        }
        let other = TrainConfig { seed: 6, ..cfg.clone() };
        let mut m3: Model<f32> = init_model(&tiny_spec(), &other).unwrap();
        train(&mut m3, &train_set, &val_set, &other, |_| {}).unwrap();
        assert_ne!(m1, m3);
    }
}
