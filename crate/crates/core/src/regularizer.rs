//! Quantization regularizers and their closed-form subgradients.
//!
//! `reg_r1` pulls weights toward `{-mu, +mu}`, `reg_r2` toward `{-mu, 0, +mu}`.
//! `reg_stq` interpolates between the two through a per-layer angle `beta`:
//!
//! ```text
//! R(w, mu, beta) = min(| |w| - mu |, tan(beta) |w|)
//! ```
//!
//! At `beta = pi/4` it equals `reg_r2`; as `beta -> pi/2` the slope arm only
//! matters in a vanishing neighbourhood of zero and `R` equals `reg_r1`. A
//! layer additionally pays `gamma * cot(beta)`, which pushes `beta` up toward
//! the binary end.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Default lower clamp for `beta`.
pub const BETA_MIN: f64 = FRAC_PI_4 + 1e-3;
/// Default upper clamp for `beta`.
pub const BETA_MAX: f64 = FRAC_PI_2 - 1e-3;
/// Initial `beta`, halfway between the ternary and binary ends.
pub const BETA_INIT: f64 = 3.0 * std::f64::consts::PI / 8.0;
/// Lower bound applied to every scale after an update.
pub const MU_FLOOR: f64 = 1e-6;

/// Which arm of the `min` is used when both are equal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiePolicy {
    /// `| |w| - mu |`
    #[default]
    Distance,
    /// `tan(beta) |w|`
    Slope,
}

/// How often the `gamma * cot(beta)` prior is counted per layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorScope {
    /// Once per filter (output channel / output unit).
    PerFilter,
    /// Once per layer.
    PerLayer,
    /// Once per weight, as when the single-weight penalty including the
    /// prior is summed over a filter's elements.
    #[default]
    PerWeight,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    /// Global regularization strength; layer `l` uses `lambda / #W_l`.
    pub lambda: f64,
    /// Strength of the binary-preferring prior.
    pub gamma: f64,
    /// Final depth cut: layers with `beta >= delta` are stored in 1 bit.
    pub delta: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub tie_policy: TiePolicy,
    pub prior_scope: PriorScope,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda: 0.1,
            gamma: 1e-2,
            delta: 1.55,
            beta_min: BETA_MIN,
            beta_max: BETA_MAX,
            tie_policy: TiePolicy::Distance,
            prior_scope: PriorScope::PerWeight,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(FRAC_PI_4 < self.beta_min && self.beta_min < self.beta_max && self.beta_max < FRAC_PI_2)
        {
            return Err(Error::invalid(format!(
                "beta bounds must satisfy pi/4 < beta_min < beta_max < pi/2, got [{}, {}]",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.beta_min < self.delta && self.delta <= self.beta_max) {
            return Err(Error::invalid(format!(
                "delta must lie in (beta_min, beta_max], got {}",
                self.delta
            )));
        }
        Ok(())
    }

    pub fn clamp_beta(&self, beta: f64) -> f64 {
        beta.clamp(self.beta_min, self.beta_max)
    }
}

fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(FRAC_PI_4..FRAC_PI_2).contains(&beta) {
        return Err(Error::invalid(format!(
            "beta must lie in [pi/4, pi/2), got {beta}"
        )));
    }
    Ok(())
}

/// `| |w| - mu |`
pub fn reg_r1(w: f64, mu: f64) -> f64 {
    (w.abs() - mu).abs()
}

/// `| | |w| - mu/2 | - mu/2 |`
pub fn reg_r2(w: f64, mu: f64) -> f64 {
    ((w.abs() - mu / 2.0).abs() - mu / 2.0).abs()
}

/// `min(| |w| - mu |, tan(beta) |w|)` for `beta` in `[pi/4, pi/2)`.
pub fn reg_stq(w: f64, mu: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok(reg_r1(w, mu).min(beta.tan() * w.abs()))
}

/// The branch of the `min` in [`reg_stq`] that is active at a point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Distance,
    Slope,
}

pub fn active_arm(w: f64, mu: f64, beta: f64, tie: TiePolicy) -> Arm {
    let a = reg_r1(w, mu);
    let b = beta.tan() * w.abs();
    if a < b {
        Arm::Distance
    } else if b < a {
        Arm::Slope
    } else {
        match tie {
            TiePolicy::Distance => Arm::Distance,
            TiePolicy::Slope => Arm::Slope,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegGrad {
    pub dw: f64,
    pub dmu: f64,
    pub dbeta: f64,
}

/// Subgradient of `reg_stq(w, mu, beta) + gamma * cot(beta)`.
pub fn reg_stq_grad(w: f64, mu: f64, beta: f64, gamma: f64, tie: TiePolicy) -> Result<RegGrad> {
    check_beta(beta)?;
    let mut g = weight_grad(w, mu, beta, tie);
    g.dbeta += prior_dbeta(beta, gamma);
    Ok(g)
}

/// Gradient of the `min` term alone; `beta` must already be validated.
fn weight_grad(w: f64, mu: f64, beta: f64, tie: TiePolicy) -> RegGrad {
    match active_arm(w, mu, beta, tie) {
        Arm::Distance => {
            let s = sign(w.abs() - mu);
            RegGrad {
                dw: sign(w) * s,
                dmu: -s,
                dbeta: 0.0,
            }
        }
        Arm::Slope => {
            let t = beta.tan();
            RegGrad {
                dw: t * sign(w),
                dmu: 0.0,
                dbeta: (1.0 + t * t) * w.abs(),
            }
        }
    }
}

/// `d/dbeta (gamma cot beta) = -gamma csc^2 beta`
fn prior_dbeta(beta: f64, gamma: f64) -> f64 {
    let s = beta.sin();
    -gamma / (s * s)
}

/// Number of filters (leading axis) of a filter-major weight tensor.
fn filters_of(shape: &[usize]) -> usize {
    shape.first().copied().unwrap_or(1)
}

fn check_layer<T: Element>(w: &Tensor<T>, scales: &[T]) -> Result<(usize, usize)> {
    let k = filters_of(w.shape());
    if scales.len() != k && scales.len() != 1 {
        return Err(Error::shape(
            "reg_layer",
            format!("{} scales for {k} filters of {:?}", scales.len(), w.shape()),
        ));
    }
    Ok((k, w.len() / k))
}

fn prior_count(cfg: &RegularizerConfig, filters: usize, weights: usize) -> f64 {
    match cfg.prior_scope {
        PriorScope::PerFilter => filters as f64,
        PriorScope::PerLayer => 1.0,
        PriorScope::PerWeight => weights as f64,
    }
}

/// Layer penalty `lambda/#W * sum_k [sum_ij R(w_kij, mu_k, beta) + gamma cot beta]`.
///
/// `scales` holds one entry per filter, or a single entry shared by all of them.
pub fn reg_layer<T: Element>(
    w: &Tensor<T>,
    scales: &[T],
    beta: f64,
    cfg: &RegularizerConfig,
) -> Result<f64> {
    check_beta(beta)?;
    let (k, per) = check_layer(w, scales)?;
    let tan = beta.tan();
    let mut total = 0.0;
    for (i, &v) in w.data().iter().enumerate() {
        let mu = scales[if scales.len() == 1 { 0 } else { i / per }].as_f64();
        let x = v.as_f64();
        total += reg_r1(x, mu).min(tan * x.abs());
    }
    total += prior_count(cfg, k, w.len()) * cfg.gamma / beta.tan();
    Ok(cfg.lambda / w.len() as f64 * total)
}

#[derive(Clone, Debug)]
pub struct LayerRegGrad<T> {
    pub value: f64,
    pub dw: Tensor<T>,
    pub dscales: Vec<T>,
    pub dbeta: f64,
}

/// Value and subgradients of [`reg_layer`].
pub fn reg_layer_grad<T: Element>(
    w: &Tensor<T>,
    scales: &[T],
    beta: f64,
    cfg: &RegularizerConfig,
) -> Result<LayerRegGrad<T>> {
    check_beta(beta)?;
    let (k, per) = check_layer(w, scales)?;
    let lam = cfg.lambda / w.len() as f64;
    let tan = beta.tan();
    let mut value = 0.0;
    let mut dw = Vec::with_capacity(w.len());
    let mut dscales = vec![0.0f64; scales.len()];
    let mut dbeta = 0.0;
    for (i, &v) in w.data().iter().enumerate() {
        let s = if scales.len() == 1 { 0 } else { i / per };
        let mu = scales[s].as_f64();
        let x = v.as_f64();
        value += reg_r1(x, mu).min(tan * x.abs());
        let g = weight_grad(x, mu, beta, cfg.tie_policy);
        dw.push(T::lit(lam * g.dw));
        dscales[s] += g.dmu;
        dbeta += g.dbeta;
    }
    let p = prior_count(cfg, k, w.len());
    value += p * cfg.gamma / tan;
    dbeta += p * prior_dbeta(beta, cfg.gamma);
    Ok(LayerRegGrad {
        value: lam * value,
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        dscales: dscales.into_iter().map(|d| T::lit(lam * d)).collect(),
        dbeta: lam * dbeta,
    })
}

/// Records [`reg_layer`] on the tape with its analytic subgradients as the
/// backward rule. `mu` has shape `[K]` or `[1]`, `beta` has shape `[1]`.
pub fn reg_layer_on_tape<T: Element>(
    tape: &mut Tape<T>,
    w: Var,
    mu: Var,
    beta: Var,
    cfg: &RegularizerConfig,
) -> Result<Var> {
    if tape.value(beta).len() != 1 {
        return Err(Error::shape(
            "reg_layer",
            format!("beta must hold one element, got {:?}", tape.shape(beta)),
        ));
    }
    let cfg = *cfg;
    tape.custom(
        &[w, mu, beta],
        move |xs| {
            let v = reg_layer(xs[0], xs[1].data(), xs[2].item().as_f64(), &cfg)?;
            Ok(Tensor::scalar(T::lit(v)))
        },
        move |ctx| {
            let up = ctx.upstream.item();
            let beta_shape = ctx.inputs[2].shape().to_vec();
            // Inputs were validated by the forward pass.
            let g = reg_layer_grad(
                ctx.inputs[0],
                ctx.inputs[1].data(),
                ctx.inputs[2].item().as_f64(),
                &cfg,
            )
            .expect("validated in forward");
            vec![
                g.dw.map(|d| d * up),
                Tensor::from_parts(
                    ctx.inputs[1].shape().to_vec(),
                    g.dscales.iter().map(|&d| d * up).collect(),
                ),
                Tensor::from_parts(beta_shape, vec![T::lit(g.dbeta) * up]),
            ]
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn r1_r2_examples() {
        assert_eq!(reg_r1(1.0, 1.0), 0.0);
        assert_eq!(reg_r1(0.0, 1.0), 1.0);
        assert_eq!(reg_r1(0.5, 1.0), 0.5);
        assert_eq!(reg_r2(0.0, 1.0), 0.0);
        assert_eq!(reg_r2(1.0, 1.0), 0.0);
        assert_eq!(reg_r2(-1.0, 1.0), 0.0);
        assert_eq!(reg_r2(0.5, 1.0), 0.5);
        assert_eq!(reg_r2(2.0, 1.0), 1.0);
    }

    #[test]
    fn stq_examples() {
        assert!((reg_stq(0.5, 1.0, PI / 4.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(reg_stq(0.0, 0.7, 1.2).unwrap(), 0.0);
        let beta = 2.0f64.atan();
        assert!((reg_stq(0.1, 1.0, beta).unwrap() - 0.2).abs() < 1e-15);
        assert!(reg_stq(0.1, 1.0, PI / 2.0).is_err());
        assert!(reg_stq(0.1, 1.0, 0.5).is_err());
    }

    #[test]
    fn grad_examples() {
        let beta = 2.0f64.atan();
        let g = reg_stq_grad(0.1, 1.0, beta, 0.0, TiePolicy::Distance).unwrap();
        assert!((g.dw - 2.0).abs() < 1e-12);
        assert_eq!(g.dmu, 0.0);
        assert!((g.dbeta - 0.5).abs() < 1e-12);

        let g = reg_stq_grad(0.9, 1.0, PI / 2.0 - 1e-3, 0.0, TiePolicy::Distance).unwrap();
        assert_eq!((g.dw, g.dmu, g.dbeta), (-1.0, 1.0, 0.0));

        let g0 = reg_stq_grad(0.9, 1.0, PI / 3.0, 0.0, TiePolicy::Distance).unwrap();
        let g1 = reg_stq_grad(0.9, 1.0, PI / 3.0, 0.3, TiePolicy::Distance).unwrap();
        assert!((g1.dbeta - g0.dbeta + 0.4).abs() < 1e-12);
    }

    #[test]
    fn tie_policy_selects_arm() {
        // w = 0, mu = 0: both arms are exactly 0.
        assert_eq!(active_arm(0.0, 0.0, 1.0, TiePolicy::Distance), Arm::Distance);
        assert_eq!(active_arm(0.0, 0.0, 1.0, TiePolicy::Slope), Arm::Slope);
        assert_eq!(active_arm(0.01, 1.0, 1.0, TiePolicy::Distance), Arm::Slope);
        assert_eq!(active_arm(0.9, 1.0, 1.0, TiePolicy::Slope), Arm::Distance);
    }

    #[test]
    fn layer_examples() {
        let cfg0 = RegularizerConfig {
            gamma: 0.0,
            ..Default::default()
        };
        let w = Tensor::new(vec![2, 2], vec![0.5f64, -0.5, 0.25, -0.25]).unwrap();
        assert_eq!(reg_layer(&w, &[0.5, 0.25], BETA_MAX, &cfg0).unwrap(), 0.0);

        let single = Tensor::new(vec![1, 1], vec![0.5f64]).unwrap();
        let cfg = RegularizerConfig {
            lambda: 1.0,
            gamma: 0.0,
            ..Default::default()
        };
        assert!((reg_layer(&single, &[1.0], PI / 4.0, &cfg).unwrap() - 0.5).abs() < 1e-15);

        let zeros = Tensor::<f64>::zeros(&[2, 3]);
        let cfg = RegularizerConfig {
            lambda: 0.6,
            gamma: 0.1,
            prior_scope: PriorScope::PerFilter,
            ..Default::default()
        };
        let lam_l = 0.6 / 6.0;
        let v = reg_layer(&zeros, &[1.0, 1.0], PI / 4.0, &cfg).unwrap();
        assert!((v - lam_l * 0.2).abs() < 1e-15);
        let per_layer = RegularizerConfig {
            prior_scope: PriorScope::PerLayer,
            ..cfg
        };
        let v = reg_layer(&zeros, &[1.0, 1.0], PI / 4.0, &per_layer).unwrap();
        assert!((v - lam_l * 0.1).abs() < 1e-15);
        let per_weight = RegularizerConfig {
            prior_scope: PriorScope::PerWeight,
            ..cfg
        };
        let v = reg_layer(&zeros, &[1.0, 1.0], PI / 4.0, &per_weight).unwrap();
        assert!((v - lam_l * 0.6).abs() < 1e-15);
        assert!(reg_layer(&zeros, &[1.0, 1.0, 1.0], PI / 4.0, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RegularizerConfig::default().validate().is_ok());
        let bad = RegularizerConfig {
            delta: 1.6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RegularizerConfig {
            beta_min: PI / 4.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RegularizerConfig {
            gamma: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tape_node_uses_analytic_gradient() {
        let cfg = RegularizerConfig {
            lambda: 2.0,
            gamma: 0.05,
            ..Default::default()
        };
        let w = Tensor::new(vec![2, 2], vec![0.3f64, -0.05, 0.9, 0.02]).unwrap();
        let mu = Tensor::new(vec![2], vec![0.4f64, 0.8]).unwrap();
        let beta = 1.1;
        let mut tape = Tape::<f64>::new();
        let (wv, mv) = (tape.param(w.clone()), tape.param(mu.clone()));
        let bv = tape.param(Tensor::new(vec![1], vec![beta]).unwrap());
        let r = reg_layer_on_tape(&mut tape, wv, mv, bv, &cfg).unwrap();
        let g = tape.backward(r).unwrap();
        let expect = reg_layer_grad(&w, mu.data(), beta, &cfg).unwrap();
        assert_eq!(tape.value(r).item(), expect.value);
        assert_eq!(g.get(wv).unwrap(), &expect.dw);
        assert_eq!(g.get(mv).unwrap().data(), &expect.dscales[..]);
        assert_eq!(g.get(bv).unwrap().item(), expect.dbeta);
    }
}
