//! Weight histograms, per-layer summaries and their text renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{QuantLayerState, QuantMode};
use crate::quant::Depth;
use crate::tensor::Element;

/// Histograms bin latent weights divided by their filter's scale over
/// `[-HIST_RANGE, HIST_RANGE]`; values outside land in the edge bins.
pub const HIST_BINS: usize = 100;
pub const HIST_RANGE: f64 = 2.5;
/// Half-width (in units of the scale) of the windows around the quantization
/// levels used by [`mass_concentration`].
pub const CONCENTRATION_WINDOW: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(hi > lo) || bins == 0 {
            return Err(Error::invalid(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
        }
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for v in values {
            let b = ((v - lo) / width).floor();
            let idx = if b.is_nan() { 0 } else { b.clamp(0.0, (bins - 1) as f64) as usize };
            counts[idx] += 1;
        }
        Ok(Histogram { lo, hi, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * i as f64, self.lo + w * (i + 1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (l, r) = self.edges(i);
            let _ = writeln!(s, "{l:.4},{r:.4},{c}");
        }
        s
    }

    /// Indices of bins strictly larger than both neighbours (or the single
    /// neighbour at an edge), ignoring empty bins.
    pub fn local_maxima(&self) -> Vec<usize> {
        let c = &self.counts;
        (0..c.len())
            .filter(|&i| {
                c[i] > 0 && (i == 0 || c[i] > c[i - 1]) && (i + 1 == c.len() || c[i] > c[i + 1])
            })
            .collect()
    }
}

/// Scale used to normalize each filter: the training scale for quantized
/// modes, the mean magnitude for full-precision layers.
fn filter_scales<T: Element>(state: &QuantLayerState<T>) -> Result<Vec<f64>> {
    let k = state.filters();
    Ok(match state.mode {
        QuantMode::Fp => {
            let per = state.weight.len() / k;
            state
                .weight
                .data()
                .chunks(per)
                .map(|f| (f.iter().map(|v| v.as_f64().abs()).sum::<f64>() / per as f64).max(1e-12))
                .collect()
        }
        _ => state.effective_scales()?.iter().map(|v| v.as_f64()).collect(),
    })
}

fn normalized<T: Element>(state: &QuantLayerState<T>) -> Result<Vec<f64>> {
    let scales = filter_scales(state)?;
    let per = state.weight.len() / scales.len();
    Ok(state
        .weight
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v.as_f64() / scales[i / per])
        .collect())
}

pub fn weight_histogram<T: Element>(state: &QuantLayerState<T>) -> Result<Histogram> {
    Histogram::new(normalized(state)?, -HIST_RANGE, HIST_RANGE, HIST_BINS)
}

/// Fraction of latent weights within `CONCENTRATION_WINDOW * mu` of the
/// quantization levels of `depth` (`{-mu, 0, +mu}` or `{-mu, +mu}`).
pub fn mass_concentration<T: Element>(state: &QuantLayerState<T>, depth: Depth) -> Result<f64> {
    let v = normalized(state)?;
    let near = |x: f64| match depth {
        Depth::Binary => (x.abs() - 1.0).abs() <= CONCENTRATION_WINDOW,
        _ => (x.abs() - 1.0).abs() <= CONCENTRATION_WINDOW || x.abs() <= CONCENTRATION_WINDOW,
    };
    Ok(v.iter().filter(|&&x| near(x)).count() as f64 / v.len() as f64)
}

/// Fraction of zero codes under the layer's training-time quantizer.
pub fn zero_fraction<T: Element>(state: &QuantLayerState<T>) -> Result<f64> {
    Ok(match state.training_quantizer()? {
        Some(q) => q.codes(&state.weight)?.zero_fraction(),
        None => 0.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    /// Position among the weight layers.
    pub index: usize,
    pub kind: String,
    pub mode: QuantMode,
    pub weights: usize,
    pub beta: f64,
    pub depth: u32,
    pub mu_mean: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub zero_fraction: f64,
    pub mass_concentration: f64,
}

pub fn summarize_layer<T: Element>(
    index: usize,
    kind: &str,
    state: &QuantLayerState<T>,
    depth: Depth,
) -> Result<LayerSummary> {
    let mu = filter_scales(state)?;
    Ok(LayerSummary {
        index,
        kind: kind.to_string(),
        mode: state.mode,
        weights: state.weight.len(),
        beta: state.beta_value(),
        depth: depth.bits(),
        mu_mean: mu.iter().sum::<f64>() / mu.len() as f64,
        mu_min: mu.iter().copied().fold(f64::INFINITY, f64::min),
        mu_max: mu.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        zero_fraction: zero_fraction(state)?,
        mass_concentration: mass_concentration(state, depth)?,
    })
}

pub fn summary_table(rows: &[LayerSummary]) -> String {
    let mut s = format!(
        "{:>5} {:<7} {:<4} {:>8} {:>7} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
        "layer", "kind", "mode", "weights", "beta", "bits", "mu_mean", "mu_min", "mu_max", "zero_frac", "mass"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>5} {:<7} {:<4} {:>8} {:>7.4} {:>5} {:>9.5} {:>9.5} {:>9.5} {:>9.4} {:>9.4}",
            r.index,
            r.kind,
            r.mode.as_str(),
            r.weights,
            r.beta,
            r.depth,
            r.mu_mean,
            r.mu_min,
            r.mu_max,
            r.zero_fraction,
            r.mass_concentration
        );
    }
    s
}

pub fn summary_csv(rows: &[LayerSummary]) -> String {
    let mut s = String::from("layer,kind,mode,weights,beta,bits,mu_mean,mu_min,mu_max,zero_fraction,mass_concentration\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.index,
            r.kind,
            r.mode.as_str(),
            r.weights,
            r.beta,
            r.depth,
            r.mu_mean,
            r.mu_min,
            r.mu_max,
            r.zero_fraction,
            r.mass_concentration
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::nn::ScaleScope;

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::new([-10.0, -2.5, 0.0, 0.01, 2.5, 99.0, f64::NAN], -2.5, 2.5, 10).unwrap();
        assert_eq!(h.total(), 7);
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.counts[9], 2);
        assert_eq!(h.edges(0), (-2.5, -2.0));
        assert!(h.to_csv().starts_with("bin_left,bin_right,count\n-2.5000,-2.0000,3\n"));
    }

    #[test]
    fn trimodal_layer_has_three_peaks() {
        let vals: Vec<f32> = (0..300)
            .map(|i| [-0.5f32, 0.0, 0.5][i % 3] + ((i * 7919) % 11) as f32 * 1e-3)
            .collect();
        let w = Tensor::new(vec![1, 300], vals).unwrap();
        let mut s = QuantLayerState::from_weights(w, QuantMode::Stq, ScaleScope::PerFilter, 1.0).unwrap();
        s.scales = Tensor::new(vec![1], vec![0.5]).unwrap();
        let h = weight_histogram(&s).unwrap();
        assert_eq!(h.local_maxima().len(), 3);
        assert!(mass_concentration(&s, Depth::Ternary).unwrap() > 0.99);
        assert!(mass_concentration(&s, Depth::Binary).unwrap() < 0.7);
    }
}
