//! Target-frequency estimation and per-expert sample weights.
//!
//! Expert `m` of `M` weights sample `n` by `(1 / f_n)^{p_m}` with
//! `p_m = m / (M - 1)`, where `f_n` is either the histogram count of the
//! sample's target bin or a Gaussian KDE evaluated at its target.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Frequencies below this are clamped before exponentiation.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Equal-width bins aligned to integer multiples of the width.
///
/// Bin `k` covers `[origin + k·Δ, origin + (k+1)·Δ)` and `origin` is the
/// largest multiple of `Δ` not above the smallest target, so two histograms
/// with the same width share bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramDensity {
    origin: f64,
    bin_width: f64,
    counts: Vec<usize>,
    assignments: Vec<usize>,
}

impl HistogramDensity {
    pub fn new(targets: &[f64], bin_width: f64) -> Result<Self> {
        check_targets(targets)?;
        if !(bin_width > 0.0 && bin_width.is_finite()) {
            return Err(Error::Input(format!(
                "bin width must be positive, got {bin_width}"
            )));
        }
        let min = targets.iter().copied().fold(f64::INFINITY, f64::min);
        let origin_index = (min / bin_width).floor();
        let origin = origin_index * bin_width;
        let assignments: Vec<usize> = targets
            .iter()
            .map(|&y| global_bin(y, bin_width) - origin_index as i64)
            .map(|k| k.max(0) as usize)
            .collect();
        let bins = assignments.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; bins];
        for &b in &assignments {
            counts[b] += 1;
        }
        Ok(Self {
            origin,
            bin_width,
            counts,
            assignments,
        })
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `b(n)` for every training sample.
    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    /// `B + 1` edges, `origin + k·Δ`.
    pub fn bin_edges(&self) -> Vec<f64> {
        (0..=self.counts.len())
            .map(|k| self.origin + k as f64 * self.bin_width)
            .collect()
    }

    /// Bin containing `y`, if it lies inside the histogram's range.
    pub fn bin_of(&self, y: f64) -> Option<usize> {
        let origin_index = (self.origin / self.bin_width).round() as i64;
        let k = global_bin(y, self.bin_width) - origin_index;
        (k >= 0 && (k as usize) < self.counts.len()).then_some(k as usize)
    }

    /// Training count of the bin holding `y`; zero outside the range.
    pub fn count_at(&self, y: f64) -> usize {
        self.bin_of(y).map_or(0, |b| self.counts[b])
    }

    /// `f_{b(n)}` for every training sample.
    pub fn sample_frequencies(&self) -> Vec<f64> {
        self.assignments
            .iter()
            .map(|&b| self.counts[b] as f64)
            .collect()
    }

    /// Largest count over smallest nonzero count.
    pub fn imbalance_factor(&self) -> f64 {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        let min = self
            .counts
            .iter()
            .copied()
            .filter(|&c| c > 0)
            .min()
            .unwrap_or(1);
        max as f64 / min as f64
    }
}

/// Index of the width-aligned bin `⌊y / Δ⌋` containing `y`.
pub fn global_bin(y: f64, bin_width: f64) -> i64 {
    (y / bin_width).floor() as i64
}

/// Gaussian kernel density estimate over the training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeDensity {
    support: Vec<f64>,
    bandwidth: f64,
}

impl KdeDensity {
    pub fn new(targets: &[f64], bandwidth: f64) -> Result<Self> {
        check_targets(targets)?;
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Input(format!(
                "KDE bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self {
            support: targets.to_vec(),
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `f̂(q) = 1/(N h) · Σ_n K((q − x_n) / h)` with the standard normal `K`.
    pub fn eval(&self, query: f64) -> f64 {
        let h = self.bandwidth;
        let sum: f64 = self
            .support
            .iter()
            .map(|&x| {
                let u = (query - x) / h;
                (-0.5 * u * u).exp()
            })
            .sum();
        sum / ((2.0 * PI).sqrt() * self.support.len() as f64 * h)
    }

    /// `f̂(y_n)` for every support point.
    pub fn sample_densities(&self) -> Vec<f64> {
        self.support.iter().map(|&y| self.eval(y)).collect()
    }
}

/// One-shot KDE evaluation at `query`.
pub fn kde_density(targets: &[f64], bandwidth: f64, query: f64) -> Result<f64> {
    Ok(KdeDensity::new(targets, bandwidth)?.eval(query))
}

/// How training-target frequencies are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityMethod {
    Histogram { bin_width: f64 },
    Kde { bandwidth: f64 },
}

impl Default for DensityMethod {
    fn default() -> Self {
        DensityMethod::Kde { bandwidth: 2.0 }
    }
}

impl DensityMethod {
    /// Per-sample frequency `f_n` under this estimator.
    pub fn sample_frequencies(&self, targets: &[f64]) -> Result<Vec<f64>> {
        match *self {
            DensityMethod::Histogram { bin_width } => {
                Ok(HistogramDensity::new(targets, bin_width)?.sample_frequencies())
            }
            DensityMethod::Kde { bandwidth } => {
                Ok(KdeDensity::new(targets, bandwidth)?.sample_densities())
            }
        }
    }
}

/// Per-sample, per-expert loss weights `w[n][m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    weights: Matrix,
    powers: Vec<f64>,
}

impl WeightTable {
    /// Uniform weights for `n` samples and `experts` experts.
    pub fn uniform(n: usize, experts: usize) -> Self {
        Self {
            weights: Matrix::from_vec(n, experts, vec![1.0; n * experts]).expect("ones are finite"),
            powers: vec![0.0; experts],
        }
    }

    pub fn num_samples(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.weights.cols()
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn get(&self, sample: usize, expert: usize) -> f64 {
        self.weights.get(sample, expert)
    }

    pub fn column(&self, expert: usize) -> Vec<f64> {
        self.weights.col(expert)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.weights
    }

    /// Rescales every column to mean 1, keeping relative weights.
    pub fn normalized(&self) -> Self {
        let n = self.weights.rows();
        let mut w = self.weights.clone();
        for m in 0..w.cols() {
            let mean = (0..n).map(|r| w.get(r, m)).sum::<f64>() / n as f64;
            for r in 0..n {
                w.set(r, m, w.get(r, m) / mean);
            }
        }
        Self {
            weights: w,
            powers: self.powers.clone(),
        }
    }
}

/// Powers `p_m = m / (M − 1)`; a single expert gets `p = 0`.
pub fn expert_powers(experts: usize) -> Vec<f64> {
    if experts <= 1 {
        return vec![0.0; experts];
    }
    (0..experts)
        .map(|m| m as f64 / (experts - 1) as f64)
        .collect()
}

/// `w[n][m] = (1 / f_n)^{p_m}`.
pub fn expert_weights(frequencies: &[f64], experts: usize) -> Result<WeightTable> {
    if experts == 0 {
        return Err(Error::Input("at least one expert is required".into()));
    }
    if frequencies.is_empty() {
        return Err(Error::Input("no sample frequencies".into()));
    }
    if let Some((n, f)) = frequencies
        .iter()
        .enumerate()
        .find(|(_, f)| !(**f > 0.0 && f.is_finite()))
    {
        return Err(Error::Input(format!(
            "sample {n} has non-positive frequency {f}"
        )));
    }
    let powers = expert_powers(experts);
    let mut data = Vec::with_capacity(frequencies.len() * experts);
    for &f in frequencies {
        let inv = 1.0 / f.max(DENSITY_FLOOR);
        data.extend(
            powers
                .iter()
                .map(|&p| if p == 0.0 { 1.0 } else { inv.powf(p) }),
        );
    }
    Ok(WeightTable {
        weights: Matrix::from_vec(frequencies.len(), experts, data)?,
        powers,
    })
}

fn check_targets(targets: &[f64]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Input("targets are empty".into()));
    }
    if let Some(n) = targets.iter().position(|y| !y.is_finite()) {
        return Err(Error::Input(format!("target {n} is not finite")));
    }
    Ok(())
}
