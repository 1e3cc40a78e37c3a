//! Expert aggregation, shot regions and regression metrics.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::density::global_bin;
use crate::error::{Error, Result};
use crate::model::{ExpertOutput, UvoteModel};

/// Training-bin count above which a bin is many-shot.
pub const MANY_SHOT_ABOVE: usize = 100;
/// Training-bin count below which a bin is few-shot.
pub const FEW_SHOT_BELOW: usize = 20;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Per sample, the expert with the smallest predicted log-scale.
    #[default]
    MinUncertainty,
    Average,
    /// Per sample, the expert closest to the true target. Needs targets.
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::MinUncertainty,
        Strategy::Average,
        Strategy::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::MinUncertainty => "min_uncertainty",
            Strategy::Average => "average",
            Strategy::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fused prediction for each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedPrediction {
    pub y_hat: Vec<f64>,
    pub s_hat: Vec<f64>,
    /// Selected expert per sample; `None` for averaging.
    pub chosen: Option<Vec<usize>>,
    pub strategy: Strategy,
}

/// Index of the first minimum of `values`.
fn argmin_by(len: usize, mut key: impl FnMut(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_v = key(0);
    for m in 1..len {
        let v = key(m);
        if v < best_v {
            best = m;
            best_v = v;
        }
    }
    best
}

/// Combines expert outputs with `strategy`. Ties go to the lowest expert index.
///
/// Averaging fuses scales as `ln(mean(exp(ŝ)))`, evaluated in a shifted form so
/// that a single expert is returned unchanged.
pub fn aggregate(
    outputs: &ExpertOutput,
    strategy: Strategy,
    targets: Option<&[f64]>,
) -> Result<AggregatedPrediction> {
    let n = outputs.num_samples();
    let m_count = outputs.num_experts();
    if m_count == 0 {
        return Err(Error::Input("no experts to aggregate".into()));
    }
    match (strategy, targets) {
        (Strategy::Oracle, None) => {
            return Err(Error::Usage("oracle aggregation requires targets".into()))
        }
        (Strategy::Oracle, Some(t)) if t.len() != n => {
            return Err(Error::shape(
                None,
                format!("{} targets for {n} predictions", t.len()),
            ))
        }
        (Strategy::MinUncertainty | Strategy::Average, Some(_)) => {
            return Err(Error::Usage(format!(
                "{strategy} aggregation does not take targets"
            )))
        }
        _ => {}
    }

    let y = &outputs.y_hat;
    let s = &outputs.s_hat;
    let mut y_hat = Vec::with_capacity(n);
    let mut s_hat = Vec::with_capacity(n);
    let chosen = match strategy {
        Strategy::Average => {
            for i in 0..n {
                let yr = y.row(i);
                let sr = s.row(i);
                y_hat.push(yr.iter().sum::<f64>() / m_count as f64);
                let top = sr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mean = sr.iter().map(|v| (v - top).exp()).sum::<f64>() / m_count as f64;
                s_hat.push(top + mean.ln());
            }
            None
        }
        Strategy::MinUncertainty | Strategy::Oracle => {
            let mut picks = Vec::with_capacity(n);
            for i in 0..n {
                let yr = y.row(i);
                let sr = s.row(i);
                let m = match (strategy, targets) {
                    (Strategy::Oracle, Some(t)) => argmin_by(m_count, |m| (t[i] - yr[m]).abs()),
                    _ => argmin_by(m_count, |m| sr[m]),
                };
                picks.push(m);
                y_hat.push(yr[m]);
                s_hat.push(sr[m]);
            }
            Some(picks)
        }
    };
    Ok(AggregatedPrediction {
        y_hat,
        s_hat,
        chosen,
        strategy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    All,
    Many,
    Medium,
    Few,
}

impl Region {
    pub const SHOTS: [Region; 3] = [Region::Many, Region::Medium, Region::Few];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::All => "all",
            Region::Many => "many",
            Region::Medium => "medium",
            Region::Few => "few",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shot region for a bin holding `count` training samples.
pub fn classify(count: usize) -> Region {
    if count > MANY_SHOT_ABOVE {
        Region::Many
    } else if count < FEW_SHOT_BELOW {
        Region::Few
    } else {
        Region::Medium
    }
}

/// Region label for every evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotPartition {
    pub labels: Vec<Region>,
    /// Training count of each evaluation sample's bin.
    pub train_counts: Vec<usize>,
    pub bin_width: f64,
    pub many_above: usize,
    pub few_below: usize,
}

impl ShotPartition {
    pub fn indices(&self, region: Region) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| region == Region::All || self.labels[i] == region)
            .collect()
    }

    pub fn count(&self, region: Region) -> usize {
        match region {
            Region::All => self.labels.len(),
            r => self.labels.iter().filter(|&&l| l == r).count(),
        }
    }
}

fn check_width(bin_width: f64) -> Result<()> {
    if bin_width > 0.0 && bin_width.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "bin width must be positive, got {bin_width}"
        )))
    }
}

fn bin_counts(targets: &[f64], bin_width: f64) -> BTreeMap<i64, usize> {
    let mut counts = BTreeMap::new();
    for &y in targets {
        *counts.entry(global_bin(y, bin_width)).or_insert(0) += 1;
    }
    counts
}

/// Labels `test_targets` by the training count of their bin. Bins are
/// `[k·w, (k+1)·w)`, so they line up with the histogram density.
pub fn shot_partition(
    train_targets: &[f64],
    test_targets: &[f64],
    bin_width: f64,
) -> Result<ShotPartition> {
    check_width(bin_width)?;
    if train_targets.is_empty() || test_targets.is_empty() {
        return Err(Error::Input(
            "shot partition needs non-empty train and test targets".into(),
        ));
    }
    if train_targets
        .iter()
        .chain(test_targets)
        .any(|y| !y.is_finite())
    {
        return Err(Error::Input("targets must be finite".into()));
    }
    let counts = bin_counts(train_targets, bin_width);
    let train_counts: Vec<usize> = test_targets
        .iter()
        .map(|&y| counts.get(&global_bin(y, bin_width)).copied().unwrap_or(0))
        .collect();
    Ok(ShotPartition {
        labels: train_counts.iter().map(|&c| classify(c)).collect(),
        train_counts,
        bin_width,
        many_above: MANY_SHOT_ABOVE,
        few_below: FEW_SHOT_BELOW,
    })
}

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Input("metric over an empty sample".into()));
    }
    if y.len() != y_hat.len() {
        return Err(Error::shape(
            None,
            format!("{} targets vs {} predictions", y.len(), y_hat.len()),
        ));
    }
    Ok(())
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let mse = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len() as f64;
    Ok(mse.sqrt())
}

/// Pearson correlation times 100.
pub fn pearson_pct(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mp = y_hat.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(y_hat) {
        let (da, db) = (a - my, b - mp);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedCorrelation(format!(
            "zero variance in {}",
            if sxx <= 0.0 { "targets" } else { "predictions" }
        )));
    }
    Ok((100.0 * sxy / (sxx.sqrt() * syy.sqrt())).clamp(-100.0, 100.0))
}

/// How a Laplace log-scale `ŝ` turns into the spread compared against MAE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConversion {
    /// Standard deviation `√2·exp(ŝ)`.
    #[default]
    StdDev,
    /// The scale `exp(ŝ)` itself, i.e. the mean absolute deviation.
    Scale,
}

impl ScaleConversion {
    #[inline]
    pub fn spread(self, s_hat: f64) -> f64 {
        match self {
            ScaleConversion::StdDev => std::f64::consts::SQRT_2 * s_hat.exp(),
            ScaleConversion::Scale => s_hat.exp(),
        }
    }
}

/// Uncertainty calibration error: bin-weighted `|MAE(b) − mean spread(b)|`,
/// with bins of `bin_width` over the true targets.
pub fn uce(
    y: &[f64],
    y_hat: &[f64],
    s_hat: &[f64],
    bin_width: f64,
    conversion: ScaleConversion,
) -> Result<f64> {
    check_pair(y, y_hat)?;
    check_pair(y, s_hat)?;
    check_width(bin_width)?;
    let mut bins: BTreeMap<i64, (usize, f64, f64)> = BTreeMap::new();
    for i in 0..y.len() {
        let e = bins
            .entry(global_bin(y[i], bin_width))
            .or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += (y[i] - y_hat[i]).abs();
        e.2 += conversion.spread(s_hat[i]);
    }
    let n = y.len() as f64;
    Ok(bins
        .values()
        .map(|&(c, err, spread)| {
            let c = c as f64;
            (c / n) * (err / c - spread / c).abs()
        })
        .sum())
}

/// Metrics for one region. Everything but `count` is `None` when the region is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub count: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub pearson: Option<f64>,
    pub uce: Option<f64>,
}

impl RegionMetrics {
    fn empty() -> Self {
        Self {
            count: 0,
            mae: None,
            rmse: None,
            pearson: None,
            uce: None,
        }
    }
}

/// All/many/medium/few metrics for one aggregation strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: Strategy,
    pub all: RegionMetrics,
    pub many: RegionMetrics,
    pub medium: RegionMetrics,
    pub few: RegionMetrics,
}

pub const CSV_HEADER: &str = "strategy,region,count,mae,rmse,pearson,uce";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn region(&self, region: Region) -> &RegionMetrics {
        match region {
            Region::All => &self.all,
            Region::Many => &self.many,
            Region::Medium => &self.medium,
            Region::Few => &self.few,
        }
    }

    /// CSV lines (no header), one per region. Empty cells stand for null.
    pub fn csv_rows(&self) -> Vec<String> {
        [Region::All, Region::Many, Region::Medium, Region::Few]
            .into_iter()
            .map(|r| {
                let m = self.region(r);
                format!(
                    "{},{},{},{},{},{},{}",
                    self.strategy,
                    r,
                    m.count,
                    cell(m.mae),
                    cell(m.rmse),
                    cell(m.pearson),
                    cell(m.uce)
                )
            })
            .collect()
    }
}

/// CSV with [`CSV_HEADER`] and one row per region × report.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        for line in r.csv_rows() {
            let _ = writeln!(out, "{line}");
        }
    }
    out
}

/// Settings shared by every metric in a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Width of shot-region and UCE bins.
    pub bin_width: f64,
    pub conversion: ScaleConversion,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bin_width: 1.0,
            conversion: ScaleConversion::StdDev,
        }
    }
}

fn pick(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

/// Scores a fused prediction against `targets`.
///
/// A correlation that is undefined over all samples is an error; inside a
/// single shot region it is reported as null.
pub fn evaluate_predictions(
    targets: &[f64],
    prediction: &AggregatedPrediction,
    partition: &ShotPartition,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    check_pair(targets, &prediction.y_hat)?;
    if partition.labels.len() != targets.len() {
        return Err(Error::shape(
            None,
            format!(
                "partition covers {} samples, expected {}",
                partition.labels.len(),
                targets.len()
            ),
        ));
    }
    let region = |r: Region| -> Result<RegionMetrics> {
        let idx = partition.indices(r);
        if idx.is_empty() {
            return Ok(RegionMetrics::empty());
        }
        let y = pick(targets, &idx);
        let p = pick(&prediction.y_hat, &idx);
        let s = pick(&prediction.s_hat, &idx);
        let pearson = match pearson_pct(&y, &p) {
            Ok(v) => Some(v),
            Err(Error::UndefinedCorrelation(_)) if r != Region::All => None,
            Err(e) => return Err(e),
        };
        Ok(RegionMetrics {
            count: idx.len(),
            mae: Some(mae(&y, &p)?),
            rmse: Some(rmse(&y, &p)?),
            pearson,
            uce: Some(uce(&y, &p, &s, config.bin_width, config.conversion)?),
        })
    };
    Ok(MetricsReport {
        strategy: prediction.strategy,
        all: region(Region::All)?,
        many: region(Region::Many)?,
        medium: region(Region::Medium)?,
        few: region(Region::Few)?,
    })
}

/// Predicts `data`, aggregates with `strategy` and scores against its targets,
/// with shot regions taken from `train_targets`.
pub fn evaluate_model(
    model: &UvoteModel,
    train_targets: &[f64],
    data: &Dataset,
    strategy: Strategy,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let outputs = model.predict_all(&data.features)?;
    evaluate_outputs(&outputs, train_targets, &data.targets, strategy, config)
}

/// Like [`evaluate_model`] for precomputed expert outputs.
pub fn evaluate_outputs(
    outputs: &ExpertOutput,
    train_targets: &[f64],
    targets: &[f64],
    strategy: Strategy,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let partition = shot_partition(train_targets, targets, config.bin_width)?;
    let oracle_targets = (strategy == Strategy::Oracle).then_some(targets);
    let prediction = aggregate(outputs, strategy, oracle_targets)?;
    evaluate_predictions(targets, &prediction, &partition, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as Gen;

    fn outputs(y: &[Vec<f64>], s: &[Vec<f64>]) -> ExpertOutput {
        ExpertOutput::from_parts(Matrix::from_rows(y).unwrap(), Matrix::from_rows(s).unwrap())
            .unwrap()
    }

    #[test]
    fn min_uncertainty_picks_smaller_scale() {
        let o = outputs(&[vec![3.0, 5.0]], &[vec![0.2, 0.5]]);
        let a = aggregate(&o, Strategy::MinUncertainty, None).unwrap();
        assert_eq!(a.chosen, Some(vec![0]));
        assert_eq!(a.y_hat, vec![3.0]);
        assert_eq!(a.s_hat, vec![0.2]);
    }

    #[test]
    fn average_and_fused_scale() {
        let o = outputs(&[vec![3.0, 5.0]], &[vec![0.0, 2.0f64.ln()]]);
        let a = aggregate(&o, Strategy::Average, None).unwrap();
        assert_eq!(a.y_hat, vec![4.0]);
        assert!(a.chosen.is_none());
        assert!((a.s_hat[0] - 1.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn oracle_nearest_prediction() {
        let o = outputs(&[vec![3.0, 5.0]], &[vec![0.0, 0.0]]);
        let a = aggregate(&o, Strategy::Oracle, Some(&[4.9])).unwrap();
        assert_eq!(a.chosen, Some(vec![1]));
        assert_eq!(a.y_hat, vec![5.0]);
    }

    #[test]
    fn target_usage_rules() {
        let o = outputs(&[vec![1.0]], &[vec![0.0]]);
        assert!(matches!(
            aggregate(&o, Strategy::Oracle, None),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            aggregate(&o, Strategy::MinUncertainty, Some(&[1.0])),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            aggregate(&o, Strategy::Oracle, Some(&[1.0, 2.0])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let o = outputs(&[vec![1.0, 2.0, 3.0]], &[vec![0.5, 0.1, 0.1]]);
        let a = aggregate(&o, Strategy::MinUncertainty, None).unwrap();
        assert_eq!(a.chosen, Some(vec![1]));
        let a = aggregate(&o, Strategy::Oracle, Some(&[1.5])).unwrap();
        assert_eq!(a.chosen, Some(vec![0]));
    }

    #[test]
    fn single_expert_strategies_coincide() {
        let o = outputs(&[vec![1.25], vec![-3.5]], &[vec![0.3], vec![-14.0]]);
        let a = aggregate(&o, Strategy::MinUncertainty, None).unwrap();
        let b = aggregate(&o, Strategy::Average, None).unwrap();
        let c = aggregate(&o, Strategy::Oracle, Some(&[0.0, 0.0])).unwrap();
        for p in [&b, &c] {
            assert_eq!(a.y_hat, p.y_hat);
            assert_eq!(a.s_hat, p.s_hat);
        }
    }

    #[test]
    fn shot_labels_follow_training_counts() {
        let mut train = vec![0.5; 150];
        train.extend(vec![1.5; 50]);
        train.extend(vec![2.5; 10]);
        let p = shot_partition(&train, &[0.1, 1.9, 2.2, 7.0, -3.0], 1.0).unwrap();
        assert_eq!(
            p.labels,
            vec![
                Region::Many,
                Region::Medium,
                Region::Few,
                Region::Few,
                Region::Few
            ]
        );
        assert_eq!(p.train_counts, vec![150, 50, 10, 0, 0]);
        assert_eq!(p.count(Region::All), 5);
    }

    #[test]
    fn thresholds_at_boundaries() {
        assert_eq!(classify(101), Region::Many);
        assert_eq!(classify(100), Region::Medium);
        assert_eq!(classify(20), Region::Medium);
        assert_eq!(classify(19), Region::Few);
        assert_eq!(classify(0), Region::Few);
    }

    #[test]
    fn basic_metrics() {
        assert_eq!(mae(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(rmse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        let y = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert!((pearson_pct(&y, &y).unwrap() - 100.0).abs() < 1e-12);
        let neg: Vec<f64> = y.iter().map(|v| -3.0 * v + 1.0).collect();
        assert!((pearson_pct(&y, &neg).unwrap() + 100.0).abs() < 1e-12);
        assert!(matches!(
            pearson_pct(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(mae(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn uce_examples() {
        // One bin: errors 1 and 3 give MAE 2; spreads average 1.5.
        let s = (1.5 / std::f64::consts::SQRT_2).ln();
        let u = uce(
            &[0.2, 0.4],
            &[1.2, 3.4],
            &[s, s],
            1.0,
            ScaleConversion::StdDev,
        )
        .unwrap();
        assert!((u - 0.5).abs() < 1e-12);

        // Two equal bins with gaps 0.5 and 1.0.
        let y = [0.5, 1.5];
        let yh = [1.5, 3.5];
        let s = [0.5f64.ln(), 1.0f64.ln()];
        let u = uce(&y, &yh, &s, 1.0, ScaleConversion::Scale).unwrap();
        assert!((u - 0.75).abs() < 1e-12);

        assert!(uce(&[], &[], &[], 1.0, ScaleConversion::StdDev).is_err());
    }

    #[test]
    fn calibrated_model_has_zero_uce() {
        let y = [0.1, 0.7, 5.2, 5.9];
        let yh = [1.1, -0.3, 7.2, 3.9];
        let s = [1.0f64.ln(), 1.0f64.ln(), 2.0f64.ln(), 2.0f64.ln()];
        assert!(uce(&y, &yh, &s, 1.0, ScaleConversion::Scale).unwrap().abs() < 1e-15);
    }

    #[test]
    fn report_regions_sum_and_empty_region_is_null() {
        let train: Vec<f64> = (0..300).map(|i| if i < 200 { 0.5 } else { 3.5 }).collect();
        let test = vec![0.2, 0.8, 0.4, 3.1, 3.9, 3.3];
        let pred: Vec<f64> = test.iter().map(|v| v + 0.1).collect();
        let o = ExpertOutput::from_parts(
            Matrix::column(&pred).unwrap(),
            Matrix::column(&[0.0; 6]).unwrap(),
        )
        .unwrap();
        let r = evaluate_outputs(
            &o,
            &train,
            &test,
            Strategy::MinUncertainty,
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(r.all.count, r.many.count + r.medium.count + r.few.count);
        assert_eq!(r.few, RegionMetrics::empty());
        assert!((r.all.mae.unwrap() - 0.1).abs() < 1e-12);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["few"]["mae"].is_null());
        assert_eq!(json["few"]["count"], 0);
        let csv = reports_to_csv(&[r]);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv
            .lines()
            .last()
            .unwrap()
            .starts_with("min_uncertainty,few,0,,"));
    }

    #[test]
    fn constant_targets_surface_pearson_error() {
        let o = ExpertOutput::from_parts(
            Matrix::column(&[2.0; 4]).unwrap(),
            Matrix::column(&[0.0; 4]).unwrap(),
        )
        .unwrap();
        let err = evaluate_outputs(
            &o,
            &[2.0; 4],
            &[2.0; 4],
            Strategy::MinUncertainty,
            &EvalConfig::default(),
        );
        assert!(matches!(err, Err(Error::UndefinedCorrelation(_))));
    }

    fn rows(n: usize, m: usize) -> impl Gen<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, m), n)
    }

    proptest! {
        #[test]
        fn oracle_dominates_selection(
            (y_rows, s_rows, t) in (1usize..20, 1usize..5).prop_flat_map(|(n, m)| {
                (rows(n, m), rows(n, m), proptest::collection::vec(-50.0f64..50.0, n))
            })
        ) {
            let o = outputs(&y_rows, &s_rows);
            let orc = aggregate(&o, Strategy::Oracle, Some(&t)).unwrap();
            let mu = aggregate(&o, Strategy::MinUncertainty, None).unwrap();
            let mu_choice = mu.chosen.as_ref().unwrap();
            for i in 0..t.len() {
                prop_assert!((t[i] - orc.y_hat[i]).abs() <= (t[i] - mu.y_hat[i]).abs());
                let row_min = s_rows[i].iter().copied().fold(f64::INFINITY, f64::min);
                prop_assert_eq!(mu.s_hat[i], row_min);
                prop_assert_eq!(mu.y_hat[i], y_rows[i][mu_choice[i]]);
                for m in 0..s_rows[i].len() {
                    prop_assert!((t[i] - orc.y_hat[i]).abs() <= (t[i] - y_rows[i][m]).abs());
                }
            }
            prop_assert!(mae(&t, &orc.y_hat).unwrap() <= mae(&t, &mu.y_hat).unwrap());
        }

        #[test]
        fn metrics_scale_with_errors(
            y in proptest::collection::vec(-100.0f64..100.0, 1..40),
            e in proptest::collection::vec(-5.0f64..5.0, 40),
            c in 0.01f64..100.0,
        ) {
            let a: Vec<f64> = y.iter().zip(&e).map(|(y, e)| y + e).collect();
            let b: Vec<f64> = y.iter().zip(&e).map(|(y, e)| y + c * e).collect();
            let (m1, m2) = (mae(&y, &a).unwrap(), mae(&y, &b).unwrap());
            let (r1, r2) = (rmse(&y, &a).unwrap(), rmse(&y, &b).unwrap());
            prop_assert!((m2 - c * m1).abs() <= 1e-9 * (1.0 + c * m1));
            prop_assert!((r2 - c * r1).abs() <= 1e-9 * (1.0 + c * r1));
        }

        #[test]
        fn partition_is_total(
            train in proptest::collection::vec(-30.0f64..30.0, 1..400),
            test in proptest::collection::vec(-40.0f64..40.0, 1..100),
            w in 0.5f64..4.0,
        ) {
            let p = shot_partition(&train, &test, w).unwrap();
            prop_assert_eq!(p.labels.len(), test.len());
            let total: usize = Region::SHOTS.iter().map(|&r| p.count(r)).sum();
            prop_assert_eq!(total, test.len());
            for (l, c) in p.labels.iter().zip(&p.train_counts) {
                prop_assert_eq!(*l, classify(*c));
            }
        }
    }
}
