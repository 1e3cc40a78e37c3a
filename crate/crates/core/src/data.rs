//! Datasets, CSV I/O and the synthetic imbalanced benchmark.
//!
//! CSV layout: UTF-8, one header row, feature columns `f0..f{d-1}` followed by
//! `target`, plain decimal numbers. Values are written with Rust's shortest
//! round-trip formatting, so a save/load cycle is exact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const TARGET_COLUMN: &str = "target";

/// Feature matrix with one scalar target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Vec<f64>) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(Error::shape(
                None,
                format!(
                    "{} feature rows but {} targets",
                    features.rows(),
                    targets.len()
                ),
            ));
        }
        if let Some(i) = targets.iter().position(|y| !y.is_finite()) {
            return Err(Error::Input(format!("target {i} is not finite")));
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn to_csv_string(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for j in 0..d {
            let _ = write!(out, "f{j},");
        }
        out.push_str(TARGET_COLUMN);
        out.push('\n');
        for i in 0..self.len() {
            for v in self.features.row(i) {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{}", self.targets[i]);
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a CSV with a header row; every column except `target_column` is a feature.
pub fn load_csv(path: &Path, target_column: &str) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, target_column, path)
}

pub fn parse_csv(text: &str, target_column: &str, origin: &Path) -> Result<Dataset> {
    let err = |line: usize, column: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        column,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) if !h.trim().is_empty() => h.trim_end_matches('\r'),
        _ => return Err(err(1, 1, "missing header row".into())),
    };
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let target_idx = names
        .iter()
        .position(|n| *n == target_column)
        .ok_or_else(|| err(1, 1, format!("no column named {target_column:?}")))?;
    let width = names.len();

    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            return Err(err(line_no, 1, "blank line".into()));
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(err(
                line_no,
                cells.len().min(width) + 1,
                format!("expected {width} fields, found {}", cells.len()),
            ));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| err(line_no, c + 1, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(err(line_no, c + 1, format!("non-finite value {cell:?}")));
            }
            if c == target_idx {
                targets.push(v);
            } else {
                features.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::Input(format!("{}: no data rows", origin.display())));
    }
    let n = targets.len();
    Dataset::new(Matrix::from_vec(n, width - 1, features)?, targets)
}

/// Train/validation/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub meta: Option<SyntheticMeta>,
}

impl SplitDataset {
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.save_csv(&dir.join("train.csv"))?;
        self.val.save_csv(&dir.join("val.csv"))?;
        self.test.save_csv(&dir.join("test.csv"))?;
        if let Some(meta) = &self.meta {
            let path = dir.join("meta.json");
            let text = serde_json::to_string_pretty(meta)? + "\n";
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Loads `train.csv`, `val.csv`, `test.csv` and an optional `meta.json`.
    pub fn load_dir(dir: &Path, target_column: &str) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        Self::load_files(
            &dir.join("train.csv"),
            &dir.join("val.csv"),
            &dir.join("test.csv"),
            target_column,
        )
        .map(|s| Self { meta, ..s })
    }

    pub fn load_files(train: &Path, val: &Path, test: &Path, target_column: &str) -> Result<Self> {
        let split = Self {
            train: load_csv(train, target_column)?,
            val: load_csv(val, target_column)?,
            test: load_csv(test, target_column)?,
            meta: None,
        };
        let d = split.train.dim();
        if split.val.dim() != d || split.test.dim() != d {
            return Err(Error::Input("splits have different feature counts".into()));
        }
        Ok(split)
    }
}

/// Parameters of the synthetic long-tailed benchmark.
///
/// Training targets follow a Gaussian-peaked bin profile with a flat floor:
/// the peak bin holds `imbalance_factor` times as many samples as the floor
/// bins. Validation and test splits are balanced across bins unless
/// `balanced_eval` is off.
///
/// Inputs encode a latent `t ∈ [0, 1]` mixed with `dim − 1` nuisance
/// coordinates by a fixed Householder reflection. The target is
/// `g(t) + ε` with `g(t) = lo + (hi − lo)·(t/2 + 3t²/2 − t³)` and Laplace noise
/// `ε` whose scale rises linearly from `noise[0]` at `lo` to `noise[1]` at `hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub imbalance_factor: f64,
    pub target_range: [f64; 2],
    pub bin_width: f64,
    /// Position of the most populated bin as a fraction of the range.
    pub peak: f64,
    /// Initial peak width as a fraction of the range; refined to hit `n`.
    pub peak_width: f64,
    /// Laplace noise scale at the low and high end of the range.
    pub noise: [f64; 2],
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub balanced_eval: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 5000,
            dim: 4,
            imbalance_factor: 100.0,
            target_range: [0.0, 100.0],
            bin_width: 1.0,
            peak: 0.3,
            peak_width: 0.1,
            noise: [2.0, 8.0],
            val_fraction: 0.1,
            test_fraction: 0.1,
            balanced_eval: true,
        }
    }
}

/// What the generator actually produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub ground_truth: String,
    pub noise_law: String,
    pub train_bin_counts: Vec<usize>,
    pub floor_count: usize,
    pub peak_width_bins: f64,
    pub realized_imbalance: f64,
    pub split_sizes: [usize; 3],
}

impl SyntheticSpec {
    fn num_bins(&self) -> usize {
        ((self.target_range[1] - self.target_range[0]) / self.bin_width).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.target_range;
        if self.n < 100 {
            return Err(Error::Config("synthetic N must be at least 100".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("feature dimension must be at least 1".into()));
        }
        if !(self.imbalance_factor >= 1.0 && self.imbalance_factor.is_finite()) {
            return Err(Error::Config("imbalance factor must be >= 1".into()));
        }
        if !(hi > lo && self.bin_width > 0.0) || self.num_bins() < 2 {
            return Err(Error::Config(
                "target range must span at least two bins".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.peak) || !(self.peak_width > 0.0) {
            return Err(Error::Config(
                "peak must lie in [0, 1] and peak_width be positive".into(),
            ));
        }
        if !(self.noise[0] > 0.0 && self.noise[1] > 0.0) {
            return Err(Error::Config("noise scales must be positive".into()));
        }
        let f = self.val_fraction + self.test_fraction;
        if !(self.val_fraction > 0.0 && self.test_fraction > 0.0 && f < 1.0) {
            return Err(Error::Config(
                "split fractions must be positive and sum below 1".into(),
            ));
        }
        Ok(())
    }

    /// Unit-interval ground truth `t/2 + 3t²/2 − t³`, increasing on `[0, 1]`.
    fn g_unit(t: f64) -> f64 {
        0.5 * t + 1.5 * t * t - t * t * t
    }

    fn g_unit_inverse(v: f64) -> f64 {
        let (mut a, mut b) = (0.0, 1.0);
        for _ in 0..80 {
            let mid = 0.5 * (a + b);
            if Self::g_unit(mid) < v {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    }

    /// Latent coordinate `t` recovered from a feature row.
    pub fn latent(&self, x: &[f64]) -> f64 {
        let v0 = householder(x)[0];
        (v0 + 1.0) / 2.0
    }

    /// Noise-free target `g` for a feature row.
    pub fn ground_truth(&self, x: &[f64]) -> f64 {
        let [lo, hi] = self.target_range;
        lo + (hi - lo) * Self::g_unit(self.latent(x))
    }

    /// Laplace noise scale at target value `y`.
    pub fn noise_scale(&self, y: f64) -> f64 {
        let [lo, hi] = self.target_range;
        let r = ((y - lo) / (hi - lo)).clamp(0.0, 1.0);
        self.noise[0] + (self.noise[1] - self.noise[0]) * r
    }

    /// Training count per bin and the floor count and width used.
    fn train_profile(&self, n_train: usize) -> Result<(Vec<usize>, usize, f64)> {
        let bins = self.num_bins();
        let f = self.imbalance_factor;
        let kp = (self.peak * (bins - 1) as f64).round();
        let shape = |floor: f64, w: f64| -> Vec<f64> {
            (0..bins)
                .map(|k| {
                    let d = k as f64 - kp;
                    (f * floor * (-d * d / (2.0 * w * w)).exp()).max(floor)
                })
                .collect()
        };
        let total = |v: &[f64]| v.iter().sum::<f64>();

        let w0 = self.peak_width * bins as f64;
        let floor_real = n_train as f64 / total(&shape(1.0, w0));
        let mut floor = floor_real.round().max(1.0) as usize;
        // Narrowest possible peak still needs `(bins − 1)·floor + F·floor` samples.
        while floor > 1 && (floor as f64) * ((bins - 1) as f64 + f) > n_train as f64 {
            floor -= 1;
        }
        if (floor as f64) * ((bins - 1) as f64 + f) > n_train as f64 {
            return Err(Error::Config(format!(
                "imbalance factor {f} with {n_train} training samples over {bins} bins \
                 would need bins holding fewer than one sample"
            )));
        }

        let floor_f = floor as f64;
        let width = if f == 1.0 {
            w0
        } else {
            let target = n_train as f64;
            let (mut a, mut b) = (1e-6_f64, 1e6_f64);
            for _ in 0..200 {
                let mid = (a * b).sqrt();
                if total(&shape(floor_f, mid)) < target {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            (a * b).sqrt()
        };
        let counts = shape(floor_f, width)
            .into_iter()
            .map(|c| c.round() as usize)
            .collect();
        Ok((counts, floor, width))
    }
}

/// Reflection `H = I − 2·e·eᵀ / (eᵀe)` with `e = (1, …, 1)`. `H` is its own inverse.
fn householder(v: &[f64]) -> Vec<f64> {
    let d = v.len() as f64;
    let s: f64 = v.iter().sum::<f64>() * 2.0 / d;
    v.iter().map(|x| x - s).collect()
}

fn laplace<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

/// Samples one split with `counts[k]` targets in bin `k`, shuffled.
fn sample_split(spec: &SyntheticSpec, counts: &[usize], rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let [lo, hi] = spec.target_range;
    let n: usize = counts.iter().sum();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
    for (k, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            let y = (lo + (k as f64 + rng.gen::<f64>()) * spec.bin_width).min(hi);
            let b = spec.noise_scale(y);
            let mut clean = f64::NAN;
            for _ in 0..100 {
                let cand = y - laplace(rng, b);
                if (lo..=hi).contains(&cand) {
                    clean = cand;
                    break;
                }
            }
            if clean.is_nan() {
                clean = y;
            }
            let t = SyntheticSpec::g_unit_inverse((clean - lo) / (hi - lo));
            let mut v = Vec::with_capacity(spec.dim);
            v.push(2.0 * t - 1.0);
            for _ in 1..spec.dim {
                v.push(rng.gen_range(-1.0..1.0));
            }
            rows.push((householder(&v), y));
        }
    }
    rows.shuffle(rng);
    let targets = rows.iter().map(|r| r.1).collect();
    let features = rows.into_iter().flat_map(|r| r.0).collect();
    Dataset::new(Matrix::from_vec(n, spec.dim, features)?, targets)
}

fn balanced_counts(total: usize, bins: usize) -> Vec<usize> {
    let base = total / bins;
    let extra = total % bins;
    let mut counts = vec![base; bins];
    for j in 0..extra {
        counts[((j as f64 + 0.5) * bins as f64 / extra as f64) as usize] += 1;
    }
    counts
}

/// Largest-remainder allocation of `total` proportional to `weights`.
fn proportional_counts(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    let exact: Vec<f64> = weights
        .iter()
        .map(|&w| total as f64 * w as f64 / sum as f64)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &k in rest.iter().take(missing) {
        counts[k] += 1;
    }
    counts
}

/// Draws train/validation/test splits. Deterministic per `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SplitDataset> {
    spec.validate()?;
    let n_val = (spec.n as f64 * spec.val_fraction).round() as usize;
    let n_test = (spec.n as f64 * spec.test_fraction).round() as usize;
    if n_val == 0 || n_test == 0 {
        return Err(Error::Config(
            "validation and test splits would be empty".into(),
        ));
    }
    let n_train = spec.n - n_val - n_test;
    let (train_counts, floor, width) = spec.train_profile(n_train)?;
    let bins = train_counts.len();
    let (val_counts, test_counts) = if spec.balanced_eval {
        (balanced_counts(n_val, bins), balanced_counts(n_test, bins))
    } else {
        (
            proportional_counts(n_val, &train_counts),
            proportional_counts(n_test, &train_counts),
        )
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = sample_split(spec, &train_counts, &mut rng)?;
    let val = sample_split(spec, &val_counts, &mut rng)?;
    let test = sample_split(spec, &test_counts, &mut rng)?;

    let max = *train_counts.iter().max().unwrap_or(&0);
    let min = train_counts
        .iter()
        .copied()
        .filter(|&c| c > 0)
        .min()
        .unwrap_or(1);
    let [lo, hi] = spec.target_range;
    let meta = SyntheticMeta {
        seed,
        spec: spec.clone(),
        ground_truth: format!(
            "y = {lo} + {}*(t/2 + 3t^2/2 - t^3), t = ((H x)_0 + 1)/2, H = I - 2 11^T/d",
            hi - lo
        ),
        noise_law: format!(
            "Laplace, scale {} + {}*(y - {lo})/{}",
            spec.noise[0],
            spec.noise[1] - spec.noise[0],
            hi - lo
        ),
        split_sizes: [train.len(), val.len(), test.len()],
        train_bin_counts: train_counts,
        floor_count: floor,
        peak_width_bins: width,
        realized_imbalance: max as f64 / min as f64,
    };
    Ok(SplitDataset {
        train,
        val,
        test,
        meta: Some(meta),
    })
}

/// Default on-disk location of a split file inside a dataset directory.
pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.csv"))
}
