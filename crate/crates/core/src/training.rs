//! Weighted Laplace negative log-likelihood and the multi-expert training loop.
//!
//! Expert `m` minimizes
//!
//! ```text
//! L^m = 1/N · Σ_n w_n^m · (exp(−ŝ_n^m) · |y_n − ŷ_n^m| + ŝ_n^m)
//! ```
//!
//! and the experts are blended per epoch `T` by
//! `L = α·L^0 + (1 − α)·Σ_{m≥1} L^m` with `α = 1 − (T / T_max)²`.
//!
//! Losses are computed in the model's standardized target space (see
//! [`TargetScaling`]); with the identity scaling they are in user units.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::density::{expert_weights, DensityMethod, WeightTable};
use crate::error::{Error, Result};
use crate::model::{clamp_log_scale, TargetScaling, UvoteModel, LOG_SCALE_CLAMP};
use crate::nn::{self, AdamConfig, AdamState, GradientTape, LayerGrad, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Laplace negative log-likelihood with a learned log-scale.
    #[default]
    Nll,
    /// Weighted absolute error; the log-scale heads stay at zero.
    L1,
    /// Weighted squared error; the log-scale heads stay at zero.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    FrequencyPower,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `α·L^0 + (1 − α)·Σ_{m≥1} L^m` with the quadratic decay of `α`.
    #[default]
    Dynamic,
    /// `(1/M)·Σ_m L^m` from the first epoch.
    Flat,
}

/// How the `m ≥ 1` experts enter the dynamic blend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpertReduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_main: f64,
    /// Learning rate of the log-scale head parameters.
    pub lr_uncertainty: f64,
    /// Epochs at which both learning rates are multiplied by `lr_decay`.
    /// `None` selects `⌊2/3·T_max⌋` and `⌊8/9·T_max⌋`.
    pub lr_milestones: Option<Vec<usize>>,
    pub lr_decay: f64,
    pub loss: LossKind,
    pub weighting: Weighting,
    pub schedule: Schedule,
    pub expert_reduction: ExpertReduction,
    pub density: DensityMethod,
    /// Rescale each expert's weight column to mean 1.
    pub normalize_weights: bool,
    /// Fit heads on standardized targets.
    pub standardize_targets: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 64,
            lr_main: 1e-3,
            lr_uncertainty: 1e-4,
            lr_milestones: None,
            lr_decay: 0.1,
            loss: LossKind::Nll,
            weighting: Weighting::FrequencyPower,
            schedule: Schedule::Dynamic,
            expert_reduction: ExpertReduction::Sum,
            density: DensityMethod::default(),
            normalize_weights: true,
            standardize_targets: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_main > 0.0 && self.lr_main.is_finite()) {
            return Err(Error::Config("lr_main must be positive".into()));
        }
        if !(self.lr_uncertainty > 0.0 && self.lr_uncertainty <= self.lr_main) {
            return Err(Error::Config(
                "lr_uncertainty must be positive and not exceed lr_main".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        match self.density {
            DensityMethod::Histogram { bin_width } if !(bin_width > 0.0) => {
                Err(Error::Config("histogram bin_width must be positive".into()))
            }
            DensityMethod::Kde { bandwidth } if !(bandwidth > 0.0) => {
                Err(Error::Config("KDE bandwidth must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Effective decay epochs, dropping any at epoch 0.
    pub fn milestones(&self) -> Vec<usize> {
        let mut m = self
            .lr_milestones
            .clone()
            .unwrap_or_else(|| vec![2 * self.epochs / 3, 8 * self.epochs / 9]);
        m.retain(|&e| e > 0 && e < self.epochs);
        m
    }
}

/// Loss value and its gradients with respect to the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_y_hat: Vec<f64>,
    pub grad_s_hat: Vec<f64>,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_loss_inputs(y: &[f64], y_hat: &[f64], s_hat: &[f64], w: &[f64]) -> Result<()> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Input("loss over an empty batch".into()));
    }
    if y_hat.len() != n || s_hat.len() != n || w.len() != n {
        return Err(Error::shape(None, "loss inputs have different lengths"));
    }
    let all_finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !(all_finite(y) && all_finite(y_hat) && all_finite(s_hat) && all_finite(w)) {
        return Err(Error::Training {
            epoch: 0,
            batch: 0,
            msg: "non-finite loss input".into(),
        });
    }
    if w.iter().any(|&x| x <= 0.0) {
        return Err(Error::Input("loss weights must be positive".into()));
    }
    Ok(())
}

/// Weighted Laplace NLL `1/N · Σ w·(exp(−ŝ)|y − ŷ| + ŝ)` and its gradients.
pub fn laplace_nll(y: &[f64], y_hat: &[f64], s_hat: &[f64], w: &[f64]) -> Result<LossGrad> {
    check_loss_inputs(y, y_hat, s_hat, w)?;
    let inv_n = 1.0 / y.len() as f64;
    let mut loss = 0.0;
    let mut gy = Vec::with_capacity(y.len());
    let mut gs = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let r = y[i] - y_hat[i];
        let a = r.abs();
        let e = (-s_hat[i]).exp();
        loss += w[i] * (e * a + s_hat[i]);
        gy.push(-w[i] * inv_n * e * sign(r));
        gs.push(w[i] * inv_n * (1.0 - e * a));
    }
    Ok(LossGrad {
        loss: loss * inv_n,
        grad_y_hat: gy,
        grad_s_hat: gs,
    })
}

/// Weighted mean absolute error; `s_hat` receives zero gradient.
pub fn l1_loss(y: &[f64], y_hat: &[f64], w: &[f64]) -> Result<LossGrad> {
    let zeros = vec![0.0; y.len()];
    check_loss_inputs(y, y_hat, &zeros, w)?;
    let inv_n = 1.0 / y.len() as f64;
    let mut loss = 0.0;
    let mut gy = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let r = y[i] - y_hat[i];
        loss += w[i] * r.abs();
        gy.push(-w[i] * inv_n * sign(r));
    }
    Ok(LossGrad {
        loss: loss * inv_n,
        grad_y_hat: gy,
        grad_s_hat: zeros,
    })
}

/// Weighted mean squared error; `s_hat` receives zero gradient.
pub fn l2_loss(y: &[f64], y_hat: &[f64], w: &[f64]) -> Result<LossGrad> {
    let zeros = vec![0.0; y.len()];
    check_loss_inputs(y, y_hat, &zeros, w)?;
    let inv_n = 1.0 / y.len() as f64;
    let mut loss = 0.0;
    let mut gy = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let r = y[i] - y_hat[i];
        loss += w[i] * r * r;
        gy.push(-2.0 * w[i] * inv_n * r);
    }
    Ok(LossGrad {
        loss: loss * inv_n,
        grad_y_hat: gy,
        grad_s_hat: zeros,
    })
}

/// `α = 1 − (T / T_max)²` for a 0-based epoch `T`.
pub fn dynamic_alpha(epoch: usize, max_epochs: usize) -> Result<f64> {
    if max_epochs == 0 {
        return Err(Error::Usage("T_max must be at least 1".into()));
    }
    if epoch > max_epochs {
        return Err(Error::Usage(format!(
            "epoch {epoch} exceeds T_max = {max_epochs}"
        )));
    }
    let r = epoch as f64 / max_epochs as f64;
    Ok(1.0 - r * r)
}

/// Per-expert blend coefficients `c_m`, so that `L = Σ_m c_m·L^m`.
///
/// A single expert always has coefficient 1.
pub fn expert_coefficients(
    schedule: Schedule,
    reduction: ExpertReduction,
    alpha: f64,
    experts: usize,
) -> Vec<f64> {
    if experts <= 1 {
        return vec![1.0; experts];
    }
    match schedule {
        Schedule::Flat => vec![1.0 / experts as f64; experts],
        Schedule::Dynamic => {
            let rest = match reduction {
                ExpertReduction::Sum => 1.0 - alpha,
                ExpertReduction::Mean => (1.0 - alpha) / (experts - 1) as f64,
            };
            std::iter::once(alpha)
                .chain(std::iter::repeat(rest).take(experts - 1))
                .collect()
        }
    }
}

/// Per-expert losses blended into a total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `None` under the flat schedule.
    pub alpha: Option<f64>,
    pub coefficients: Vec<f64>,
    pub per_expert: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// `|total − Σ_m c_m·L^m|`.
    pub fn identity_gap(&self) -> f64 {
        let blended: f64 = self
            .coefficients
            .iter()
            .zip(&self.per_expert)
            .map(|(c, l)| c * l)
            .sum();
        (self.total - blended).abs()
    }
}

/// Gradients for every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub trunk: GradientTape,
    pub mean_heads: Vec<LayerGrad>,
    pub log_scale_heads: Vec<LayerGrad>,
}

impl ModelGradients {
    /// Trunk then prediction heads.
    pub fn main_slices(&self) -> Vec<&[f64]> {
        let mut v = self.trunk.slices();
        v.extend(self.mean_heads.iter().flat_map(LayerGrad::slices));
        v
    }

    pub fn uncertainty_slices(&self) -> Vec<&[f64]> {
        self.log_scale_heads
            .iter()
            .flat_map(LayerGrad::slices)
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.main_slices()
            .into_iter()
            .chain(self.uncertainty_slices())
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

fn main_params_mut(model: &mut UvoteModel) -> Vec<&mut [f64]> {
    let (trunk, heads) = model.parts_mut();
    let mut v = nn::params_mut(trunk);
    v.extend(heads.iter_mut().flat_map(|h| h.mean.params_mut()));
    v
}

fn uncertainty_params_mut(model: &mut UvoteModel) -> Vec<&mut [f64]> {
    model
        .heads_mut()
        .iter_mut()
        .flat_map(|h| h.log_scale.params_mut())
        .collect()
}

/// Loss and gradients of the blended objective on one batch.
///
/// `weights` is `[batch × M]`; `targets` are in user units and are mapped
/// through the model's target scaling.
pub fn composite_objective(
    model: &UvoteModel,
    features: &Matrix,
    targets: &[f64],
    weights: &Matrix,
    coefficients: &[f64],
    loss: LossKind,
) -> Result<(Vec<f64>, f64, ModelGradients)> {
    let m_count = model.num_experts();
    let batch = features.rows();
    if targets.len() != batch || weights.rows() != batch {
        return Err(Error::shape(
            None,
            "features, targets and weights disagree on batch size",
        ));
    }
    if weights.cols() != m_count || coefficients.len() != m_count {
        return Err(Error::shape(
            None,
            format!(
                "model has {m_count} experts, weights have {} columns",
                weights.cols()
            ),
        ));
    }
    let scaling = model.scaling();
    let y: Vec<f64> = targets.iter().map(|&t| scaling.to_raw(t)).collect();
    let fwd = model.forward_raw(features)?;
    let z = &fwd.embedding;
    let dz_dim = model.embedding_dim();

    let mut per_expert = Vec::with_capacity(m_count);
    let mut total = 0.0;
    let mut dz = Matrix::zeros(batch, dz_dim);
    let mut mean_heads = Vec::with_capacity(m_count);
    let mut log_scale_heads = Vec::with_capacity(m_count);

    for (m, head) in model.heads().iter().enumerate() {
        let y_hat = fwd.y_raw.col(m);
        let s_raw = fwd.s_raw.col(m);
        let s_hat: Vec<f64> = s_raw.iter().map(|&s| clamp_log_scale(s)).collect();
        let w = weights.col(m);
        let lg = match loss {
            LossKind::Nll => laplace_nll(&y, &y_hat, &s_hat, &w)?,
            LossKind::L1 => l1_loss(&y, &y_hat, &w)?,
            LossKind::L2 => l2_loss(&y, &y_hat, &w)?,
        };
        per_expert.push(lg.loss);
        let c = coefficients[m];
        total += c * lg.loss;

        let mut g_mean = LayerGrad::zeros_like(&head.mean);
        let mut g_scale = LayerGrad::zeros_like(&head.log_scale);
        let wm = head.mean.weights().row(0);
        let ws = head.log_scale.weights().row(0);
        for b in 0..batch {
            let gy = c * lg.grad_y_hat[b];
            let gs = if s_raw[b].abs() > LOG_SCALE_CLAMP {
                0.0
            } else {
                c * lg.grad_s_hat[b]
            };
            if gy == 0.0 && gs == 0.0 {
                continue;
            }
            let zb = z.row(b);
            g_mean.bias[0] += gy;
            g_scale.bias[0] += gs;
            let gwm = g_mean.weights.row_mut(0);
            for k in 0..dz_dim {
                gwm[k] += gy * zb[k];
            }
            let gws = g_scale.weights.row_mut(0);
            for k in 0..dz_dim {
                gws[k] += gs * zb[k];
            }
            let dzb = dz.row_mut(b);
            for k in 0..dz_dim {
                dzb[k] += gy * wm[k] + gs * ws[k];
            }
        }
        mean_heads.push(g_mean);
        log_scale_heads.push(g_scale);
    }

    let (trunk, _) = nn::backward(model.trunk(), &fwd.cache, &dz)?;
    Ok((
        per_expert,
        total,
        ModelGradients {
            trunk,
            mean_heads,
            log_scale_heads,
        },
    ))
}

/// Sample weights for `experts` experts as the config prescribes.
pub fn prepare_weights(
    targets: &[f64],
    experts: usize,
    config: &TrainConfig,
) -> Result<WeightTable> {
    let table = match config.weighting {
        Weighting::Uniform => return Ok(WeightTable::uniform(targets.len(), experts)),
        Weighting::FrequencyPower => {
            let freqs = config.density.sample_frequencies(targets)?;
            expert_weights(&freqs, experts)?
        }
    };
    Ok(if config.normalize_weights {
        table.normalized()
    } else {
        table
    })
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: Option<f64>,
    pub per_expert_loss: Vec<f64>,
    pub total_loss: f64,
    pub lr: f64,
    pub lr_uncertainty: f64,
    pub coefficients: Vec<f64>,
}

impl EpochRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            alpha: self.alpha,
            coefficients: self.coefficients.clone(),
            per_expert: self.per_expert_loss.clone(),
            total: self.total_loss,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { epochs })
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Optimizes `model` on `data` under `weights` and `config`.
pub fn train(
    mut model: UvoteModel,
    data: &Dataset,
    weights: &WeightTable,
    config: &TrainConfig,
) -> Result<(UvoteModel, TrainLog)> {
    config.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Input("training set is empty".into()));
    }
    if weights.num_samples() != n {
        return Err(Error::shape(
            None,
            format!(
                "weight table has {} rows for {n} samples",
                weights.num_samples()
            ),
        ));
    }
    let m_count = model.num_experts();
    if weights.num_experts() != m_count {
        return Err(Error::shape(
            None,
            format!(
                "weight table has {} experts, model has {m_count}",
                weights.num_experts()
            ),
        ));
    }
    if data.features.cols() != model.input_dim() {
        return Err(Error::shape(
            0,
            format!(
                "model expects {} features, data has {}",
                model.input_dim(),
                data.features.cols()
            ),
        ));
    }

    model.set_scaling(if config.standardize_targets {
        TargetScaling::standardizing(&data.targets)
    } else {
        TargetScaling::default()
    })?;
    let learns_scale = config.loss == LossKind::Nll;
    if !learns_scale {
        for h in model.heads_mut() {
            h.log_scale.weights_mut().as_mut_slice().fill(0.0);
            h.log_scale.bias_mut().fill(0.0);
        }
    }

    let main_sizes: Vec<usize> = main_params_mut(&mut model)
        .iter()
        .map(|s| s.len())
        .collect();
    let unc_sizes: Vec<usize> = uncertainty_params_mut(&mut model)
        .iter()
        .map(|s| s.len())
        .collect();
    let mut lr = config.lr_main;
    let mut lr_unc = config.lr_uncertainty;
    let mut opt_main = AdamState::new(AdamConfig::with_lr(lr), main_sizes);
    let mut opt_unc = AdamState::new(AdamConfig::with_lr(lr_unc), unc_sizes);
    let milestones = config.milestones();

    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        for _ in milestones.iter().filter(|&&e| e == epoch) {
            lr *= config.lr_decay;
            lr_unc *= config.lr_decay;
        }
        opt_main.set_lr(lr);
        opt_unc.set_lr(lr_unc);

        let alpha = dynamic_alpha(epoch, config.epochs)?;
        let coefficients =
            expert_coefficients(config.schedule, config.expert_reduction, alpha, m_count);

        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(
            config.seed,
            epoch,
        )));

        let mut sum_expert = vec![0.0; m_count];
        let mut sum_total = 0.0;
        for (batch_idx, idx) in order.chunks(config.batch_size).enumerate() {
            let train_err = |msg: String| Error::Training {
                epoch,
                batch: batch_idx,
                msg,
            };
            let x = data.features.select_rows(idx);
            let y: Vec<f64> = idx.iter().map(|&i| data.targets[i]).collect();
            let w = weights.as_matrix().select_rows(idx);
            let (per_expert, total, grads) =
                composite_objective(&model, &x, &y, &w, &coefficients, config.loss).map_err(
                    |e| match e {
                        Error::Training { msg, .. } => train_err(msg),
                        other => other,
                    },
                )?;
            if !total.is_finite() || !grads.all_finite() {
                return Err(train_err(format!("non-finite loss {total}")));
            }
            let nb = idx.len() as f64;
            for (acc, l) in sum_expert.iter_mut().zip(&per_expert) {
                *acc += nb * l;
            }
            sum_total += nb * total;

            opt_main
                .step(&mut main_params_mut(&mut model), &grads.main_slices())
                .map_err(|e| train_err(e.to_string()))?;
            if learns_scale {
                opt_unc
                    .step(
                        &mut uncertainty_params_mut(&mut model),
                        &grads.uncertainty_slices(),
                    )
                    .map_err(|e| train_err(e.to_string()))?;
            }
        }

        let inv = 1.0 / n as f64;
        log.epochs.push(EpochRecord {
            epoch,
            alpha: (config.schedule == Schedule::Dynamic).then_some(alpha),
            per_expert_loss: sum_expert.iter().map(|s| s * inv).collect(),
            total_loss: sum_total * inv,
            lr,
            lr_uncertainty: lr_unc,
            coefficients,
        });
    }
    Ok((model, log))
}
