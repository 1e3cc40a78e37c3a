//! Shared-trunk, multi-expert regressor.
//!
//! The trunk maps an input row to an embedding `z`. Each expert head holds two
//! affine maps over `z`: one for the prediction `ŷ`, one for the log-scale
//! `ŝ` of a Laplace distribution.
//!
//! Heads operate in a standardized target space. [`TargetScaling`] maps that
//! space back to user units: `ŷ = offset + scale · ŷ_raw` and
//! `ŝ = ŝ_raw + ln(scale)`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Activation, DenseLayer, ForwardCache, Matrix};

/// Bound applied to `ŝ` before it enters the loss.
pub const LOG_SCALE_CLAMP: f64 = 15.0;

/// Checkpoint format tag and version.
pub const CHECKPOINT_FORMAT: &str = "uvote-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_dim: usize,
    /// Hidden widths between the input and the embedding.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub experts: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        if self.experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Affine map from standardized to user target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaling {
    pub offset: f64,
    pub scale: f64,
}

impl Default for TargetScaling {
    fn default() -> Self {
        Self {
            offset: 0.0,
            scale: 1.0,
        }
    }
}

impl TargetScaling {
    /// Mean and population standard deviation of `targets`; unit scale when constant.
    pub fn standardizing(targets: &[f64]) -> Self {
        let n = targets.len().max(1) as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        Self {
            offset: mean,
            scale: if sd > 0.0 && sd.is_finite() { sd } else { 1.0 },
        }
    }

    #[inline]
    pub fn to_raw(&self, y: f64) -> f64 {
        (y - self.offset) / self.scale
    }

    #[inline]
    pub fn from_raw(&self, y_raw: f64) -> f64 {
        self.offset + self.scale * y_raw
    }
}

/// One expert: prediction and log-scale maps over the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertHead {
    pub mean: DenseLayer,
    pub log_scale: DenseLayer,
}

impl ExpertHead {
    pub fn param_count(&self) -> usize {
        self.mean.param_count() + self.log_scale.param_count()
    }
}

/// Per-sample, per-expert predictions, both `[batch × M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutput {
    pub y_hat: Matrix,
    /// Log of the Laplace scale, clamped to `±LOG_SCALE_CLAMP`.
    pub s_hat: Matrix,
}

impl ExpertOutput {
    pub fn from_parts(y_hat: Matrix, s_hat: Matrix) -> Result<Self> {
        if y_hat.rows() != s_hat.rows() || y_hat.cols() != s_hat.cols() {
            return Err(Error::shape(None, "y_hat and s_hat shapes differ"));
        }
        if y_hat.cols() == 0 {
            return Err(Error::shape(None, "no experts"));
        }
        Ok(Self { y_hat, s_hat })
    }

    pub fn num_samples(&self) -> usize {
        self.y_hat.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.y_hat.cols()
    }
}

/// Raw head outputs in standardized units, kept for back-propagation.
#[derive(Debug, Clone)]
pub(crate) struct RawForward {
    pub embedding: Matrix,
    pub cache: ForwardCache,
    /// `[batch × M]`, standardized units.
    pub y_raw: Matrix,
    /// `[batch × M]`, unclamped.
    pub s_raw: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UvoteModel {
    trunk: Vec<DenseLayer>,
    heads: Vec<ExpertHead>,
    #[serde(default)]
    scaling: TargetScaling,
}

impl UvoteModel {
    pub fn from_parts(trunk: Vec<DenseLayer>, heads: Vec<ExpertHead>) -> Result<Self> {
        let model = Self {
            trunk,
            heads,
            scaling: TargetScaling::default(),
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("model needs at least one expert head".into()));
        }
        for (i, pair) in self.trunk.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    i + 1,
                    format!(
                        "trunk layer expects {} inputs, previous layer emits {}",
                        pair[1].in_dim(),
                        pair[0].out_dim()
                    ),
                ));
            }
        }
        let dz = self.heads[0].mean.in_dim();
        if let Some(last) = self.trunk.last() {
            if last.out_dim() != dz {
                return Err(Error::shape(
                    self.trunk.len() - 1,
                    format!("trunk emits {} features, heads expect {dz}", last.out_dim()),
                ));
            }
        }
        for (m, h) in self.heads.iter().enumerate() {
            for layer in [&h.mean, &h.log_scale] {
                if layer.in_dim() != dz || layer.out_dim() != 1 {
                    return Err(Error::shape(
                        None,
                        format!("head {m} must map {dz} features to one output"),
                    ));
                }
            }
        }
        if !(self.scaling.scale > 0.0
            && self.scaling.scale.is_finite()
            && self.scaling.offset.is_finite())
        {
            return Err(Error::Config(
                "target scaling must be finite with positive scale".into(),
            ));
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.heads.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.heads[0].mean.in_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk
            .first()
            .map_or_else(|| self.embedding_dim(), DenseLayer::in_dim)
    }

    pub fn trunk(&self) -> &[DenseLayer] {
        &self.trunk
    }

    pub fn heads(&self) -> &[ExpertHead] {
        &self.heads
    }

    pub fn trunk_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.trunk
    }

    pub fn heads_mut(&mut self) -> &mut [ExpertHead] {
        &mut self.heads
    }

    /// Trunk and heads borrowed mutably at once.
    pub fn parts_mut(&mut self) -> (&mut [DenseLayer], &mut [ExpertHead]) {
        (&mut self.trunk, &mut self.heads)
    }

    pub fn scaling(&self) -> TargetScaling {
        self.scaling
    }

    pub fn set_scaling(&mut self, scaling: TargetScaling) -> Result<()> {
        if !(scaling.scale > 0.0 && scaling.scale.is_finite() && scaling.offset.is_finite()) {
            return Err(Error::Config(
                "target scaling must be finite with positive scale".into(),
            ));
        }
        self.scaling = scaling;
        Ok(())
    }

    pub fn trunk_param_count(&self) -> usize {
        self.trunk.iter().map(DenseLayer::param_count).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.heads.iter().map(ExpertHead::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.trunk_param_count() + self.head_param_count()
    }

    /// A single-expert model sharing the trunk and head `m`.
    pub fn expert(&self, m: usize) -> Result<UvoteModel> {
        let head = self
            .heads
            .get(m)
            .ok_or_else(|| Error::Usage(format!("no expert {m}")))?
            .clone();
        Ok(Self {
            trunk: self.trunk.clone(),
            heads: vec![head],
            scaling: self.scaling,
        })
    }

    pub(crate) fn forward_raw(&self, inputs: &Matrix) -> Result<RawForward> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::shape(
                0,
                format!(
                    "model expects {} input features, got {}",
                    self.input_dim(),
                    inputs.cols()
                ),
            ));
        }
        let (embedding, cache) = nn::forward_cached(&self.trunk, inputs)?;
        let (y_raw, s_raw) = self.heads_forward(&embedding);
        Ok(RawForward {
            embedding,
            cache,
            y_raw,
            s_raw,
        })
    }

    fn heads_forward(&self, z: &Matrix) -> (Matrix, Matrix) {
        let batch = z.rows();
        let m_count = self.heads.len();
        let mut y = Matrix::zeros(batch, m_count);
        let mut s = Matrix::zeros(batch, m_count);
        for b in 0..batch {
            let zb = z.row(b);
            for (m, h) in self.heads.iter().enumerate() {
                y.set(b, m, affine1(&h.mean, zb));
                s.set(b, m, affine1(&h.log_scale, zb));
            }
        }
        (y, s)
    }

    /// `(ŷ, ŝ)` for every sample and expert, in user target units.
    pub fn predict_all(&self, inputs: &Matrix) -> Result<ExpertOutput> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::shape(
                0,
                format!(
                    "model expects {} input features, got {}",
                    self.input_dim(),
                    inputs.cols()
                ),
            ));
        }
        let z = nn::forward(&self.trunk, inputs)?;
        let (mut y, mut s) = self.heads_forward(&z);
        let ln_scale = self.scaling.scale.ln();
        for v in y.as_mut_slice() {
            *v = self.scaling.from_raw(*v);
        }
        for v in s.as_mut_slice() {
            *v = (clamp_log_scale(*v) + ln_scale).clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
        }
        if !y.is_finite() {
            return Err(Error::Input("model produced non-finite predictions".into()));
        }
        ExpertOutput::from_parts(y, s)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Input(format!(
                "not a model checkpoint: format {:?}",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.model.validate()?;
        Ok(ck.model)
    }
}

/// On-disk model layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: UvoteModel,
}

#[inline]
pub(crate) fn clamp_log_scale(s: f64) -> f64 {
    s.clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
}

#[inline]
fn affine1(layer: &DenseLayer, z: &[f64]) -> f64 {
    let w = layer.weights().row(0);
    let mut acc = layer.bias()[0];
    for (wi, zi) in w.iter().zip(z) {
        acc += wi * zi;
    }
    layer.activation().apply(acc)
}

/// Glorot-initialized model from a seeded ChaCha stream.
pub fn build_model(arch: &ArchSpec, seed: u64) -> Result<UvoteModel> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = Vec::with_capacity(arch.hidden.len() + 2);
    dims.push(arch.input_dim);
    dims.extend_from_slice(&arch.hidden);
    dims.push(arch.embedding_dim);
    let trunk = nn::mlp(&dims, arch.activation, arch.activation, &mut rng)?;
    let heads = (0..arch.experts)
        .map(|_| {
            Ok(ExpertHead {
                mean: DenseLayer::glorot(arch.embedding_dim, 1, Activation::Identity, &mut rng)?,
                log_scale: DenseLayer::glorot(
                    arch.embedding_dim,
                    1,
                    Activation::Identity,
                    &mut rng,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    UvoteModel::from_parts(trunk, heads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: Vec<f64>, b: f64) -> DenseLayer {
        let n = w.len();
        DenseLayer::new(
            Matrix::from_vec(1, n, w).unwrap(),
            vec![b],
            Activation::Identity,
        )
        .unwrap()
    }

    fn identity_trunk(d: usize) -> Vec<DenseLayer> {
        vec![DenseLayer::new(Matrix::identity(d), vec![0.0; d], Activation::Identity).unwrap()]
    }

    #[test]
    fn constant_head_outputs_biases() {
        let head = ExpertHead {
            mean: single(vec![0.0, 0.0], 1.5),
            log_scale: single(vec![0.0, 0.0], -0.25),
        };
        let model = UvoteModel::from_parts(identity_trunk(2), vec![head]).unwrap();
        let x = Matrix::from_rows(&[vec![3.0, -2.0], vec![0.1, 9.0]]).unwrap();
        let out = model.predict_all(&x).unwrap();
        assert_eq!(out.y_hat.as_slice(), &[1.5, 1.5]);
        assert_eq!(out.s_hat.as_slice(), &[-0.25, -0.25]);
    }

    #[test]
    fn copied_heads_give_identical_columns() {
        let arch = ArchSpec {
            input_dim: 3,
            hidden: vec![5],
            embedding_dim: 4,
            activation: Activation::Relu,
            experts: 2,
        };
        let mut model = build_model(&arch, 3).unwrap();
        let h0 = model.heads()[0].clone();
        model.heads_mut()[1] = h0;
        let x = Matrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let out = model.predict_all(&x).unwrap();
        for b in 0..2 {
            assert_eq!(out.y_hat.get(b, 0), out.y_hat.get(b, 1));
            assert_eq!(out.s_hat.get(b, 0), out.s_hat.get(b, 1));
        }
    }

    #[test]
    fn hand_evaluated_two_layer_trunk() {
        let l0 = DenseLayer::new(
            Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap(),
            vec![0.2, -0.1],
            Activation::Relu,
        )
        .unwrap();
        let l1 = DenseLayer::new(
            Matrix::from_rows(&[vec![1.0, 1.0], vec![-2.0, 0.5]]).unwrap(),
            vec![0.0, 0.3],
            Activation::Tanh,
        )
        .unwrap();
        let head = ExpertHead {
            mean: single(vec![1.5, -0.5], 0.1),
            log_scale: single(vec![-1.0, 2.0], 0.0),
        };
        let model = UvoteModel::from_parts(vec![l0, l1], vec![head]).unwrap();
        let (x0, x1) = (0.4, 0.9);
        let out = model
            .predict_all(&Matrix::from_rows(&[vec![x0, x1]]).unwrap())
            .unwrap();

        let a0 = (1.0 * x0 - 1.0 * x1 + 0.2f64).max(0.0);
        let a1 = (0.5 * x0 + 2.0 * x1 - 0.1f64).max(0.0);
        let z0 = (a0 + a1).tanh();
        let z1 = (-2.0 * a0 + 0.5 * a1 + 0.3f64).tanh();
        let y = 1.5 * z0 - 0.5 * z1 + 0.1;
        let s = -z0 + 2.0 * z1;
        assert!((out.y_hat.get(0, 0) - y).abs() < 1e-15);
        assert!((out.s_hat.get(0, 0) - s).abs() < 1e-15);
    }

    #[test]
    fn head_parameter_count() {
        let arch = ArchSpec {
            input_dim: 4,
            hidden: vec![16],
            embedding_dim: 32,
            activation: Activation::Relu,
            experts: 2,
        };
        let model = build_model(&arch, 0).unwrap();
        assert_eq!(model.head_param_count(), 132);
    }

    #[test]
    fn each_extra_expert_costs_two_affine_maps() {
        let mut arch = ArchSpec {
            input_dim: 3,
            hidden: vec![8],
            embedding_dim: 6,
            activation: Activation::Relu,
            experts: 1,
        };
        let mut prev = build_model(&arch, 0).unwrap().param_count();
        for m in 2..6 {
            arch.experts = m;
            let now = build_model(&arch, 0).unwrap().param_count();
            assert_eq!(now - prev, 2 * (6 + 1));
            prev = now;
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let arch = ArchSpec {
            input_dim: 1,
            hidden: vec![],
            embedding_dim: 1,
            activation: Activation::Relu,
            experts: 1,
        };
        assert_eq!(
            build_model(&arch, 11).unwrap(),
            build_model(&arch, 11).unwrap()
        );
        assert_ne!(
            build_model(&arch, 11).unwrap(),
            build_model(&arch, 12).unwrap()
        );
    }

    #[test]
    fn invalid_arch_rejected() {
        let arch = ArchSpec {
            input_dim: 2,
            hidden: vec![],
            embedding_dim: 0,
            activation: Activation::Relu,
            experts: 1,
        };
        assert!(matches!(build_model(&arch, 0), Err(Error::Config(_))));
        let arch = ArchSpec {
            embedding_dim: 2,
            experts: 0,
            ..arch
        };
        assert!(matches!(build_model(&arch, 0), Err(Error::Config(_))));
    }

    #[test]
    fn input_shape_mismatch() {
        let arch = ArchSpec {
            input_dim: 3,
            hidden: vec![],
            embedding_dim: 2,
            activation: Activation::Relu,
            experts: 2,
        };
        let model = build_model(&arch, 0).unwrap();
        let x = Matrix::zeros(1, 2);
        assert!(matches!(model.predict_all(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn expert_column_matches_single_expert_model() {
        let arch = ArchSpec {
            input_dim: 3,
            hidden: vec![7],
            embedding_dim: 5,
            activation: Activation::Tanh,
            experts: 3,
        };
        let mut model = build_model(&arch, 5).unwrap();
        model
            .set_scaling(TargetScaling {
                offset: 4.0,
                scale: 2.5,
            })
            .unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0]]).unwrap();
        let all = model.predict_all(&x).unwrap();
        for m in 0..3 {
            let one = model.expert(m).unwrap().predict_all(&x).unwrap();
            for b in 0..2 {
                assert!((all.y_hat.get(b, m) - one.y_hat.get(b, 0)).abs() < 1e-12);
                assert!((all.s_hat.get(b, m) - one.s_hat.get(b, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_scale_is_clamped() {
        let head = ExpertHead {
            mean: single(vec![0.0], 0.0),
            log_scale: single(vec![100.0], 0.0),
        };
        let model = UvoteModel::from_parts(identity_trunk(1), vec![head]).unwrap();
        let out = model
            .predict_all(&Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap())
            .unwrap();
        assert_eq!(out.s_hat.as_slice(), &[LOG_SCALE_CLAMP, -LOG_SCALE_CLAMP]);
    }

    #[test]
    fn checkpoint_roundtrip_and_version_check() {
        let arch = ArchSpec {
            input_dim: 2,
            hidden: vec![3],
            embedding_dim: 2,
            activation: Activation::Relu,
            experts: 2,
        };
        let model = build_model(&arch, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        assert_eq!(UvoteModel::load(&path).unwrap(), model);

        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 99");
        assert!(UvoteModel::from_checkpoint_str(&text).is_err());
    }
}
