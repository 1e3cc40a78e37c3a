//! End-to-end experiments: data, training, expert-count sweep and reports.
//!
//! A run directory holds
//!
//! ```text
//! config.json         resolved configuration
//! report.json         metrics of the selected model and of every candidate
//! report.csv          the same metrics, one row per candidate × split × strategy × region
//! train_log.jsonl     per-epoch losses of the selected model
//! model.json          checkpoint of the selected model
//! candidates/m<M>/    train_log.jsonl and model.json for every candidate
//! ```
//!
//! `RUNNING` exists while a run is in progress. A failed run leaves `STALE`
//! containing the error message.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, SplitDataset, SyntheticSpec, TARGET_COLUMN};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_outputs, EvalConfig, MetricsReport, Strategy};
use crate::model::{build_model, ArchSpec, UvoteModel};
use crate::nn::Activation;
use crate::training::{
    prepare_weights, train, LossKind, Schedule, TrainConfig, TrainLog, Weighting,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const RUNNING_MARKER: &str = "RUNNING";
pub const STALE_MARKER: &str = "STALE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated from the experiment seed.
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
    },
    Csv {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
        #[serde(default = "default_target")]
        target_column: String,
    },
}

fn default_target() -> String {
    TARGET_COLUMN.to_string()
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SyntheticSpec::default(),
        }
    }
}

impl DataSource {
    /// CSV splits `train.csv`, `val.csv`, `test.csv` inside `dir`.
    pub fn csv_dir(dir: &Path) -> Self {
        DataSource::Csv {
            train: dir.join("train.csv"),
            val: dir.join("val.csv"),
            test: dir.join("test.csv"),
            target_column: default_target(),
        }
    }

    pub fn load(&self, seed: u64) -> Result<SplitDataset> {
        match self {
            DataSource::Synthetic { spec } => generate_synthetic(spec, seed),
            DataSource::Csv {
                train,
                val,
                test,
                target_column,
            } => SplitDataset::load_files(train, val, test, target_column),
        }
    }
}

/// Trunk shape; the input width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            embedding_dim: 32,
            activation: Activation::Relu,
        }
    }
}

impl ArchConfig {
    pub fn spec(&self, input_dim: usize, experts: usize) -> ArchSpec {
        ArchSpec {
            input_dim,
            hidden: self.hidden.clone(),
            embedding_dim: self.embedding_dim,
            activation: self.activation,
            experts,
        }
    }
}

/// Validation metric used to pick the expert count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    /// MAE, or Pearson when training with squared error.
    #[default]
    Auto,
    Mae,
    Pearson,
}

impl SelectionMetric {
    pub fn resolve(self, loss: LossKind) -> SelectionMetric {
        match (self, loss) {
            (SelectionMetric::Auto, LossKind::L2) => SelectionMetric::Pearson,
            (SelectionMetric::Auto, _) => SelectionMetric::Mae,
            (m, _) => m,
        }
    }
}

/// Named configuration presets for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Uvote,
    Vanilla,
    Nll,
    NBranch,
    NoWeighting,
    NoDyl,
    AvgVote,
    OracleVote,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Uvote,
        Variant::Vanilla,
        Variant::Nll,
        Variant::NBranch,
        Variant::NoWeighting,
        Variant::NoDyl,
        Variant::AvgVote,
        Variant::OracleVote,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Uvote => "uvote",
            Variant::Vanilla => "vanilla",
            Variant::Nll => "nll",
            Variant::NBranch => "n-branch",
            Variant::NoWeighting => "no-weighting",
            Variant::NoDyl => "no-dyl",
            Variant::AvgVote => "avg-vote",
            Variant::OracleVote => "oracle-vote",
        }
    }

    pub fn parse(name: &str) -> Option<Variant> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    /// Rewrites the switches that define this variant and leaves the rest.
    pub fn apply(self, config: &mut ExperimentConfig) {
        let t = &mut config.train;
        match self {
            Variant::Uvote => {
                t.loss = LossKind::Nll;
                t.weighting = Weighting::FrequencyPower;
                t.schedule = Schedule::Dynamic;
                config.strategies = vec![Strategy::MinUncertainty];
            }
            Variant::Vanilla => {
                config.experts = vec![1];
                t.loss = LossKind::L1;
            }
            Variant::Nll => {
                config.experts = vec![1];
                t.loss = LossKind::Nll;
            }
            Variant::NBranch => {
                t.loss = LossKind::L1;
                config.strategies = vec![Strategy::Average];
            }
            Variant::NoWeighting => t.weighting = Weighting::Uniform,
            Variant::NoDyl => t.schedule = Schedule::Flat,
            Variant::AvgVote => config.strategies = vec![Strategy::Average],
            Variant::OracleVote => config.strategies = vec![Strategy::Oracle],
        }
    }
}

/// Everything needed to reproduce a run.
///
/// `seed` drives data generation, initialization and shuffling; it
/// replaces `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSource,
    pub arch: ArchConfig,
    /// Candidate expert counts. More than one triggers a sweep.
    pub experts: Vec<usize>,
    pub train: TrainConfig,
    /// The first strategy drives model selection.
    pub strategies: Vec<Strategy>,
    pub eval: EvalConfig,
    pub selection: SelectionMetric,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "uvote".into(),
            data: DataSource::default(),
            arch: ArchConfig::default(),
            experts: vec![2],
            train: TrainConfig::default(),
            strategies: vec![
                Strategy::MinUncertainty,
                Strategy::Average,
                Strategy::Oracle,
            ],
            eval: EvalConfig::default(),
            selection: SelectionMetric::Auto,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() || self.experts.contains(&0) {
            return Err(Error::Config(
                "experts must list positive expert counts".into(),
            ));
        }
        let mut sorted = self.experts.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.experts.len() {
            return Err(Error::Config("experts contains duplicates".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if !(self.eval.bin_width > 0.0) {
            return Err(Error::Config("eval bin_width must be positive".into()));
        }
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// One trained expert count.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub experts: usize,
    pub model: UvoteModel,
    pub log: TrainLog,
    pub val: Vec<MetricsReport>,
    pub test: Vec<MetricsReport>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionInfo {
    pub split: String,
    pub metric: SelectionMetric,
    pub strategy: Strategy,
    pub experts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub experts: usize,
    pub score: f64,
    pub final_train_loss: Option<f64>,
    pub val: Vec<MetricsReport>,
    pub test: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub dim: usize,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub data: DataSummary,
    pub selection: SelectionInfo,
    /// Test metrics of the selected model, one entry per strategy.
    pub test: Vec<MetricsReport>,
    pub candidates: Vec<CandidateSummary>,
}

pub const REPORT_CSV_HEADER: &str =
    "experts,selected,split,strategy,region,count,mae,rmse,pearson,uce";

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "unsupported report schema_version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for c in &self.candidates {
            let selected = c.experts == self.selection.experts;
            for (split, reports) in [("val", &c.val), ("test", &c.test)] {
                for r in reports {
                    for row in r.csv_rows() {
                        let _ = writeln!(out, "{},{selected},{split},{row}", c.experts);
                    }
                }
            }
        }
        out
    }

    /// Test report of the selected model for `strategy`.
    pub fn selected(&self, strategy: Strategy) -> Option<&MetricsReport> {
        self.test.iter().find(|r| r.strategy == strategy)
    }
}

/// In-memory result of [`run`].
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub candidates: Vec<Candidate>,
    pub selected: usize,
    pub report: ExperimentReport,
}

impl ExperimentOutcome {
    pub fn winner(&self) -> &Candidate {
        &self.candidates[self.selected]
    }
}

fn score_of(report: &MetricsReport, metric: SelectionMetric) -> Result<f64> {
    let v = match metric {
        SelectionMetric::Pearson => report.all.pearson,
        _ => report.all.mae,
    };
    v.ok_or_else(|| Error::Input("validation split is empty".into()))
}

fn fit_candidate(
    config: &ExperimentConfig,
    data: &SplitDataset,
    experts: usize,
    metric: SelectionMetric,
) -> Result<Candidate> {
    let arch = config.arch.spec(data.train.dim(), experts);
    let model = build_model(&arch, config.seed)?;
    let train_cfg = TrainConfig {
        seed: config.seed,
        ..config.train.clone()
    };
    let weights = prepare_weights(&data.train.targets, experts, &train_cfg)?;
    let (model, log) = train(model, &data.train, &weights, &train_cfg)?;

    let report_for = |split: &crate::data::Dataset| -> Result<Vec<MetricsReport>> {
        let outputs = model.predict_all(&split.features)?;
        config
            .strategies
            .iter()
            .map(|&s| {
                evaluate_outputs(
                    &outputs,
                    &data.train.targets,
                    &split.targets,
                    s,
                    &config.eval,
                )
            })
            .collect()
    };
    let val = report_for(&data.val)?;
    let test = report_for(&data.test)?;
    let score = score_of(&val[0], metric)?;
    Ok(Candidate {
        experts,
        model,
        log,
        val,
        test,
        score,
    })
}

/// Trains every candidate expert count, picks one on validation data and
/// scores all of them on the test split. Nothing touches the disk unless the
/// data source is CSV.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let data = config.data.load(config.seed)?;
    run_on(config, &data)
}

/// Like [`run`] with data already in memory.
pub fn run_on(config: &ExperimentConfig, data: &SplitDataset) -> Result<ExperimentOutcome> {
    config.validate()?;
    let metric = config.selection.resolve(config.train.loss);
    let candidates: Vec<Candidate> = config
        .experts
        .par_iter()
        .map(|&m| fit_candidate(config, data, m, metric))
        .collect::<Result<_>>()?;

    let better = |a: f64, b: f64| match metric {
        SelectionMetric::Pearson => a > b,
        _ => a < b,
    };
    let mut selected = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        if better(c.score, candidates[selected].score) {
            selected = i;
        }
    }

    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        name: config.name.clone(),
        seed: config.seed,
        data: DataSummary {
            train: data.train.len(),
            val: data.val.len(),
            test: data.test.len(),
            dim: data.train.dim(),
        },
        selection: SelectionInfo {
            split: "val".into(),
            metric,
            strategy: config.strategies[0],
            experts: candidates[selected].experts,
        },
        test: candidates[selected].test.clone(),
        candidates: candidates
            .iter()
            .map(|c| CandidateSummary {
                experts: c.experts,
                score: c.score,
                final_train_loss: c.log.epochs.last().map(|e| e.total_loss),
                val: c.val.clone(),
                test: c.test.clone(),
            })
            .collect(),
    };
    Ok(ExperimentOutcome {
        config: config.clone(),
        candidates,
        selected,
        report,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_artifacts(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    write(&dir.join("config.json"), &outcome.config.to_json()?)?;
    for c in &outcome.candidates {
        let sub = dir.join("candidates").join(format!("m{}", c.experts));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        c.log.write_jsonl(&sub.join("train_log.jsonl"))?;
        c.model.save(&sub.join("model.json"))?;
    }
    let w = outcome.winner();
    w.log.write_jsonl(&dir.join("train_log.jsonl"))?;
    w.model.save(&dir.join("model.json"))?;
    write(&dir.join("report.json"), &outcome.report.to_json()?)?;
    write(&dir.join("report.csv"), &outcome.report.to_csv())?;
    Ok(())
}

/// Runs `config` and writes the run directory `out`.
///
/// On failure `out/STALE` records the error and the error is returned.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stale = out.join(STALE_MARKER);
    if stale.exists() {
        std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    let running = out.join(RUNNING_MARKER);
    write(&running, "")?;

    let result = run(config).and_then(|o| write_artifacts(&o, out).map(|_| o));
    let _ = std::fs::remove_file(&running);
    if let Err(e) = &result {
        let _ = std::fs::write(&stale, format!("{e}\n"));
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            data: DataSource::Synthetic {
                spec: SyntheticSpec {
                    n: 600,
                    dim: 2,
                    imbalance_factor: 10.0,
                    target_range: [0.0, 20.0],
                    ..SyntheticSpec::default()
                },
            },
            arch: ArchConfig {
                hidden: vec![8],
                embedding_dim: 4,
                activation: Activation::Relu,
            },
            seed: 3,
            ..ExperimentConfig::default()
        };
        cfg.train.epochs = 3;
        cfg
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = tiny();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert_eq!(
            ExperimentConfig::from_json("{}").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = tiny();
        cfg.experts = vec![];
        assert!(cfg.validate().is_err());
        cfg.experts = vec![2, 2];
        assert!(cfg.validate().is_err());
        cfg.experts = vec![0];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.strategies.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variants_set_switches() {
        let mut cfg = tiny();
        Variant::Vanilla.apply(&mut cfg);
        assert_eq!(
            (cfg.experts.as_slice(), cfg.train.loss),
            (&[1][..], LossKind::L1)
        );
        let mut cfg = tiny();
        Variant::NBranch.apply(&mut cfg);
        assert_eq!(cfg.train.loss, LossKind::L1);
        assert_eq!(cfg.strategies, vec![Strategy::Average]);
        let mut cfg = tiny();
        Variant::NoDyl.apply(&mut cfg);
        assert_eq!(cfg.train.schedule, Schedule::Flat);
        let mut cfg = tiny();
        Variant::NoWeighting.apply(&mut cfg);
        assert_eq!(cfg.train.weighting, Weighting::Uniform);
        let mut cfg = tiny();
        Variant::OracleVote.apply(&mut cfg);
        assert_eq!(cfg.strategies, vec![Strategy::Oracle]);
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()), Some(v));
        }
    }

    #[test]
    fn auto_selection_metric() {
        assert_eq!(
            SelectionMetric::Auto.resolve(LossKind::L2),
            SelectionMetric::Pearson
        );
        assert_eq!(
            SelectionMetric::Auto.resolve(LossKind::Nll),
            SelectionMetric::Mae
        );
        assert_eq!(
            SelectionMetric::Mae.resolve(LossKind::L2),
            SelectionMetric::Mae
        );
    }

    #[test]
    fn sweep_selects_lowest_validation_mae() {
        let mut cfg = tiny();
        cfg.experts = vec![1, 2, 3];
        let out = run(&cfg).unwrap();
        assert_eq!(out.candidates.len(), 3);
        let best = out
            .candidates
            .iter()
            .map(|c| c.score)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.winner().score, best);
        assert_eq!(out.report.selection.experts, out.winner().experts);
        assert_eq!(out.report.test.len(), cfg.strategies.len());
        let csv = out.report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 * 2 * 3 * 4);
    }

    #[test]
    fn run_directory_layout_and_determinism() {
        let mut cfg = tiny();
        cfg.experts = vec![1, 2];
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        run_experiment(&cfg, &a).unwrap();
        run_experiment(&cfg, &b).unwrap();
        for f in [
            "config.json",
            "report.json",
            "report.csv",
            "train_log.jsonl",
            "model.json",
        ] {
            assert!(a.join(f).exists(), "{f}");
        }
        for m in [1, 2] {
            assert!(a.join(format!("candidates/m{m}/train_log.jsonl")).exists());
        }
        assert!(!a.join(RUNNING_MARKER).exists());
        assert!(!a.join(STALE_MARKER).exists());
        assert_eq!(
            std::fs::read(a.join("report.json")).unwrap(),
            std::fs::read(b.join("report.json")).unwrap()
        );
        let report = ExperimentReport::load(&a.join("report.json")).unwrap();
        assert_eq!(report.schema_version, REPORT_SCHEMA_VERSION);
    }

    #[test]
    fn failure_marks_directory_stale() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            data: DataSource::csv_dir(&dir.path().join("missing")),
            ..tiny()
        };
        let out = dir.path().join("run");
        assert!(run_experiment(&cfg, &out).is_err());
        assert!(out.join(STALE_MARKER).exists());
        assert!(!out.join(RUNNING_MARKER).exists());
    }
}
