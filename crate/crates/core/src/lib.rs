//! Multi-expert regression for imbalanced targets with uncertainty-based voting.
//!
//! A shared trunk feeds `M` affine expert heads, each predicting a target and
//! a Laplace log-scale. Expert `m` is trained with sample weights
//! `(1/f)^{m/(M−1)}` where `f` is the target density, and predictions are fused
//! per sample by picking the expert with the smallest predicted scale.
//!
//! ```no_run
//! use uvote::{run_experiment, ExperimentConfig};
//!
//! let config = ExperimentConfig { seed: 7, ..ExperimentConfig::default() };
//! let outcome = run_experiment(&config, std::path::Path::new("runs/demo")).unwrap();
//! println!("{}", outcome.report.to_json().unwrap());
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod density;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod training;

pub use data::{generate_synthetic, load_csv, Dataset, SplitDataset, SyntheticMeta, SyntheticSpec};
pub use density::{
    expert_weights, kde_density, DensityMethod, HistogramDensity, KdeDensity, WeightTable,
};
pub use error::{Error, Result};
pub use evaluate::{
    aggregate, evaluate_model, mae, pearson_pct, rmse, shot_partition, uce, AggregatedPrediction,
    EvalConfig, MetricsReport, Region, RegionMetrics, ScaleConversion, ShotPartition, Strategy,
};
pub use experiment::{
    run, run_experiment, run_on, ArchConfig, DataSource, ExperimentConfig, ExperimentOutcome,
    ExperimentReport, SelectionMetric, Variant,
};
pub use model::{build_model, ArchSpec, ExpertOutput, TargetScaling, UvoteModel};
pub use nn::{Activation, Matrix};
pub use training::{
    composite_objective, dynamic_alpha, laplace_nll, prepare_weights, train, LossBreakdown,
    LossKind, Schedule, TrainConfig, TrainLog, Weighting,
};
