use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use uvote::data::{generate_synthetic, SplitDataset, SyntheticSpec, TARGET_COLUMN};
use uvote::evaluate::{
    evaluate_model, reports_to_csv, EvalConfig, MetricsReport, ScaleConversion, Strategy,
};
use uvote::experiment::{
    run_experiment, DataSource, ExperimentConfig, ExperimentReport, SelectionMetric, Variant,
};
use uvote::model::UvoteModel;
use uvote::training::{LossKind, Schedule, Weighting};
use uvote::DensityMethod;

#[derive(Parser)]
#[command(
    name = "uvote",
    version,
    about = "Multi-expert regression for imbalanced targets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic long-tailed dataset (train/val/test CSV + meta.json).
    Generate(GenerateArgs),
    /// Train one model and write a run directory.
    Train(RunArgs),
    /// Train one model per expert count and keep the best on validation data.
    Sweep(RunArgs),
    /// Score a saved model on a dataset directory.
    Evaluate(EvaluateArgs),
    /// Print the metrics stored in a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// JSON file with a full generator spec; the flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    imbalance: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Nll,
    L1,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    MinUncertainty,
    Average,
    Oracle,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::MinUncertainty => Strategy::MinUncertainty,
            StrategyArg::Average => Strategy::Average,
            StrategyArg::Oracle => Strategy::Oracle,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    seed: u64,
    /// Experiment config (JSON). Flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with train.csv, val.csv and test.csv. Synthetic data otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = TARGET_COLUMN)]
    target_column: String,
    /// Run directory. Defaults to `runs/NAME-seedSEED`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Ablation preset: uvote, vanilla, nll, n-branch, no-weighting, no-dyl, avg-vote, oracle-vote.
    #[arg(long)]
    variant: Option<String>,
    /// Expert counts, comma separated. `train` takes exactly one.
    #[arg(long, value_delimiter = ',')]
    experts: Option<Vec<usize>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_uncertainty: Option<f64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Train every expert on unweighted data.
    #[arg(long)]
    uniform_weights: bool,
    /// Equal expert weighting from the first epoch.
    #[arg(long)]
    flat_schedule: bool,
    /// Gaussian KDE bandwidth for the target density [default: 2].
    #[arg(long)]
    kde_bandwidth: Option<f64>,
    /// Bin width for shot regions and calibration bins, and for a histogram density.
    #[arg(long)]
    bin_width: Option<f64>,
    #[arg(long, value_enum, value_delimiter = ',')]
    strategies: Option<Vec<StrategyArg>>,
    /// Width of the trunk's hidden layers, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    embedding_dim: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Model checkpoint (model.json).
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory; its train.csv defines the shot regions.
    #[arg(long)]
    data: PathBuf,
    /// Split to score.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = TARGET_COLUMN)]
    target_column: String,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "min-uncertainty"
    )]
    strategies: Vec<StrategyArg>,
    #[arg(long, default_value_t = 1.0)]
    bin_width: f64,
    /// Compare MAE with the Laplace scale instead of the standard deviation.
    #[arg(long)]
    scale_uce: bool,
    #[arg(long)]
    csv: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory or report.json path.
    path: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(n) = args.n {
        spec.n = n;
    }
    if let Some(d) = args.dim {
        spec.dim = d;
    }
    if let Some(f) = args.imbalance {
        spec.imbalance_factor = f;
    }
    let data = generate_synthetic(&spec, args.seed)?;
    data.save_dir(&args.out)?;
    if let Some(meta) = &data.meta {
        println!(
            "wrote {} (train {}, val {}, test {}; imbalance {:.1})",
            args.out.display(),
            meta.split_sizes[0],
            meta.split_sizes[1],
            meta.split_sizes[2],
            meta.realized_imbalance
        );
    }
    Ok(())
}

fn build_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.seed = args.seed;
    if let Some(v) = &args.variant {
        let variant = Variant::parse(v).with_context(|| format!("unknown variant {v:?}"))?;
        variant.apply(&mut cfg);
        if args.name.is_none() && args.config.is_none() {
            cfg.name = variant.name().to_string();
        }
    }
    if let Some(name) = &args.name {
        cfg.name = name.clone();
    }
    if let Some(dir) = &args.data {
        cfg.data = DataSource::Csv {
            train: dir.join("train.csv"),
            val: dir.join("val.csv"),
            test: dir.join("test.csv"),
            target_column: args.target_column.clone(),
        };
    }
    if let Some(e) = &args.experts {
        cfg.experts = e.clone();
    }
    let t = &mut cfg.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.lr_main = v;
    }
    if let Some(v) = args.lr_uncertainty {
        t.lr_uncertainty = v;
    }
    if let Some(l) = args.loss {
        t.loss = match l {
            LossArg::Nll => LossKind::Nll,
            LossArg::L1 => LossKind::L1,
            LossArg::L2 => LossKind::L2,
        };
    }
    if args.uniform_weights {
        t.weighting = Weighting::Uniform;
    }
    if args.flat_schedule {
        t.schedule = Schedule::Flat;
    }
    if let Some(w) = args.bin_width {
        cfg.eval.bin_width = w;
        if let DensityMethod::Histogram { bin_width } = &mut t.density {
            *bin_width = w;
        }
    }
    if let Some(h) = args.kde_bandwidth {
        t.density = DensityMethod::Kde { bandwidth: h };
    }
    if let Some(s) = &args.strategies {
        cfg.strategies = s.iter().map(|&s| s.into()).collect();
    }
    if let Some(h) = &args.hidden {
        cfg.arch.hidden = h.clone();
    }
    if let Some(e) = args.embedding_dim {
        cfg.arch.embedding_dim = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs, sweep: bool) -> anyhow::Result<()> {
    let cfg = build_config(&args)?;
    if !sweep && cfg.experts.len() != 1 {
        bail!(
            "train takes a single expert count; use `sweep` for {:?}",
            cfg.experts
        );
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed{}", cfg.name, cfg.seed)));
    let outcome = run_experiment(&cfg, &out)
        .with_context(|| format!("run failed; {} is marked stale", out.display()))?;
    if sweep {
        for c in &outcome.candidates {
            println!("M={} validation score {:.4}", c.experts, c.score);
        }
        println!(
            "selected M={} by validation {:?}",
            outcome.report.selection.experts, outcome.report.selection.metric
        );
    }
    print_table(&outcome.report.test);
    println!("run directory: {}", out.display());
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

fn print_table(reports: &[MetricsReport]) {
    println!(
        "{:<16} {:<7} {:>6} {:>8} {:>8} {:>8} {:>8}",
        "strategy", "region", "count", "mae", "rmse", "pearson", "uce"
    );
    for r in reports {
        for (name, m) in [
            ("all", &r.all),
            ("many", &r.many),
            ("medium", &r.medium),
            ("few", &r.few),
        ] {
            println!(
                "{:<16} {:<7} {:>6} {:>8} {:>8} {:>8} {:>8}",
                r.strategy.as_str(),
                name,
                m.count,
                fmt(m.mae),
                fmt(m.rmse),
                fmt(m.pearson),
                fmt(m.uce)
            );
        }
    }
}

fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let model = UvoteModel::load(&args.model)?;
    let data = SplitDataset::load_dir(&args.data, &args.target_column)?;
    let split = match args.split.as_str() {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => bail!("unknown split {other:?} (expected train, val or test)"),
    };
    let eval = EvalConfig {
        bin_width: args.bin_width,
        conversion: if args.scale_uce {
            ScaleConversion::Scale
        } else {
            ScaleConversion::StdDev
        },
    };
    let reports = args
        .strategies
        .iter()
        .map(|&s| evaluate_model(&model, &data.train.targets, split, s.into(), &eval))
        .collect::<uvote::Result<Vec<_>>>()?;
    if args.csv {
        print!("{}", reports_to_csv(&reports));
    } else {
        print_table(&reports);
    }
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    let path = if args.path.is_dir() {
        args.path.join("report.json")
    } else {
        args.path.clone()
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    if dir.join(uvote::experiment::STALE_MARKER).exists() {
        eprintln!("warning: {} is marked stale", dir.display());
    }
    let report = ExperimentReport::load(&path)?;
    match args.format {
        Format::Json => print!("{}", report.to_json()?),
        Format::Csv => print!("{}", report.to_csv()),
        Format::Table => {
            let metric = match report.selection.metric {
                SelectionMetric::Pearson => "pearson",
                _ => "mae",
            };
            println!(
                "{} (seed {}): selected M={} by validation {metric} of {}",
                report.name, report.seed, report.selection.experts, report.selection.strategy
            );
            print_table(&report.test);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => run(a, false),
        Command::Sweep(a) => run(a, true),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
