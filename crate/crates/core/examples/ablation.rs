//! Trains every ablation variant on the synthetic benchmark and prints
//! test MAE and few-shot calibration.
//!
//! ```text
//! cargo run --release -p uvote --example ablation -- [seeds] [epochs]
//! ```

use uvote::experiment::{run_on, ExperimentConfig, Variant};

fn main() -> uvote::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(60);

    println!(
        "{:<13} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "variant", "seed", "all", "many", "medium", "few", "few-uce"
    );
    for seed in 0..seeds {
        let mut base = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        base.train.epochs = epochs;
        let data = base.data.load(seed)?;
        for variant in Variant::ALL {
            let mut cfg = base.clone();
            variant.apply(&mut cfg);
            cfg.strategies.truncate(1);
            let out = run_on(&cfg, &data)?;
            let r = &out.report.test[0];
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
            println!(
                "{:<13} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8}",
                variant.name(),
                seed,
                f(r.all.mae),
                f(r.many.mae),
                f(r.medium.mae),
                f(r.few.mae),
                f(r.few.uce)
            );
        }
    }
    Ok(())
}
