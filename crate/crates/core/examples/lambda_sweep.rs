//! Sweep the GC-Fed layer borderline and print the merged table.
//!
//! cargo run --release --example lambda_sweep -- [out]

use std::path::PathBuf;

use gcfed::config::{DatasetSpec, ExperimentConfig, StrategyName};
use gcfed::runner;

fn main() -> gcfed::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let mut cfg = ExperimentConfig::new(DatasetSpec::default(), StrategyName::Gcfed);
    cfg.rounds = 40;
    let values: Vec<String> = ["0", "0.5", "1"].iter().map(|s| s.to_string()).collect();
    let res = runner::sweep(&cfg, None, "gc.lambda", &values, 2, &runner::output_root(out.as_deref()))?;
    for r in &res.rows {
        println!("lambda {:>4} seed {}  final {:.2}", r.value, r.seed, r.final_smoothed_accuracy.unwrap_or(f64::NAN));
    }
    println!("{}", res.dir.join("sweep.csv").display());
    Ok(())
}
