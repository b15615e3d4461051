//! FedAvg, Local GC, Global GC and GC-Fed on the same non-IID synthetic
//! split, several seeds each.
//!
//! cargo run --release --example compare_strategies -- [seeds] [rounds]

use gcfed::config::{DatasetSpec, ExperimentConfig, StrategyName};
use gcfed::engine::Simulation;
use gcfed::metrics::RunSummary;

fn main() -> gcfed::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = args.first().copied().unwrap_or(3) as u64;
    let rounds = args.get(1).copied().unwrap_or(200);

    let strategies = [
        StrategyName::Fedavg,
        StrategyName::LocalGc,
        StrategyName::GlobalGc,
        StrategyName::Gcfed,
    ];
    println!("{:<10} {:>4} {:>9} {:>9} {:>9} {:>9} {:>8}", "strategy", "seed", "final", "peak", "fo_std", "fo_min", "cka0");
    for seed in 0..seeds {
        let mut base = ExperimentConfig::new(DatasetSpec::default(), StrategyName::Fedavg);
        base.seed = seed;
        base.rounds = rounds;
        base.measure.cka_every = rounds;
        let (train, test) = base.load_data(None)?;
        for s in strategies {
            let mut cfg = base.clone();
            cfg.strategy = s;
            let out = Simulation::new(&cfg, &train, &test)?.run()?;
            let summary = RunSummary::from_accuracies(&out.accuracies(), cfg.measure.smoothing_window);
            let cka0 = out.records.last().and_then(|r| r.cka.as_ref()).map_or(f64::NAN, |c| c[0]);
            println!(
                "{:<10} {:>4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>8.4}",
                s.as_str(),
                seed,
                summary.final_smoothed_accuracy.unwrap_or(f64::NAN),
                summary.peak_smoothed_accuracy.unwrap_or(f64::NAN),
                summary.first_order_std.unwrap_or(f64::NAN),
                summary.first_order_min.unwrap_or(f64::NAN),
                cka0
            );
        }
    }
    Ok(())
}
