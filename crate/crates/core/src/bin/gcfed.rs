use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gcfed::runner;
use gcfed::theory;
use gcfed::ExperimentConfig;

#[derive(Parser)]
#[command(name = "gcfed", version, about = "Federated learning with gradient centralization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write a timestamped run directory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output root; overrides $GCFED_OUT.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Verify the one-step gap identities on quadratic problems.
    TheoryCheck {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print partition statistics as JSON.
    PartitionStats {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a one-key grid across seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=v1,v2,...`, e.g. `gc.lambda=0,0.5,1`.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path) -> gcfed::Result<(ExperimentConfig, Option<PathBuf>)> {
    let cfg = ExperimentConfig::load(path)?;
    let base = path.parent().map(Path::to_path_buf);
    Ok((cfg, base))
}

fn run(cli: Cli) -> gcfed::Result<bool> {
    match cli.command {
        Command::Simulate { config, out, workers } => {
            let (mut cfg, base) = load(&config)?;
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let root = runner::output_root(out.as_deref());
            let art = runner::simulate(&cfg, base.as_deref(), &root)?;
            println!("{}", art.dir.display());
            println!("{}", serde_json::to_string_pretty(&art.summary)?);
            Ok(true)
        }
        Command::TheoryCheck { trials, seed } => {
            let suite = theory::run_suite(trials, seed)?;
            let r = &suite.example;
            println!("gap_before        {:.6e}", r.gap_before);
            println!("gap_after_fedavg  {:.6e}", r.gap_after_fedavg);
            println!("gap_after_gc      {:.6e}", r.gap_after_gc);
            println!("b2_term           {:.6e}", r.b2_term);
            println!("a2_term           {:.6e}", r.a2_term);
            println!("residual_bound    {:.6e}", r.residual_bound);
            let s = &suite.stochastic;
            println!(
                "monte-carlo ({} trials, sigma {}): reduction {:.6e} vs predicted {:.6e}, E[A3] {:.3e} +- {:.3e}",
                s.trials, s.sigma, s.empirical_reduction, s.predicted_reduction, s.a3_mean, s.a3_std_error
            );
            println!();
            for c in &suite.checks {
                println!(
                    "{}  {:<55} {:>12.4e}  (tol {:.0e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                );
            }
            Ok(suite.passed())
        }
        Command::PartitionStats { config } => {
            let (cfg, base) = load(&config)?;
            let stats = runner::partition_stats_for(&cfg, base.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(true)
        }
        Command::Sweep { config, grid, seeds, out } => {
            let (cfg, base) = load(&config)?;
            let (key, values) = runner::parse_grid(&grid)?;
            let root = runner::output_root(out.as_deref());
            let res = runner::sweep(&cfg, base.as_deref(), &key, &values, seeds, &root)?;
            println!("{}", res.dir.display());
            for r in &res.rows {
                println!(
                    "{}={} seed {}  final {:.4}",
                    r.key,
                    r.value,
                    r.seed,
                    r.final_smoothed_accuracy.unwrap_or(f64::NAN)
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
