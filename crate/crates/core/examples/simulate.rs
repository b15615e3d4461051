//! Run one experiment from a TOML config and write a run directory.
//!
//! cargo run --release --example simulate -- [config] [out]

use std::path::{Path, PathBuf};

use gcfed::runner;
use gcfed::ExperimentConfig;

fn main() -> gcfed::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/desk.toml"));
    let out = args.next().map(PathBuf::from);

    let cfg = ExperimentConfig::load(&config)?;
    let art = runner::simulate(&cfg, config.parent(), &runner::output_root(out.as_deref()))?;
    for r in &art.output.records {
        println!("round {:>3}  acc {:6.2}  |dw| {:.4}", r.round, r.accuracy, r.update_norm);
    }
    println!("wrote {}", art.dir.display());
    Ok(())
}
