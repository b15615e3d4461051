//! Layer-wise linear CKA between two independently trained models.
//!
//! cargo run --release --example cka

use gcfed::config::{DatasetSpec, ExperimentConfig, StrategyName};
use gcfed::engine::Simulation;
use gcfed::metrics::linear_cka;
use gcfed::nn::layer_activations;

fn main() -> gcfed::Result<()> {
    let mut cfg = ExperimentConfig::new(DatasetSpec::default(), StrategyName::Gcfed);
    cfg.rounds = 30;
    let (train, test) = cfg.load_data(None)?;
    let a = Simulation::new(&cfg, &train, &test)?.run()?.model;
    cfg.seed = 1;
    let b = Simulation::new(&cfg, &train, &test)?.run()?.model;

    let (x, _) = test.truncate(512).all();
    let (ta, tb) = (layer_activations(&a, &x)?, layer_activations(&b, &x)?);
    for (l, (u, v)) in ta.iter().zip(&tb).enumerate() {
        println!("layer {l}: cka {:.4}  self {:.4}", linear_cka(u, v)?, linear_cka(u, u)?);
    }
    Ok(())
}
