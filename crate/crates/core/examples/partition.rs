//! Dirichlet label partitions at several concentrations.
//!
//! cargo run --example partition

use gcfed::data::{generate_synthetic, SyntheticTaskSpec};
use gcfed::partition::{lda_partition, partition_stats};

fn main() -> gcfed::Result<()> {
    let (train, _) = generate_synthetic(&SyntheticTaskSpec::default())?;
    println!("{:>7} {:>8} {:>8} {:>12} {:>13}", "alpha", "min", "max", "mean H(y)", "single-class");
    for alpha in [0.01, 0.1, 1.0, 10.0, 1000.0] {
        let plan = lda_partition(&train.labels, train.num_classes, 50, alpha, 0)?;
        let s = partition_stats(&plan);
        println!("{alpha:>7} {:>8} {:>8} {:>12.3} {:>13}", s.min_size, s.max_size, s.mean_entropy, s.single_class_clients);
    }
    Ok(())
}
