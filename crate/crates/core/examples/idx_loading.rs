//! Load an IDX image/label pair (MNIST layout).
//!
//! cargo run --example idx_loading -- <images> <labels>

use std::path::PathBuf;

use gcfed::data::load_idx;

fn main() -> gcfed::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut args = std::env::args().skip(1).map(PathBuf::from);
    let images = args.next().unwrap_or_else(|| fixtures.join("four-images-idx3-ubyte"));
    let labels = args.next().unwrap_or_else(|| fixtures.join("four-labels-idx1-ubyte"));

    let ds = load_idx(&images, &labels, None, None)?;
    println!("{} samples of shape {:?}, {} classes", ds.len(), ds.sample_shape, ds.num_classes);
    let counts = ds.class_counts();
    let present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    println!("labels present: {present:?}");
    Ok(())
}
