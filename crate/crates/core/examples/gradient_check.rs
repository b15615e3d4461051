//! Backprop against central finite differences on a small CNN.
//!
//! cargo run --release --example gradient_check

use gcfed::nn::{build_model, finite_diff_grad, loss_and_grad, ArchSpec};
use gcfed::{seed, Tensor};
use rand::Rng;

fn main() -> gcfed::Result<()> {
    let arch = ArchSpec::Cnn { input: vec![1, 8, 8], channels: vec![3, 4], kernel: 3, hidden: vec![6], classes: 5 };
    let mut rng = seed::stream(7, "example", &[]);
    let model = build_model(&arch, &mut rng)?;
    let batch = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
    let labels = [0, 3, 1, 4];

    let (loss, grads) = loss_and_grad(&model, &batch, &labels, None)?;
    let fd = finite_diff_grad(&model, &batch, &labels, 1e-5, None)?;
    println!("loss {loss:.6}");
    for (i, (g, f)) in grads.iter().zip(&fd).enumerate() {
        let rel = g.max_abs_diff(f)? / f.max_abs().max(1e-6);
        println!("group {i} {:?}: rel err {rel:.2e}", g.shape());
    }
    Ok(())
}
