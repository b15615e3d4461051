//! Gradient centralization on an FC weight and a conv weight.
//!
//! cargo run --example centralize

use gcfed::gc::{self, AxisMode, ProjectionSpec};
use gcfed::Tensor;

fn main() -> gcfed::Result<()> {
    let fc = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 6.0], &[-1.0, 0.0, 4.0, 1.0]]);
    let spec = ProjectionSpec::default();
    let centered = gc::centralize_mean_sub(&fc, spec)?;
    println!("fc gradient        {:?}", fc.data());
    println!("row means          {:?}", gc::mu_vector(&fc, spec)?.data());
    println!("centralized        {:?}", centered.data());
    println!("means after        {:?}", gc::mu_vector(&centered, spec)?.data());
    println!("explicit projector max diff {:.2e}", gc::centralize_project(&fc, spec)?.max_abs_diff(&centered)?);

    // [C_out, C_in, k, k]: one mean per output channel
    let conv = Tensor::from_fn(&[2, 3, 3, 3], |i| ((i * 7) % 11) as f64 - 5.0);
    for mode in AxisMode::ALL {
        let s = ProjectionSpec::new(mode);
        if let Some(c) = gc::centralize(&conv, s) {
            println!("{mode:?}: |g| {:.3} -> |Pg| {:.3}", conv.norm(), c.norm());
        }
    }
    Ok(())
}
