//! One-step gap on a quadratic federated problem, plain vs projected.
//!
//! cargo run --release --example theory_check -- [trials]

use gcfed::theory::{self, StepKind, QuadraticProblem};
use gcfed::seed;

fn main() -> gcfed::Result<()> {
    let trials = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2000);
    let mut rng = seed::stream(1, "example", &[]);

    let p = QuadraticProblem::random(6, theory::SHAPE, true, &mut rng);
    let w0 = theory::random_centered(theory::SHAPE, &mut rng);
    for kind in [StepKind::Plain, StepKind::Projected] {
        println!("{kind:?}: gap {:.6}", theory::one_step_gap(&p, &w0, theory::ETA, kind, None));
    }
    let r = theory::gap_report(&p, &w0, theory::ETA, None);
    println!("b2 {:.6}  identity error {:.2e}", r.b2_term, r.identity_error());

    let suite = theory::run_suite(trials, 0)?;
    for c in &suite.checks {
        println!("{} {}", if c.passed { "ok  " } else { "FAIL" }, c.name);
    }
    Ok(())
}
