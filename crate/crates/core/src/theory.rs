//! One-step gap analysis of projected vs plain federated gradient steps on
//! quadratic client objectives `F_k(w) = 1/2 ||w - c_k||^2`.
//!
//! Parameters are single FC weight matrices `[F_out, F_in]`; the projector
//! `P` is the default gradient centralization (row-wise mean removal), and
//! `e e^T X = X - P X` is the component along the all-ones direction.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gc::{self, ProjectionSpec};
use crate::seed::{self, tags};
use crate::tensor::Tensor;

pub fn project(x: &Tensor) -> Tensor {
    gc::centralize_mean_sub(x, ProjectionSpec::default()).expect("FC-shaped tensor")
}

/// `e e^T X`.
pub fn mean_component(x: &Tensor) -> Tensor {
    x.sub(&project(x)).expect("same shape")
}

/// `||e^T X||^2`.
pub fn mean_component_sq(x: &Tensor) -> f64 {
    mean_component(x).sum_sq()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    pub centers: Vec<Tensor>,
    pub weights: Vec<f64>,
    pub l_smooth: f64,
}

impl QuadraticProblem {
    pub fn new(centers: Vec<Tensor>, weights: Vec<f64>) -> Result<Self> {
        if centers.is_empty() || centers.len() != weights.len() {
            return Err(Error::config("weights", "need one positive weight per center"));
        }
        if weights.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::config("weights", "weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config("weights", format!("weights sum to {total}, not 1")));
        }
        let shape = centers[0].shape().to_vec();
        if shape.len() != 2 || centers.iter().any(|c| c.shape() != shape.as_slice()) {
            return Err(Error::shape("centers", &shape, centers.iter().find(|c| c.shape() != shape.as_slice()).map_or(&[][..], |c| c.shape())));
        }
        Ok(Self {
            centers,
            weights,
            l_smooth: 1.0,
        })
    }

    /// Random centers and weights. With `centered_optimum` the centers are
    /// shifted so that `w* = P w*`.
    pub fn random<R: Rng + ?Sized>(clients: usize, shape: [usize; 2], centered_optimum: bool, rng: &mut R) -> Self {
        let mut centers: Vec<Tensor> = (0..clients).map(|_| gaussian(&shape, 1.0, rng)).collect();
        let raw: Vec<f64> = (0..clients).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|r| r / total).collect();
        if centered_optimum {
            let shift = mean_component(&weighted_sum(&centers, &weights));
            for c in &mut centers {
                *c = c.sub(&shift).expect("same shape");
            }
        }
        Self {
            centers,
            weights,
            l_smooth: 1.0,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.centers[0].shape()
    }

    pub fn optimum(&self) -> Tensor {
        weighted_sum(&self.centers, &self.weights)
    }

    pub fn client_grad(&self, k: usize, w: &Tensor) -> Tensor {
        w.sub(&self.centers[k]).expect("same shape")
    }

    /// `sum_k p_k grad F_k(w)`.
    pub fn mean_grad(&self, w: &Tensor) -> Tensor {
        let grads: Vec<Tensor> = (0..self.centers.len()).map(|k| self.client_grad(k, w)).collect();
        weighted_sum(&grads, &self.weights)
    }

    /// `F(w) = sum_k p_k F_k(w)`.
    pub fn objective(&self, w: &Tensor) -> f64 {
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(c, p)| p * 0.5 * w.sub(c).expect("same shape").sum_sq())
            .sum()
    }
}

fn gaussian<R: Rng + ?Sized>(shape: &[usize], sigma: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn weighted_sum(xs: &[Tensor], ws: &[f64]) -> Tensor {
    let mut acc = Tensor::zeros(xs[0].shape());
    for (x, &w) in xs.iter().zip(ws) {
        acc.axpy(w, x).expect("same shape");
    }
    acc
}

/// A centered random matrix (`P x = x`).
pub fn random_centered<R: Rng + ?Sized>(shape: [usize; 2], rng: &mut R) -> Tensor {
    project(&gaussian(&shape, 1.0, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Plain,
    Projected,
}

/// Per-client perturbations added to `grad F_k(w0)`.
pub type ClientNoise<'a> = Option<&'a [Tensor]>;

/// Aggregated (stochastic) gradient `G = sum_k p_k (grad F_k(w0) + xi_k)`.
pub fn aggregated_grad(problem: &QuadraticProblem, w0: &Tensor, noise: ClientNoise) -> Tensor {
    let grads: Vec<Tensor> = (0..problem.centers.len())
        .map(|k| {
            let mut g = problem.client_grad(k, w0);
            if let Some(xi) = noise {
                g.axpy(1.0, &xi[k]).expect("same shape");
            }
            g
        })
        .collect();
    weighted_sum(&grads, &problem.weights)
}

/// One synchronized step from `w0`, returning `||w1 - w*||^2`. Projecting
/// each client gradient before averaging equals projecting the average,
/// since `P` is linear.
pub fn one_step_gap(problem: &QuadraticProblem, w0: &Tensor, eta: f64, kind: StepKind, noise: ClientNoise) -> f64 {
    let mut g = aggregated_grad(problem, w0, noise);
    if kind == StepKind::Projected {
        g = project(&g);
    }
    let mut w1 = w0.clone();
    w1.axpy(-eta, &g).expect("same shape");
    w1.sub(&problem.optimum()).expect("same shape").sum_sq()
}

/// `(eta^2 ||e^T G_bar||^2, eta^2 ||e^T (G - G_bar)||^2)`.
pub fn gap_reduction_terms(g_stoch: &Tensor, g_mean: &Tensor, eta: f64) -> Result<(f64, f64)> {
    let dev = g_stoch.sub(g_mean)?;
    Ok((eta * eta * mean_component_sq(g_mean), eta * eta * mean_component_sq(&dev)))
}

/// Decomposition of the gap after one step into the named terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub gap_before: f64,
    pub gap_after_fedavg: f64,
    pub gap_after_gc: f64,
    pub b2_term: f64,
    pub a2_term: f64,
    /// `-2 eta <w0 - w*, e e^T G_bar>`: the plain-minus-projected B1
    /// difference, zero when both `w0` and `w*` are centered.
    pub b1_difference: f64,
    /// `(L/2) ||e e^T w*||^2`.
    pub residual_bound: f64,
}

impl GapReport {
    /// Gap difference minus its predicted value.
    pub fn identity_error(&self) -> f64 {
        (self.gap_after_fedavg - self.gap_after_gc) - (self.b2_term + self.a2_term + self.b1_difference)
    }
}

pub fn gap_report(problem: &QuadraticProblem, w0: &Tensor, eta: f64, noise: ClientNoise) -> GapReport {
    let w_star = problem.optimum();
    let d = w0.sub(&w_star).expect("same shape");
    let g_bar = problem.mean_grad(w0);
    let g = aggregated_grad(problem, w0, noise);
    let (b2_term, a2_term) = gap_reduction_terms(&g, &g_bar, eta).expect("same shape");
    let plain = one_step_gap(problem, w0, eta, StepKind::Plain, noise);
    let proj = one_step_gap(problem, w0, eta, StepKind::Projected, noise);
    // Cross terms between the deterministic and the noise parts of the
    // mean-direction component. They vanish when d is centered, and with
    // them the A3 difference.
    let m_d = mean_component(&d);
    let m_gbar = mean_component(&g_bar);
    let m_dev = mean_component(&g.sub(&g_bar).expect("same shape"));
    let b1_difference = -2.0 * eta * m_d.dot(&m_gbar).expect("same shape")
        - 2.0 * eta * m_d.dot(&m_dev).expect("same shape")
        + 2.0 * eta * eta * m_gbar.dot(&m_dev).expect("same shape");
    GapReport {
        gap_before: d.sum_sq(),
        gap_after_fedavg: plain,
        gap_after_gc: proj,
        b2_term,
        a2_term,
        b1_difference,
        residual_bound: 0.5 * problem.l_smooth * mean_component_sq(&w_star),
    }
}

/// Monte-Carlo comparison of the mean gap reduction with its analytic
/// expectation under i.i.d. Gaussian client noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectedGapReport {
    pub trials: usize,
    pub sigma: f64,
    pub empirical_reduction: f64,
    pub predicted_reduction: f64,
    pub relative_error: f64,
    pub reduction_std_error: f64,
    /// Mean and standard error of `A3` for the projected step.
    pub a3_mean: f64,
    pub a3_std_error: f64,
    pub empirical_a2: f64,
    /// `eta^2 E||G - G_bar||^2`, the unprojected noise energy.
    pub full_noise_energy: f64,
}

impl ExpectedGapReport {
    pub fn a3_within(&self, k_se: f64) -> bool {
        self.a3_mean.abs() <= k_se * self.a3_std_error
    }
}

pub fn expected_gap_identity_check(
    problem: &QuadraticProblem,
    w0: &Tensor,
    eta: f64,
    sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<ExpectedGapReport> {
    if trials == 0 {
        return Err(Error::config("trials", "need at least one trial"));
    }
    let shape = problem.shape().to_vec();
    let g_bar = problem.mean_grad(w0);
    let g_bar_proj = project(&g_bar);
    let d = w0.sub(&problem.optimum())?;
    let mut anchor = d.clone();
    anchor.axpy(-eta, &g_bar_proj)?;

    // (reduction, A3, A2) per trial, collected in trial order.
    let per_trial: Vec<(f64, f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::stream(seed, tags::NOISE, &[t as u64]);
            let noise: Vec<Tensor> = (0..problem.centers.len()).map(|_| gaussian(&shape, sigma, &mut rng)).collect();
            let plain = one_step_gap(problem, w0, eta, StepKind::Plain, Some(&noise));
            let proj = one_step_gap(problem, w0, eta, StepKind::Projected, Some(&noise));
            let g = aggregated_grad(problem, w0, Some(&noise));
            let dev_proj = project(&g).sub(&g_bar_proj).expect("same shape");
            let a3 = 2.0 * eta * anchor.dot(&dev_proj).expect("same shape");
            let (_, a2) = gap_reduction_terms(&g, &g_bar, eta).expect("same shape");
            (plain - proj, a3, a2)
        })
        .collect();

    let n = trials as f64;
    let mean = |f: fn(&(f64, f64, f64)) -> f64| per_trial.iter().map(f).sum::<f64>() / n;
    let empirical_reduction = mean(|r| r.0);
    let a3_mean = mean(|r| r.1);
    let empirical_a2 = mean(|r| r.2);
    let var = |f: fn(&(f64, f64, f64)) -> f64, m: f64| per_trial.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let a3_var = var(|r| r.1, a3_mean);
    let reduction_var = var(|r| r.0, empirical_reduction);

    let sum_p2: f64 = problem.weights.iter().map(|p| p * p).sum();
    let f_out = shape[0] as f64;
    let f_in = shape[1] as f64;
    let expected_a2 = eta * eta * f_out * sigma * sigma * sum_p2;
    let predicted_reduction = eta * eta * mean_component_sq(&g_bar) + expected_a2
        - 2.0 * eta * mean_component(&d).dot(&mean_component(&g_bar))?;
    let relative_error = if predicted_reduction == 0.0 {
        empirical_reduction.abs()
    } else {
        ((empirical_reduction - predicted_reduction) / predicted_reduction).abs()
    };
    Ok(ExpectedGapReport {
        trials,
        sigma,
        empirical_reduction,
        predicted_reduction,
        relative_error,
        reduction_std_error: (reduction_var / n).sqrt(),
        a3_mean,
        a3_std_error: (a3_var / n).sqrt(),
        empirical_a2,
        full_noise_energy: eta * eta * f_out * f_in * sigma * sigma * sum_p2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualCheck {
    /// `F(P w*) - F(w*)`.
    pub lhs: f64,
    /// `(L/2) ||e e^T w*||^2`.
    pub rhs: f64,
    pub holds: bool,
}

/// Residual of converging to `P w*` instead of `w*`, on the objective
/// `F(w) = 1/2 ||w - w*||^2`.
pub fn residual_bound_check(w_star: &Tensor, l_smooth: f64) -> ResidualCheck {
    let projected = project(w_star);
    let f = |w: &Tensor| 0.5 * l_smooth * w.sub(w_star).expect("same shape").sum_sq();
    let lhs = f(&projected) - f(w_star);
    let rhs = 0.5 * l_smooth * mean_component_sq(w_star);
    ResidualCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-12,
    }
}

/// Run `steps` projected full-participation steps from `w0` and return the
/// largest `|mean|` seen over all rows of all iterates.
pub fn projected_trajectory_drift(problem: &QuadraticProblem, w0: &Tensor, eta: f64, steps: usize) -> f64 {
    let mut w = w0.clone();
    let spec = ProjectionSpec::default();
    let mut worst = gc::mu_vector(&w, spec).expect("FC shape").max_abs();
    for _ in 0..steps {
        let g = project(&problem.mean_grad(&w));
        w.axpy(-eta, &g).expect("same shape");
        worst = worst.max(gc::mu_vector(&w, spec).expect("FC shape").max_abs());
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheorySuite {
    pub checks: Vec<Check>,
    pub example: GapReport,
    pub stochastic: ExpectedGapReport,
}

impl TheorySuite {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub const SHAPE: [usize; 2] = [8, 16];
pub const ETA: f64 = 0.3;

/// The full battery run by `theory-check`.
pub fn run_suite(trials: usize, seed: u64) -> Result<TheorySuite> {
    let mut checks = Vec::new();
    let mut push = |name, value: f64, tolerance: f64| {
        checks.push(Check {
            name,
            value,
            tolerance,
            passed: value <= tolerance,
        })
    };

    let mut worst_det = 0.0f64;
    let mut worst_general = 0.0f64;
    let mut worst_drift = 0.0f64;
    let mut worst_ordering = 0.0f64;
    for i in 0..50u64 {
        let mut rng = seed::stream(seed, "theory.deterministic", &[i]);
        let p = QuadraticProblem::random(5, SHAPE, true, &mut rng);
        let w0 = random_centered(SHAPE, &mut rng);
        let r = gap_report(&p, &w0, ETA, None);
        worst_det = worst_det.max(((r.gap_after_fedavg - r.gap_after_gc) - r.b2_term).abs());
        worst_ordering = worst_ordering.max(r.gap_after_gc - r.gap_after_fedavg);
        worst_drift = worst_drift.max(projected_trajectory_drift(&p, &w0, ETA, 100));

        let q = QuadraticProblem::random(5, SHAPE, false, &mut rng);
        let v0 = gaussian(&SHAPE, 1.0, &mut rng);
        let noise: Vec<Tensor> = (0..5).map(|_| gaussian(&SHAPE, 0.1, &mut rng)).collect();
        worst_general = worst_general.max(gap_report(&q, &v0, ETA, Some(&noise)).identity_error().abs());
    }
    push("centered gap identity |diff - eta^2 ||e^T G_bar||^2|", worst_det, 1e-10);
    push("general gap decomposition |error|", worst_general, 1e-10);
    push("projected gap exceeds plain gap by", worst_ordering.max(0.0), 1e-12);
    push("projected iterate row-mean drift", worst_drift, 1e-12);

    let mut rng = seed::stream(seed, "theory.stochastic", &[]);
    let p = QuadraticProblem::random(5, SHAPE, true, &mut rng);
    let w0 = random_centered(SHAPE, &mut rng);
    let stochastic = expected_gap_identity_check(&p, &w0, ETA, 0.1, trials, seed)?;
    push(
        "expected gap reduction |empirical - predicted| / SE",
        (stochastic.empirical_reduction - stochastic.predicted_reduction).abs() / stochastic.reduction_std_error.max(f64::MIN_POSITIVE),
        4.0,
    );
    push("|E[A3]| / standard error", stochastic.a3_mean.abs() / stochastic.a3_std_error.max(f64::MIN_POSITIVE), 3.0);
    push(
        "E[A2] above unprojected noise energy by",
        (stochastic.empirical_a2 - stochastic.full_noise_energy).max(0.0),
        0.0,
    );

    let mut worst_residual = f64::NEG_INFINITY;
    let mut worst_equality = 0.0f64;
    for i in 0..100u64 {
        let mut rng = seed::stream(seed, "theory.residual", &[i]);
        let w = gaussian(&SHAPE, 1.0, &mut rng);
        let r = residual_bound_check(&w, 1.0);
        worst_residual = worst_residual.max(r.lhs - r.rhs);
        worst_equality = worst_equality.max((r.lhs - r.rhs).abs());
    }
    push("residual bound lhs - rhs", worst_residual.max(0.0), 1e-12);
    push("residual equality |lhs - rhs|", worst_equality, 1e-12);

    let example = gap_report(&p, &w0, ETA, None);
    Ok(TheorySuite {
        checks,
        example,
        stochastic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(i: u64) -> crate::seed::SimRng {
        seed::stream(11, "theory.test", &[i])
    }

    #[test]
    fn zero_step_keeps_gap() {
        let mut r = rng(0);
        let p = QuadraticProblem::random(3, [2, 4], false, &mut r);
        let w0 = gaussian(&[2, 4], 1.0, &mut r);
        let before = w0.sub(&p.optimum()).unwrap().sum_sq();
        assert_eq!(one_step_gap(&p, &w0, 0.0, StepKind::Plain, None), before);
        assert_eq!(one_step_gap(&p, &w0, 0.0, StepKind::Projected, None), before);
    }

    #[test]
    fn unit_step_on_single_client_lands_on_optimum() {
        let p = QuadraticProblem::new(vec![Tensor::zeros(&[2, 3])], vec![1.0]).unwrap();
        let w0 = Tensor::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 0.0, 1.0]]);
        assert_eq!(one_step_gap(&p, &w0, 1.0, StepKind::Plain, None), 0.0);
    }

    #[test]
    fn terms_vanish_for_centered_noiseless_gradients() {
        let mut r = rng(1);
        let g = random_centered([3, 5], &mut r);
        let (b2, a2) = gap_reduction_terms(&g, &g, 0.7).unwrap();
        assert!(b2 < 1e-28);
        assert_eq!(a2, 0.0);
        let h = gaussian(&[3, 5], 1.0, &mut r);
        assert_eq!(gap_reduction_terms(&h, &h, 0.7).unwrap().1, 0.0);
    }

    #[test]
    fn terms_match_explicit_projector() {
        let mut r = rng(2);
        let (rows, cols, eta) = (4usize, 6usize, 0.4);
        let g = gaussian(&[rows, cols], 1.0, &mut r);
        let gb = gaussian(&[rows, cols], 1.0, &mut r);
        // e e^T on the reduced axis, then the row-wise product X (e e^T).
        let e = 1.0 / (cols as f64).sqrt();
        let eet = vec![vec![e * e; cols]; cols];
        let along = |x: &Tensor| {
            let mut s = 0.0;
            for i in 0..rows {
                for j in 0..cols {
                    let v: f64 = (0..cols).map(|k| x.data()[i * cols + k] * eet[k][j]).sum();
                    s += v * v;
                }
            }
            s
        };
        let (b2, a2) = gap_reduction_terms(&g, &gb, eta).unwrap();
        assert!((b2 - eta * eta * along(&gb)).abs() < 1e-12);
        assert!((a2 - eta * eta * along(&g.sub(&gb).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn residual_examples() {
        let mut r = rng(3);
        let w = random_centered([3, 4], &mut r);
        let c = residual_bound_check(&w, 1.0);
        assert!(c.lhs.abs() < 1e-28 && c.rhs < 1e-28 && c.holds);

        let m = 9;
        let ones = Tensor::full(&[1, m], 1.0);
        let c = residual_bound_check(&ones, 1.0);
        assert!((c.lhs - 0.5 * m as f64).abs() < 1e-12);
        assert!((c.rhs - 0.5 * m as f64).abs() < 1e-12);
        assert!(c.holds);
    }

    #[test]
    fn centered_construction_has_centered_optimum() {
        let mut r = rng(4);
        let p = QuadraticProblem::random(4, [3, 7], true, &mut r);
        assert!(mean_component(&p.optimum()).max_abs() < 1e-14);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let w = gaussian(&[3, 7], 1.0, &mut r);
        // F(w) - F(w*) = 1/2 ||w - w*||^2 on this family
        let lhs = p.objective(&w) - p.objective(&p.optimum());
        assert!((lhs - 0.5 * w.sub(&p.optimum()).unwrap().sum_sq()).abs() < 1e-10);
    }

    #[test]
    fn noiseless_expected_check_is_exact() {
        let mut r = rng(5);
        let p = QuadraticProblem::random(3, [4, 6], true, &mut r);
        let w0 = random_centered([4, 6], &mut r);
        let rep = expected_gap_identity_check(&p, &w0, 0.2, 0.0, 3, 0).unwrap();
        assert!((rep.empirical_reduction - rep.predicted_reduction).abs() < 1e-10);
    }

    #[test]
    fn invalid_problems_rejected() {
        let c = vec![Tensor::zeros(&[2, 2])];
        assert!(QuadraticProblem::new(c.clone(), vec![0.5]).is_err());
        assert!(QuadraticProblem::new(c, vec![-1.0]).is_err());
        assert!(QuadraticProblem::new(vec![], vec![]).is_err());
    }
}
