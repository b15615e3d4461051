//! Acceptance battery. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::{Duration, Instant};

use gcfed::config::{DatasetSpec, ExperimentConfig, StrategyName};
use gcfed::data::Dataset;
use gcfed::engine::{aggregate, apply_global_gc, Aggregation, RunOutput, Simulation, StrategyKind, UpdateDelta};
use gcfed::gc::{self, AxisMode, ProjectionSpec};
use gcfed::metrics::{linear_cka, RunSummary};
use gcfed::nn::{self, build_model, ArchSpec};
use gcfed::seed;
use gcfed::theory::{self, QuadraticProblem};
use gcfed::{runner, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z
    })
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn projection_algebra() -> Outcome {
    let start = Instant::now();
    let spec = ProjectionSpec::default();
    let (mut agree, mut idem, mut means, mut growth) = (0.0f64, 0.0f64, 0.0f64, f64::NEG_INFINITY);
    for shape in [&[64usize, 128][..], &[32, 16, 3, 3][..]] {
        for i in 0..100u64 {
            let mut rng = seed::stream(1, "acceptance.projection", &[shape.len() as u64, i]);
            let g = gaussian(shape, &mut rng);
            let a = gc::centralize_mean_sub(&g, spec).unwrap();
            let b = gc::centralize_project(&g, spec).unwrap();
            agree = agree.max(a.max_abs_diff(&b).unwrap());
            idem = idem.max(gc::centralize_mean_sub(&a, spec).unwrap().max_abs_diff(&a).unwrap());
            means = means.max(gc::mu_vector(&a, spec).unwrap().max_abs());
            growth = growth.max(a.norm() - g.norm());
        }
    }
    let t = start.elapsed();
    outcome(
        agree <= 1e-12 && idem <= 1e-13 && means <= 1e-13 && growth <= 0.0 && within(t, 1.0),
        format!("agree {agree:.1e}, idempotence {idem:.1e}, reduced mean {means:.1e}, max(|PG|-|G|) {growth:.1e}, {t:.2?}"),
    )
}

/// Coordinate-wise `|a - n| / max(|a|, |n|, floor)`.
fn max_rel_err(a: &[Tensor], n: &[Tensor], floor: f64) -> f64 {
    a.iter()
        .zip(n)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

const FD_FLOOR: f64 = 1e-6;
// Balances truncation against roundoff; at 1e-6 the cancellation noise
// alone exceeds the tolerance on coordinates near 1e-6.
const FD_EPS: f64 = 1e-5;

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let archs = [
        ArchSpec::Mlp { widths: vec![20, 16, 5] },
        ArchSpec::Cnn {
            input: vec![1, 8, 8],
            channels: vec![3, 4],
            kernel: 3,
            hidden: vec![6],
            classes: 5,
        },
    ];
    let mut worst = [0.0f64; 2];
    for (a, arch) in archs.iter().enumerate() {
        for s in 0..20u64 {
            let mut rng = seed::stream(2, "acceptance.gradcheck", &[a as u64, s]);
            let model = build_model(arch, &mut rng).unwrap();
            let mut shape = vec![6];
            shape.extend_from_slice(&model.input_shape);
            let x = gaussian(&shape, &mut rng);
            let y: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
            let (_, analytic) = nn::loss_and_grad(&model, &x, &y, None).unwrap();
            let numeric = nn::finite_diff_grad(&model, &x, &y, FD_EPS, None).unwrap();
            worst[a] = worst[a].max(max_rel_err(&analytic, &numeric, FD_FLOOR));
        }
    }
    let t = start.elapsed();
    outcome(
        worst[0] <= 1e-5 && worst[1] <= 1e-5 && within(t, 30.0),
        format!("max rel err MLP {:.1e}, CNN {:.1e}, {t:.2?}", worst[0], worst[1]),
    )
}

fn deterministic_gap() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let mut rng = seed::stream(3, "acceptance.gap", &[i]);
        let p = QuadraticProblem::random(6, theory::SHAPE, true, &mut rng);
        let w0 = theory::random_centered(theory::SHAPE, &mut rng);
        let w_star = p.optimum();
        assert!(theory::mean_component(&w_star).max_abs() < 1e-12);
        let plain = theory::one_step_gap(&p, &w0, theory::ETA, theory::StepKind::Plain, None);
        let proj = theory::one_step_gap(&p, &w0, theory::ETA, theory::StepKind::Projected, None);
        let g_bar = p.mean_grad(&w0);
        let predicted = theory::ETA * theory::ETA * theory::mean_component_sq(&g_bar);
        worst = worst.max((plain - proj - predicted).abs());
    }
    let t = start.elapsed();
    outcome(worst <= 1e-10 && within(t, 1.0), format!("max |error| {worst:.1e}, {t:.2?}"))
}

fn stochastic_gap() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::stream(4, "acceptance.stochastic", &[]);
    let p = QuadraticProblem::random(5, theory::SHAPE, true, &mut rng);
    let w0 = theory::random_centered(theory::SHAPE, &mut rng);
    let r = theory::expected_gap_identity_check(&p, &w0, theory::ETA, 0.1, 10_000, 4).unwrap();
    let t = start.elapsed();
    outcome(
        r.relative_error <= 0.02 && r.a3_within(3.0) && within(t, 10.0),
        format!(
            "rel err {:.2e}, E[A3] {:.2e} (SE {:.2e}), {t:.2?}",
            r.relative_error, r.a3_mean, r.a3_std_error
        ),
    )
}

fn residual_bound() -> Outcome {
    let (mut holds, mut eq) = (true, 0.0f64);
    for i in 0..100u64 {
        let mut rng = seed::stream(5, "acceptance.residual", &[i]);
        let w = gaussian(&theory::SHAPE, &mut rng);
        let r = theory::residual_bound_check(&w, 1.0);
        holds &= r.holds && r.lhs <= r.rhs + 1e-12;
        eq = eq.max((r.lhs - r.rhs).abs());
    }
    outcome(holds && eq <= 1e-12, format!("bound holds on 100 draws, max |lhs - rhs| {eq:.1e}"))
}

fn desk_config(seed: u64, rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(DatasetSpec::default(), StrategyName::Fedavg);
    cfg.seed = seed;
    cfg.rounds = rounds;
    cfg
}

fn run(cfg: &ExperimentConfig, data: &(Dataset, Dataset)) -> RunOutput {
    Simulation::new(cfg, &data.0, &data.1).unwrap().run().unwrap()
}

fn identical(a: &RunOutput, b: &RunOutput) -> bool {
    a.records.len() == b.records.len()
        && a.records.iter().zip(&b.records).all(|(x, y)| {
            x.accuracy.to_bits() == y.accuracy.to_bits() && x.update_norm.to_bits() == y.update_norm.to_bits()
        })
        && a.model == b.model
}

fn strategy_coherence() -> Outcome {
    let start = Instant::now();
    let base = desk_config(6, 50);
    let data = base.load_data(None).unwrap();
    let with = |s: StrategyName, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        c.strategy = s;
        f(&mut c);
        run(&c, &data)
    };
    let none = |_: &mut ExperimentConfig| {};
    let lambda0 = with(StrategyName::Gcfed, &|c| c.gc.lambda = Some(0.0));
    let global = with(StrategyName::GlobalGc, &none);
    let lambda1 = with(StrategyName::Gcfed, &|c| c.gc.lambda = Some(1.0));
    let local = with(StrategyName::LocalGc, &none);
    let prox0 = with(StrategyName::Fedprox, &|c| c.fedprox.mu = 0.0);
    let fedavg = with(StrategyName::Fedavg, &none);
    let (a, b, c) = (identical(&lambda0, &global), identical(&lambda1, &local), identical(&prox0, &fedavg));
    let t = start.elapsed();
    outcome(
        a && b && c && within(t, 300.0),
        format!("lambda=0~global {a}, lambda=1~local {b}, mu=0~fedavg {c}, {t:.2?}"),
    )
}

fn commutation() -> Outcome {
    let mut worst = 0.0f64;
    let archs = [
        ArchSpec::Mlp { widths: vec![12, 9, 4] },
        ArchSpec::Cnn {
            input: vec![2, 8, 8],
            channels: vec![3],
            kernel: 3,
            hidden: vec![5],
            classes: 4,
        },
    ];
    for i in 0..20u64 {
        let mut rng = seed::stream(7, "acceptance.commute", &[i]);
        let model = build_model(&archs[(i % 2) as usize], &mut rng).unwrap();
        let roles = model.group_roles();
        let spec = ProjectionSpec::new(AxisMode::ALL[(i % 5) as usize]);
        let k = rng.random_range(2..8);
        let deltas: Vec<UpdateDelta> = (0..k)
            .map(|c| UpdateDelta {
                groups: model.to_groups().iter().map(|g| gaussian(g.shape(), &mut rng)).collect(),
                local: None,
                client: Some(c),
                num_samples: rng.random_range(1..50),
            })
            .collect();
        let weighting = if i % 3 == 0 { Aggregation::BySamples } else { Aggregation::Uniform };
        let left = apply_global_gc(aggregate(&deltas, weighting).unwrap(), StrategyKind::GlobalGc, &roles, spec).unwrap();
        let mapped: Vec<UpdateDelta> = deltas
            .into_iter()
            .map(|d| apply_global_gc(d, StrategyKind::GlobalGc, &roles, spec).unwrap())
            .collect();
        let right = aggregate(&mapped, weighting).unwrap();
        for (l, r) in left.groups.iter().zip(&right.groups) {
            worst = worst.max(l.max_abs_diff(r).unwrap());
        }
    }
    outcome(worst <= 1e-12, format!("max |difference| {worst:.1e} over 20 delta sets"))
}

fn discrepancy_trend() -> Outcome {
    let start = Instant::now();
    let mut rows = Vec::new();
    for s in 0..5u64 {
        let mut cfg = desk_config(100 + s, 40);
        cfg.measure.discrepancy_every = 5;
        let data = cfg.load_data(None).unwrap();
        let mean_disc = |k: usize| {
            let mut c = cfg.clone();
            c.clients_per_round = Some(k);
            let out = run(&c, &data);
            let v: Vec<f64> = out.records.iter().filter_map(|r| r.discrepancy).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        rows.push((mean_disc(5), mean_disc(50)));
    }
    let ok = rows.iter().all(|(k5, k50)| k5 > k50);
    let t = start.elapsed();
    let shown: Vec<String> = rows.iter().map(|(a, b)| format!("{a:.3}>{b:.3}")).collect();
    outcome(ok && within(t, 600.0), format!("K=5 vs K=50 per seed [{}], {t:.2?}", shown.join(" ")))
}

struct TrendRun {
    summary: RunSummary,
    early_cka: f64,
}

fn trend_runs() -> (Vec<[TrendRun; 4]>, Duration) {
    let start = Instant::now();
    let strategies = [
        StrategyName::Fedavg,
        StrategyName::LocalGc,
        StrategyName::GlobalGc,
        StrategyName::Gcfed,
    ];
    let mut per_seed = Vec::new();
    for s in 0..3u64 {
        let mut cfg = desk_config(s, 200);
        cfg.measure.cka_every = 200;
        let data = cfg.load_data(None).unwrap();
        let runs = strategies.map(|name| {
            let mut c = cfg.clone();
            c.strategy = name;
            let out = run(&c, &data);
            let cka = out.records.last().and_then(|r| r.cka.clone()).expect("cka at final round");
            // the first half of the layers, at least one
            let early = cka.len().div_ceil(2).min(cka.len() - 1).max(1);
            TrendRun {
                summary: RunSummary::from_accuracies(&out.accuracies(), c.measure.smoothing_window),
                early_cka: cka[..early].iter().sum::<f64>() / early as f64,
            }
        });
        per_seed.push(runs);
    }
    (per_seed, start.elapsed())
}

const FEDAVG: usize = 0;
const LOCAL: usize = 1;
const GLOBAL: usize = 2;
const GCFED: usize = 3;

fn final_acc(r: &TrendRun) -> f64 {
    r.summary.final_smoothed_accuracy.unwrap()
}

fn accuracy_trend(runs: &[[TrendRun; 4]], t: Duration) -> Outcome {
    let n = runs.len() as f64;
    let margin = runs.iter().map(|r| final_acc(&r[GCFED]) - final_acc(&r[FEDAVG])).sum::<f64>() / n;
    let vs_local = runs.iter().map(|r| final_acc(&r[GCFED]) - final_acc(&r[LOCAL])).sum::<f64>() / n;
    outcome(
        margin >= 2.0 && vs_local >= 0.0 && within(t, 1800.0),
        format!("GC-Fed - FedAvg {margin:+.2} pp, GC-Fed - LocalGC {vs_local:+.2} pp (mean of 3 seeds), {t:.2?}"),
    )
}

fn fluctuation_trend(runs: &[[TrendRun; 4]]) -> Outcome {
    let std = |r: &TrendRun| r.summary.first_order_std.unwrap();
    let min = |r: &TrendRun| r.summary.first_order_min.unwrap();
    let a = runs.iter().filter(|r| std(&r[GLOBAL]) < std(&r[LOCAL])).count();
    let b = runs.iter().filter(|r| min(&r[GLOBAL]) >= min(&r[FEDAVG])).count();
    outcome(
        a >= 2 && b >= 2,
        format!("std GlobalGC < LocalGC in {a}/3 seeds, min GlobalGC >= FedAvg in {b}/3 seeds"),
    )
}

fn cka_checks(runs: &[[TrendRun; 4]]) -> Outcome {
    let mut rng = seed::stream(11, "acceptance.cka", &[]);
    let x = gaussian(&[64, 10], &mut rng);
    let self_sim = (linear_cka(&x, &x).unwrap() - 1.0).abs();
    // orthogonal Q by Gram-Schmidt
    let mut q = vec![vec![0.0; 10]; 10];
    for i in 0..10 {
        let mut v: Vec<f64> = (0..10).map(|_| StandardNormal.sample(&mut rng)).collect();
        for u in q.iter().take(i) {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let nrm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q[i] = v.into_iter().map(|a| a / nrm).collect();
    }
    let xq = Tensor::from_fn(&[64, 10], |i| (0..10).map(|k| x.data()[(i / 10) * 10 + k] * q[k][i % 10]).sum());
    let rot = (linear_cka(&x, &xq).unwrap() - 1.0).abs();
    let scale = (linear_cka(&x, &x.scale(3.7)).unwrap() - 1.0).abs();
    let wins = runs.iter().filter(|r| r[GCFED].early_cka > r[FEDAVG].early_cka).count();
    let shown: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.4}/{:.4}", r[GCFED].early_cka, r[FEDAVG].early_cka))
        .collect();
    outcome(
        self_sim <= 1e-9 && rot <= 1e-9 && scale <= 1e-9 && wins >= 2,
        format!(
            "self {self_sim:.1e}, rotation {rot:.1e}, scale {scale:.1e}; early CKA GC-Fed/FedAvg [{}] wins {wins}/3",
            shown.join(" ")
        ),
    )
}

fn determinism() -> Outcome {
    let mut cfg = desk_config(12, 15);
    cfg.measure.discrepancy_every = 5;
    cfg.measure.cka_every = 5;
    cfg.strategy = StrategyName::Gcfed;
    let data = cfg.load_data(None).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let bytes = |workers: usize| {
        let mut c = cfg.clone();
        c.workers = workers;
        let dir = tmp.path().join(format!("w{workers}"));
        std::fs::create_dir_all(&dir).unwrap();
        runner::run_into(&c, None, &data.0, &data.1, &dir).unwrap();
        std::fs::read(dir.join("rounds.csv")).unwrap()
    };
    let (one, four) = (bytes(1), bytes(4));
    outcome(one == four, format!("rounds.csv {} bytes, workers 1 vs 4 identical: {}", one.len(), one == four))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "projection algebra", projection_algebra()),
        (2, "gradient correctness", gradient_correctness()),
        (3, "deterministic gap identity", deterministic_gap()),
        (4, "stochastic gap identity", stochastic_gap()),
        (5, "residual bound", residual_bound()),
        (6, "strategy coherence", strategy_coherence()),
        (7, "aggregation/global GC commutation", commutation()),
        (8, "partial-participation discrepancy", discrepancy_trend()),
    ];
    let (runs, t) = trend_runs();
    results.push((9, "accuracy ordering", accuracy_trend(&runs, t)));
    results.push((10, "fluctuation trend", fluctuation_trend(&runs)));
    results.push((11, "CKA", cka_checks(&runs)));
    results.push((12, "determinism across workers", determinism()));

    let mut failed = 0;
    for (id, name, o) in &results {
        println!("criterion {id:>2} {:<4} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
