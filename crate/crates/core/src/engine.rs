//! Federated orchestration: client sampling, local training under a
//! strategy, aggregation, Global GC and the round loop.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FailPolicy};
use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::gc::{self, ProjectionSpec};
use crate::metrics;
use crate::nn::{self, build_model, GroupRole, ModelParams, OptimizerState, Prox};
use crate::partition::{lda_partition, PartitionPlan};
use crate::seed::{self, tags};
use crate::tensor::{groups_sum_sq, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum StrategyKind {
    FedAvg,
    /// Centralize every weight gradient during local SGD.
    LocalGc,
    /// Centralize the aggregated update on the server.
    GlobalGc,
    /// Local GC on the first `floor(lambda * L)` weight groups, Global GC on the rest.
    GcFed { lambda: f64 },
    /// Proximal term `mu/2 ||w - w_global||^2` in the local loss.
    FedProx { mu: f64 },
}

impl StrategyKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StrategyKind::GcFed { lambda } if !(0.0..=1.0).contains(&lambda) => {
                Err(Error::config("gc.lambda", format!("must lie in [0, 1], got {lambda}")))
            }
            StrategyKind::FedProx { mu } if !(mu >= 0.0 && mu.is_finite()) => {
                Err(Error::config("fedprox.mu", format!("must be >= 0, got {mu}")))
            }
            _ => Ok(()),
        }
    }

    /// Weight-group (layer) indices centralized at every local step.
    pub fn local_gc_layers(&self, layer_count: usize) -> Result<Vec<usize>> {
        match *self {
            StrategyKind::LocalGc => Ok((0..layer_count).collect()),
            StrategyKind::GcFed { lambda } => gc::select_local_layers(layer_count, lambda),
            _ => Ok(Vec::new()),
        }
    }

    /// Weight-group indices centralized after aggregation. For GC-Fed this
    /// is the complement of the Local GC set: those layers are already
    /// centralized, and re-projecting them is the identity.
    pub fn global_gc_layers(&self, layer_count: usize) -> Result<Vec<usize>> {
        match *self {
            StrategyKind::GlobalGc => Ok((0..layer_count).collect()),
            StrategyKind::GcFed { .. } => {
                let local = self.local_gc_layers(layer_count)?;
                Ok((0..layer_count).filter(|l| !local.contains(l)).collect())
            }
            _ => Ok(Vec::new()),
        }
    }

    pub fn prox_mu(&self) -> Option<f64> {
        match *self {
            StrategyKind::FedProx { mu } if mu != 0.0 => Some(mu),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            StrategyKind::FedAvg => "fedavg".into(),
            StrategyKind::LocalGc => "local_gc".into(),
            StrategyKind::GlobalGc => "global_gc".into(),
            StrategyKind::GcFed { lambda } => format!("gcfed(lambda={lambda})"),
            StrategyKind::FedProx { mu } => format!("fedprox(mu={mu})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `1 / |K|` per selected client.
    #[default]
    Uniform,
    /// `n_k / sum(n_k)` over the selected clients.
    BySamples,
}

/// `w_local - w_global` for every parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    pub groups: Vec<Tensor>,
    /// Client parameters after local training; for aggregates, their
    /// weighted mean. `None` when only the delta is known.
    pub local: Option<Vec<Tensor>>,
    /// Source client; `None` for aggregates.
    pub client: Option<usize>,
    pub num_samples: usize,
}

impl UpdateDelta {
    pub fn norm(&self) -> f64 {
        groups_sum_sq(&self.groups).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(Tensor::is_finite)
    }
}

/// Hyperparameters of one client's local optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub projection: ProjectionSpec,
    /// Master seed; batch order is keyed by `(seed, round, client, epoch)`.
    pub seed: u64,
}

impl LocalTrainConfig {
    pub fn from_experiment(cfg: &ExperimentConfig) -> Self {
        Self {
            epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            projection: cfg.projection(),
            seed: cfg.seed,
        }
    }
}

/// `K` distinct clients out of `N`, ascending.
pub fn sample_clients<R: Rng + ?Sized>(num_clients: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > num_clients {
        return Err(Error::config(
            "clients_per_round",
            format!("need 1 <= K <= N, got K = {k}, N = {num_clients}"),
        ));
    }
    let mut ids = index::sample(rng, num_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Shuffled order of `0..n` for one local epoch.
pub fn epoch_order(seed: u64, round: usize, client: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::stream(seed, tags::BATCHING, &[round as u64, client as u64, epoch as u64]);
    order.shuffle(&mut rng);
    order
}

/// Run local training from `global` and return `w_local - global`.
///
/// The momentum buffer starts at zero. For layers under Local GC the
/// centralized gradient is what enters the optimizer.
pub fn local_train(
    global: &ModelParams,
    data: &ClientDataset,
    cfg: &LocalTrainConfig,
    strategy: StrategyKind,
    round: usize,
    client: usize,
) -> Result<UpdateDelta> {
    if cfg.epochs == 0 {
        return Err(Error::config("local_epochs", "must be >= 1"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::Data {
            position: 0,
            msg: format!("client {client} has no samples"),
        });
    }
    let roles = global.group_roles();
    let local_layers = strategy.local_gc_layers(global.layer_count())?;
    let centralize_group: Vec<bool> = roles
        .iter()
        .map(|r| matches!(r, GroupRole::Weight { layer } if local_layers.contains(layer)))
        .collect();

    let mut model = global.clone();
    let mut opt = OptimizerState::new(&model, cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let prox_mu = strategy.prox_mu();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, round, client, epoch, data.len());
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let prox = prox_mu.map(|mu| Prox { mu, anchor: global });
            let (loss, mut grads) = nn::loss_and_grad(&model, &x, &y, prox)?;
            if !loss.is_finite() {
                return Err(Error::RoundFailure { client, step, what: "loss" });
            }
            if !grads.iter().all(Tensor::is_finite) {
                return Err(Error::RoundFailure { client, step, what: "gradient" });
            }
            for (g, &on) in grads.iter_mut().zip(&centralize_group) {
                if on {
                    gc::centralize_in_place(g, cfg.projection);
                }
            }
            nn::sgd_step(&mut model, &grads, &mut opt)?;
            step += 1;
        }
    }
    if !model.is_finite() {
        return Err(Error::RoundFailure { client, step, what: "weight" });
    }
    Ok(UpdateDelta {
        groups: model.diff(global)?,
        local: Some(model.to_groups()),
        client: Some(client),
        num_samples: data.len(),
    })
}

/// Weighted mean of client deltas, summed in ascending client order.
pub fn aggregate(deltas: &[UpdateDelta], weighting: Aggregation) -> Result<UpdateDelta> {
    if deltas.is_empty() {
        return Err(Error::Logic("aggregate called with no deltas".into()));
    }
    let mut order: Vec<&UpdateDelta> = deltas.iter().collect();
    order.sort_by_key(|d| d.client);
    let total: usize = order.iter().map(|d| d.num_samples).sum();
    let weights: Vec<f64> = match weighting {
        Aggregation::Uniform => vec![1.0 / order.len() as f64; order.len()],
        Aggregation::BySamples => {
            if total == 0 {
                return Err(Error::Logic("by-sample aggregation with zero samples".into()));
            }
            order.iter().map(|d| d.num_samples as f64 / total as f64).collect()
        }
    };
    let zeros = || order[0].groups.iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
    let mut groups = zeros();
    let mut local = order.iter().all(|d| d.local.is_some()).then(zeros);
    for (d, &w) in order.iter().zip(&weights) {
        if d.groups.len() != groups.len() {
            return Err(Error::shape("aggregate", &[groups.len()], &[d.groups.len()]));
        }
        for (acc, g) in groups.iter_mut().zip(&d.groups) {
            acc.axpy(w, g)?;
        }
        if let (Some(acc), Some(l)) = (local.as_mut(), d.local.as_ref()) {
            for (a, g) in acc.iter_mut().zip(l) {
                a.axpy(w, g)?;
            }
        }
    }
    Ok(UpdateDelta {
        groups,
        local,
        client: None,
        num_samples: total,
    })
}

/// Centralize the aggregated update on the layers the strategy assigns to
/// Global GC; everything else passes through untouched.
pub fn apply_global_gc(
    delta: UpdateDelta,
    strategy: StrategyKind,
    roles: &[GroupRole],
    projection: ProjectionSpec,
) -> Result<UpdateDelta> {
    let layer_count = roles.iter().filter(|r| r.is_weight()).count();
    let layers = strategy.global_gc_layers(layer_count)?;
    if layers.is_empty() {
        return Ok(delta);
    }
    let mut delta = delta;
    for (g, role) in delta.groups.iter_mut().zip(roles) {
        if let GroupRole::Weight { layer } = role {
            if layers.contains(layer) {
                gc::centralize_in_place(g, projection);
            }
        }
    }
    Ok(delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub selected: Vec<usize>,
    pub accuracy: f64,
    /// L2 norm of the applied (post Global GC) update; 0 for failed rounds.
    pub update_norm: f64,
    pub discrepancy: Option<f64>,
    pub discrepancy_cosine: Option<f64>,
    /// Per-layer linear CKA of selected client models vs the round's
    /// starting global model, averaged over the selected clients.
    pub cka: Option<Vec<f64>>,
    pub failed: bool,
    pub failure: Option<String>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub model: ModelParams,
    pub aborted: bool,
}

impl RunOutput {
    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.accuracy).collect()
    }
}

/// A fully prepared federated run: data shards, model, strategy.
pub struct Simulation {
    cfg: ExperimentConfig,
    strategy: StrategyKind,
    local_cfg: LocalTrainConfig,
    plan: PartitionPlan,
    clients: Vec<ClientDataset>,
    test_x: Tensor,
    test_y: Vec<usize>,
    probe: Option<Tensor>,
    model: ModelParams,
    roles: Vec<GroupRole>,
    pool: rayon::ThreadPool,
    round: usize,
}

impl Simulation {
    /// Partition `train` by the config's LDA settings and build the model.
    pub fn new(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Self> {
        let plan = match &cfg.partition_file {
            Some(p) => {
                let plan = PartitionPlan::load_json(p)?;
                plan.validate(Some(&train.labels))?;
                plan
            }
            None => lda_partition(&train.labels, train.num_classes, cfg.clients, cfg.alpha, cfg.seed)?,
        };
        Self::with_plan(cfg, train, test, plan)
    }

    pub fn with_plan(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, plan: PartitionPlan) -> Result<Self> {
        cfg.validate()?;
        if plan.num_clients != cfg.clients {
            return Err(Error::config(
                "clients",
                format!("partition has {} clients, config {}", plan.num_clients, cfg.clients),
            ));
        }
        if test.is_empty() {
            return Err(Error::config("dataset", "empty test set"));
        }
        let arch = cfg.arch(&train.sample_shape, train.num_classes);
        let mut init_rng = seed::stream(cfg.seed, tags::INIT, &[]);
        let model = build_model(&arch, &mut init_rng)?;
        if model.input_shape != train.sample_shape {
            return Err(Error::config(
                "model",
                format!("input shape {:?} != data {:?}", model.input_shape, train.sample_shape),
            ));
        }
        let strategy = cfg.strategy_kind(model.layer_count());
        strategy.validate()?;
        log::info!(
            "init: uniform(+-1/sqrt(fan_in)) weights, zero biases, {} params, strategy {}",
            model.num_params(),
            strategy.label()
        );

        let clients = plan.assignments.iter().map(|a| train.subset(a)).collect();
        let (test_x, test_y) = test.all();
        let probe = if cfg.measure.cka_every > 0 {
            let n = cfg.measure.probe_size.min(test.len());
            let mut rng = seed::stream(cfg.seed, tags::PROBE, &[]);
            let mut idx = index::sample(&mut rng, test.len(), n).into_vec();
            idx.sort_unstable();
            Some(test.batch(&idx).0)
        } else {
            None
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Logic(format!("thread pool: {e}")))?;
        Ok(Self {
            cfg: cfg.clone(),
            strategy,
            local_cfg: LocalTrainConfig::from_experiment(cfg),
            plan,
            clients,
            test_x,
            test_y,
            probe,
            roles: model.group_roles(),
            model,
            pool,
            round: 0,
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn strategy(&self) -> StrategyKind {
        self.strategy
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    pub fn evaluate(&self) -> Result<f64> {
        metrics::top1_accuracy(&self.model, &self.test_x, &self.test_y)
    }

    fn train_clients(&self, ids: &[usize], round: usize) -> Vec<Result<UpdateDelta>> {
        let global = &self.model;
        let strategy = self.strategy;
        let local_cfg = &self.local_cfg;
        self.pool.install(|| {
            ids.par_iter()
                .map(|&k| local_train(global, &self.clients[k], local_cfg, strategy, round, k))
                .collect()
        })
    }

    fn server_update(&self, deltas: &[UpdateDelta]) -> Result<UpdateDelta> {
        let agg = aggregate(deltas, self.cfg.aggregation)?;
        apply_global_gc(agg, self.strategy, &self.roles, self.cfg.projection())
    }

    /// Groups centralized on the server move by the (projected) mean delta;
    /// the rest take the weighted mean of the client parameters directly.
    fn apply_update(&mut self, update: &UpdateDelta) -> Result<()> {
        let global_layers = self.strategy.global_gc_layers(self.model.layer_count())?;
        for (i, (dst, role)) in self.model.groups_mut().into_iter().zip(&self.roles).enumerate() {
            let centralized = matches!(role, GroupRole::Weight { layer } if global_layers.contains(layer));
            match (&update.local, centralized) {
                (Some(local), false) => *dst = local[i].clone(),
                _ => dst.axpy(1.0, &update.groups[i])?,
            }
        }
        Ok(())
    }

    fn layer_cka(&self, deltas: &[UpdateDelta]) -> Result<Vec<f64>> {
        let probe = self.probe.as_ref().expect("probe batch");
        let global_acts = nn::layer_activations(&self.model, probe)?;
        let mut sums = vec![0.0; global_acts.len()];
        for d in deltas {
            let mut local = self.model.clone();
            match &d.local {
                Some(groups) => {
                    for (dst, src) in local.groups_mut().into_iter().zip(groups) {
                        *dst = src.clone();
                    }
                }
                None => local.add_scaled(1.0, &d.groups)?,
            }
            let acts = nn::layer_activations(&local, probe)?;
            for ((s, a), g) in sums.iter_mut().zip(&acts).zip(&global_acts) {
                *s += metrics::linear_cka(a, g)?;
            }
        }
        Ok(sums.into_iter().map(|s| s / deltas.len() as f64).collect())
    }

    /// Execute one communication round and return its record.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let start = Instant::now();
        let t = self.round;
        self.round += 1;
        let every = |m: usize| m > 0 && (t + 1) % m == 0;

        let k = self.cfg.clients_per_round();
        let mut rng = seed::stream(self.cfg.seed, tags::SAMPLING, &[t as u64]);
        let selected = sample_clients(self.cfg.clients, k, &mut rng)?;

        let results = self.train_clients(&selected, t);
        let mut deltas = Vec::with_capacity(results.len());
        let mut failure = None;
        for r in results {
            match r {
                Ok(d) => deltas.push(d),
                Err(e @ Error::RoundFailure { .. }) => {
                    if failure.is_none() {
                        failure = Some(e.to_string());
                    }
                }
                Err(e) => return Err(e),
            }
        }

        let mut record = RoundRecord {
            round: t + 1,
            selected: selected.clone(),
            accuracy: 0.0,
            update_norm: 0.0,
            discrepancy: None,
            discrepancy_cosine: None,
            cka: None,
            failed: failure.is_some(),
            failure,
            wall_ms: 0.0,
        };

        if !record.failed {
            let update = self.server_update(&deltas)?;
            if every(self.cfg.measure.discrepancy_every) {
                let all: Vec<usize> = (0..self.cfg.clients).collect();
                let full: Result<Vec<UpdateDelta>> = self.train_clients(&all, t).into_iter().collect();
                if let Ok(full) = full {
                    let full_update = self.server_update(&full)?;
                    record.discrepancy = Some(metrics::update_discrepancy(&full_update.groups, &update.groups)?);
                    record.discrepancy_cosine = Some(metrics::cosine_discrepancy(&full_update.groups, &update.groups)?);
                }
            }
            if every(self.cfg.measure.cka_every) {
                record.cka = Some(self.layer_cka(&deltas)?);
            }
            record.update_norm = update.norm();
            self.apply_update(&update)?;
        } else {
            log::warn!("round {} failed: {}", t + 1, record.failure.as_deref().unwrap_or(""));
        }

        record.accuracy = self.evaluate()?;
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(record)
    }

    /// Run the configured number of rounds. `on_round` sees each record as
    /// it is produced.
    pub fn run_with(&mut self, mut on_round: impl FnMut(&RoundRecord)) -> Result<RunOutput> {
        let mut records = Vec::with_capacity(self.cfg.rounds);
        let mut aborted = false;
        while self.round < self.cfg.rounds {
            let rec = self.step()?;
            on_round(&rec);
            let failed = rec.failed;
            records.push(rec);
            if failed && self.cfg.fail_policy == FailPolicy::Abort {
                aborted = true;
                break;
            }
        }
        Ok(RunOutput {
            records,
            model: self.model.clone(),
            aborted,
        })
    }

    pub fn run(&mut self) -> Result<RunOutput> {
        self.run_with(|_| {})
    }
}

/// Partition, train for `cfg.rounds` rounds and evaluate after each.
pub fn run_experiment(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    Simulation::new(cfg, train, test)?.run()
}
