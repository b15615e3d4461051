//! Experiment configuration: a TOML (or JSON) file with namespaced keys.
//!
//! ```toml
//! strategy = "gcfed"
//! rounds = 200
//! clients = 50
//! clients_per_round = 5
//! alpha = 0.05
//!
//! [gc]
//! lambda = 0.5
//!
//! [dataset]
//! kind = "synthetic"
//! num_classes = 10
//! ```
//!
//! Every omitted key takes its default (`lr = 0.01`, `momentum = 0.9`,
//! `weight_decay = 1e-5`, `batch_size = 50`, `local_epochs = 5`).
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_idx, Dataset, SyntheticTaskSpec};
use crate::engine::{Aggregation, StrategyKind};
use crate::error::{Error, Result};
use crate::gc::{AxisMode, ProjectionSpec};
use crate::nn::ArchSpec;
use crate::seed::{self, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Fedavg,
    LocalGc,
    GlobalGc,
    Gcfed,
    Fedprox,
}

impl StrategyName {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Fedavg => "fedavg",
            StrategyName::LocalGc => "local_gc",
            StrategyName::GlobalGc => "global_gc",
            StrategyName::Gcfed => "gcfed",
            StrategyName::Fedprox => "fedprox",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailPolicy {
    /// Record the failed round, leave the global model unchanged, keep going.
    #[default]
    Continue,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcSection {
    /// Layer borderline; defaults to all but the last weight group.
    pub lambda: Option<f64>,
    #[serde(default)]
    pub axis_mode: AxisMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedProxSection {
    #[serde(default = "defaults::prox_mu")]
    pub mu: f64,
}

impl Default for FedProxSection {
    fn default() -> Self {
        Self { mu: defaults::prox_mu() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSection {
    /// Train all clients every M rounds to measure the update discrepancy (0 = off).
    #[serde(default)]
    pub discrepancy_every: usize,
    /// Layer-wise CKA (clients vs global) every M rounds (0 = off).
    #[serde(default)]
    pub cka_every: usize,
    #[serde(default = "defaults::probe_size")]
    pub probe_size: usize,
    #[serde(default = "defaults::window")]
    pub smoothing_window: usize,
}

impl Default for MeasureSection {
    fn default() -> Self {
        Self {
            discrepancy_every: 0,
            cka_every: 0,
            probe_size: defaults::probe_size(),
            smoothing_window: defaults::window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "defaults::num_classes")]
        num_classes: usize,
        #[serde(default = "defaults::input_dim")]
        input_dim: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
        #[serde(default = "defaults::noise")]
        noise: f64,
        #[serde(default = "defaults::samples_per_class")]
        samples_per_class: usize,
        /// Defaults to a seed derived from the master seed.
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        num_classes: Option<usize>,
        /// Keep only the first `limit` training samples.
        limit: Option<usize>,
        test_limit: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            num_classes: defaults::num_classes(),
            input_dim: defaults::input_dim(),
            separation: defaults::separation(),
            noise: defaults::noise(),
            samples_per_class: defaults::samples_per_class(),
            seed: None,
        }
    }
}

mod defaults {
    pub fn clients() -> usize {
        50
    }
    pub fn local_epochs() -> usize {
        5
    }
    pub fn rounds() -> usize {
        200
    }
    pub fn lr() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        1e-5
    }
    pub fn batch_size() -> usize {
        50
    }
    pub fn alpha() -> f64 {
        0.05
    }
    pub fn workers() -> usize {
        1
    }
    pub fn prox_mu() -> f64 {
        0.01
    }
    pub fn probe_size() -> usize {
        512
    }
    pub fn window() -> usize {
        10
    }
    pub fn num_classes() -> usize {
        10
    }
    pub fn input_dim() -> usize {
        32
    }
    pub fn separation() -> f64 {
        3.0
    }
    pub fn noise() -> f64 {
        1.0
    }
    pub fn samples_per_class() -> usize {
        600
    }
    pub const CLIENTS_PER_ROUND: usize = 5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Total clients `N`.
    #[serde(default = "defaults::clients")]
    pub clients: usize,
    /// Clients sampled per round `K`; takes precedence over `participation`.
    pub clients_per_round: Option<usize>,
    /// Participation ratio `C`, giving `K = round(C * N)`.
    pub participation: Option<f64>,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// LDA concentration.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    pub strategy: StrategyName,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "defaults::workers")]
    pub workers: usize,
    #[serde(default)]
    pub fail_policy: FailPolicy,
    /// Load the partition from a JSON plan instead of sampling it.
    pub partition_file: Option<PathBuf>,
    #[serde(default)]
    pub gc: GcSection,
    #[serde(default)]
    pub fedprox: FedProxSection,
    #[serde(default)]
    pub measure: MeasureSection,
    pub dataset: DatasetSpec,
    /// Defaults to an MLP `[input, 128, classes]`.
    pub model: Option<ArchSpec>,
}

impl ExperimentConfig {
    /// A config with every default filled and the given dataset/strategy.
    pub fn new(dataset: DatasetSpec, strategy: StrategyName) -> Self {
        let s = format!("strategy = \"{}\"", strategy.as_str());
        let mut cfg: Self = toml::from_str(&format!("{s}\n[dataset]\nkind = \"synthetic\"\n")).expect("defaults parse");
        cfg.dataset = dataset;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn clients_per_round(&self) -> usize {
        match (self.clients_per_round, self.participation) {
            (Some(k), _) => k,
            (None, Some(c)) => ((c * self.clients as f64).round() as usize).max(1),
            (None, None) => defaults::CLIENTS_PER_ROUND.min(self.clients),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSpec::Synthetic { num_classes, .. } => Some(*num_classes),
            DatasetSpec::Idx { num_classes, .. } => *num_classes,
        }
    }

    /// Model architecture for a dataset with the given sample shape.
    pub fn arch(&self, sample_shape: &[usize], num_classes: usize) -> ArchSpec {
        self.model.clone().unwrap_or_else(|| ArchSpec::Mlp {
            widths: vec![sample_shape.iter().product(), 128, num_classes],
        })
    }

    pub fn projection(&self) -> ProjectionSpec {
        ProjectionSpec::new(self.gc.axis_mode)
    }

    /// Strategy with `lambda` resolved against a network of `layer_count`
    /// weight groups.
    pub fn strategy_kind(&self, layer_count: usize) -> StrategyKind {
        match self.strategy {
            StrategyName::Fedavg => StrategyKind::FedAvg,
            StrategyName::LocalGc => StrategyKind::LocalGc,
            StrategyName::GlobalGc => StrategyKind::GlobalGc,
            StrategyName::Gcfed => StrategyKind::GcFed {
                lambda: self.gc.lambda.unwrap_or_else(|| default_lambda(layer_count)),
            },
            StrategyName::Fedprox => StrategyKind::FedProx { mu: self.fedprox.mu },
        }
    }

    /// Fill derived values so the saved copy reproduces the run exactly.
    pub fn resolved(&self, layer_count: usize) -> Self {
        let mut c = self.clone();
        c.clients_per_round = Some(self.clients_per_round());
        c.participation = None;
        if c.gc.lambda.is_none() {
            c.gc.lambda = Some(default_lambda(layer_count));
        }
        if let DatasetSpec::Synthetic { seed: s @ None, .. } = &mut c.dataset {
            *s = Some(seed::derive_seed(self.seed, tags::SYNTHETIC, &[]));
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.clients_per_round();
        if self.clients == 0 {
            return Err(Error::config("clients", "must be >= 1"));
        }
        if let Some(c) = self.participation {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::config("participation", format!("must lie in (0, 1], got {c}")));
            }
        }
        if k == 0 || k > self.clients {
            return Err(Error::config(
                "clients_per_round",
                format!("need 1 <= K <= N, got K = {k}, N = {}", self.clients),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return Err(Error::config("momentum", "must be >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        if let Some(l) = self.gc.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config("gc.lambda", format!("must lie in [0, 1], got {l}")));
            }
        }
        if !(self.fedprox.mu >= 0.0 && self.fedprox.mu.is_finite()) {
            return Err(Error::config("fedprox.mu", "must be >= 0"));
        }
        if self.measure.smoothing_window == 0 {
            return Err(Error::config("measure.smoothing_window", "must be >= 1"));
        }
        if self.measure.probe_size < 2 {
            return Err(Error::config("measure.probe_size", "must be >= 2"));
        }
        if let DatasetSpec::Synthetic { .. } = &self.dataset {
            self.synthetic_spec().expect("synthetic").validate()?;
        }
        Ok(())
    }

    /// The synthetic-task parameters, with the seed resolved.
    pub fn synthetic_spec(&self) -> Option<SyntheticTaskSpec> {
        match &self.dataset {
            DatasetSpec::Synthetic {
                num_classes,
                input_dim,
                separation,
                noise,
                samples_per_class,
                seed: s,
            } => Some(SyntheticTaskSpec {
                num_classes: *num_classes,
                input_dim: *input_dim,
                separation: *separation,
                noise: *noise,
                samples_per_class: *samples_per_class,
                seed: s.unwrap_or_else(|| seed::derive_seed(self.seed, tags::SYNTHETIC, &[])),
            }),
            DatasetSpec::Idx { .. } => None,
        }
    }

    /// Load or generate `(train, test)`. Relative IDX paths resolve against `base`.
    pub fn load_data(&self, base: Option<&Path>) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSpec::Synthetic { .. } => generate_synthetic(&self.synthetic_spec().expect("synthetic")),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                num_classes,
                limit,
                test_limit,
            } => {
                let p = |q: &PathBuf| match base {
                    Some(b) if q.is_relative() => b.join(q),
                    _ => q.clone(),
                };
                let train = load_idx(&p(train_images), &p(train_labels), *num_classes, *limit)?;
                let classes = num_classes.unwrap_or(train.num_classes);
                let mut test = load_idx(&p(test_images), &p(test_labels), Some(classes), *test_limit)?;
                test.num_classes = classes;
                let mut train = train;
                train.num_classes = classes;
                Ok((train, test))
            }
        }
    }

    /// Set a dotted key (e.g. `gc.lambda`) from a string value.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let base = toml::Value::try_from(self).map_err(|e| Error::config(key, e.to_string()))?;
        let mut last_err = None;
        // "1" may be meant as an integer, a float or a string
        for candidate in scalar_candidates(value) {
            let mut root = base.clone();
            let parts: Vec<&str> = key.split('.').collect();
            let mut cur = &mut root;
            for (i, part) in parts.iter().enumerate() {
                let table = cur
                    .as_table_mut()
                    .ok_or_else(|| Error::config(key, "not a table"))?;
                if i + 1 == parts.len() {
                    table.insert((*part).to_string(), candidate.clone());
                    break;
                }
                cur = table
                    .entry((*part).to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
            match root.try_into::<Self>() {
                Ok(cfg) => {
                    cfg.validate()?;
                    return Ok(cfg);
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(Error::config(key, last_err.map_or_else(String::new, |e| e.to_string())))
    }
}

pub fn default_lambda(layer_count: usize) -> f64 {
    if layer_count <= 1 {
        0.0
    } else {
        (layer_count - 1) as f64 / layer_count as f64
    }
}

fn scalar_candidates(s: &str) -> Vec<toml::Value> {
    let mut out = Vec::new();
    if let Ok(i) = s.parse::<i64>() {
        out.push(toml::Value::Integer(i));
    }
    if let Ok(f) = s.parse::<f64>() {
        out.push(toml::Value::Float(f));
    }
    if let Ok(b) = s.parse::<bool>() {
        out.push(toml::Value::Boolean(b));
    }
    out.push(toml::Value::String(s.to_string()));
    out
}
