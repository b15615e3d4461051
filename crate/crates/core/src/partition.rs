//! Unbalanced latent-Dirichlet-allocation partitioning.
//!
//! For every class `c`, client proportions `q_c ~ Dirichlet(alpha * 1_N)` are
//! drawn and each class-`c` sample is routed to a client by a categorical
//! draw from `q_c`. Both the label mix and the volume per client vary.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub num_clients: usize,
    pub num_classes: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Per client, ascending sample indices into the source dataset.
    pub assignments: Vec<Vec<usize>>,
    /// `class_histograms[k][c]`: samples of class `c` held by client `k`.
    pub class_histograms: Vec<Vec<usize>>,
    /// Samples moved to fill clients left empty after routing.
    pub repairs: usize,
}

impl PartitionPlan {
    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let plan: Self = serde_json::from_reader(f)?;
        plan.validate(None)?;
        Ok(plan)
    }

    /// Checks disjointness, coverage of `0..total`, non-empty clients and
    /// histogram consistency (when `labels` is given).
    pub fn validate(&self, labels: Option<&[usize]>) -> Result<()> {
        let total = self.total();
        let mut seen = vec![false; total];
        for (k, a) in self.assignments.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Logic(format!("client {k} has no samples")));
            }
            for &i in a {
                if i >= total || seen[i] {
                    return Err(Error::Logic(format!("sample {i} duplicated or out of range")));
                }
                seen[i] = true;
            }
            let hist_sum: usize = self.class_histograms[k].iter().sum();
            if hist_sum != a.len() {
                return Err(Error::Logic(format!("client {k} histogram sums to {hist_sum}, holds {}", a.len())));
            }
        }
        if let Some(labels) = labels {
            if labels.len() != total {
                return Err(Error::Logic(format!("plan covers {total} samples, dataset has {}", labels.len())));
            }
            for (k, a) in self.assignments.iter().enumerate() {
                let mut h = vec![0; self.num_classes];
                for &i in a {
                    h[labels[i]] += 1;
                }
                if h != self.class_histograms[k] {
                    return Err(Error::Logic(format!("client {k} histogram disagrees with labels")));
                }
            }
        }
        Ok(())
    }
}

/// Draw one Dirichlet(alpha * 1_n) vector by normalizing Gamma(alpha, 1) draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::config("alpha", e.to_string()))?;
    let mut q: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = q.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        q.iter_mut().for_each(|v| *v /= sum);
    } else {
        // every component underflowed: all mass on one uniformly chosen client
        let k = rng.random_range(0..n);
        q.iter_mut().enumerate().for_each(|(i, v)| *v = if i == k { 1.0 } else { 0.0 });
    }
    Ok(q)
}

pub fn lda_partition(labels: &[usize], num_classes: usize, num_clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(Error::config("clients", "need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("alpha", format!("must be positive and finite, got {alpha}")));
    }
    if labels.len() < num_clients {
        return Err(Error::config(
            "clients",
            format!("{num_clients} clients but only {} samples", labels.len()),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Data {
                position: i,
                msg: format!("label {y} outside [0, {num_classes})"),
            });
        }
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::config("dataset", format!("class {c} has no samples")));
    }

    let mut rng = seed::stream(seed, tags::PARTITION, &[]);
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for members in &by_class {
        let q = sample_dirichlet(alpha, num_clients, &mut rng)?;
        let route = WeightedIndex::new(&q).map_err(|e| Error::Logic(format!("dirichlet weights: {e}")))?;
        for &i in members {
            assignments[route.sample(&mut rng)].push(i);
        }
    }

    let mut repairs = 0;
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..num_clients)
            .max_by_key(|&k| (assignments[k].len(), std::cmp::Reverse(k)))
            .expect("at least one client");
        let moved = assignments[largest].pop().expect("largest client non-empty");
        assignments[empty].push(moved);
        repairs += 1;
        log::info!("partition repair: moved sample {moved} from client {largest} to empty client {empty}");
    }

    for a in &mut assignments {
        a.sort_unstable();
    }
    let class_histograms = assignments
        .iter()
        .map(|a| {
            let mut h = vec![0; num_classes];
            for &i in a {
                h[labels[i]] += 1;
            }
            h
        })
        .collect();

    Ok(PartitionPlan {
        num_clients,
        num_classes,
        alpha,
        seed,
        assignments,
        class_histograms,
        repairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub sizes: Vec<usize>,
    /// Shannon entropy (nats) of each client's label distribution.
    pub class_entropy: Vec<f64>,
    pub classes_present: Vec<usize>,
    pub single_class_clients: usize,
    pub mean_entropy: f64,
    pub min_size: usize,
    pub max_size: usize,
    pub repairs: usize,
}

pub fn partition_stats(plan: &PartitionPlan) -> PartitionStats {
    let sizes = plan.client_sizes();
    let class_entropy: Vec<f64> = plan
        .class_histograms
        .iter()
        .map(|h| {
            let n: usize = h.iter().sum();
            h.iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n as f64;
                    -p * p.ln()
                })
                .sum()
        })
        .collect();
    let classes_present: Vec<usize> = plan
        .class_histograms
        .iter()
        .map(|h| h.iter().filter(|&&c| c > 0).count())
        .collect();
    PartitionStats {
        single_class_clients: classes_present.iter().filter(|&&c| c == 1).count(),
        mean_entropy: class_entropy.iter().sum::<f64>() / class_entropy.len() as f64,
        min_size: sizes.iter().copied().min().unwrap_or(0),
        max_size: sizes.iter().copied().max().unwrap_or(0),
        repairs: plan.repairs,
        sizes,
        class_entropy,
        classes_present,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes * per_class).map(|i| i % classes).collect()
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced_labels(10, 30);
        let plan = lda_partition(&labels, 10, 1, 0.5, 3).unwrap();
        assert_eq!(plan.assignments[0], (0..300).collect::<Vec<_>>());
        assert_eq!(plan.class_histograms[0], vec![30; 10]);
        let stats = partition_stats(&plan);
        assert_eq!(stats.sizes, vec![300]);
    }

    #[test]
    fn uniform_plan_has_max_entropy() {
        let labels = balanced_labels(4, 2);
        let plan = PartitionPlan {
            num_clients: 2,
            num_classes: 4,
            alpha: 1.0,
            seed: 0,
            assignments: vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]],
            class_histograms: vec![vec![1; 4], vec![1; 4]],
            repairs: 0,
        };
        plan.validate(Some(&labels)).unwrap();
        let s = partition_stats(&plan);
        for e in s.class_entropy {
            assert!((e - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn conserves_and_is_deterministic() {
        let labels = balanced_labels(10, 100);
        let a = lda_partition(&labels, 10, 50, 0.1, 9).unwrap();
        let b = lda_partition(&labels, 10, 50, 0.1, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total(), labels.len());
        a.validate(Some(&labels)).unwrap();
        let c = lda_partition(&labels, 10, 50, 0.1, 10).unwrap();
        assert_ne!(a.assignments, c.assignments);
    }

    #[test]
    fn empty_clients_are_repaired() {
        // far more clients than a tiny alpha can populate
        let labels = balanced_labels(2, 20);
        let plan = lda_partition(&labels, 2, 30, 0.01, 1).unwrap();
        assert!(plan.repairs > 0);
        plan.validate(Some(&labels)).unwrap();
        assert!(plan.assignments.iter().all(|a| !a.is_empty()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let labels = balanced_labels(3, 5);
        assert!(lda_partition(&labels, 3, 0, 1.0, 0).is_err());
        assert!(lda_partition(&labels, 3, 2, 0.0, 0).is_err());
        assert!(lda_partition(&labels, 4, 2, 1.0, 0).is_err());
        assert!(matches!(lda_partition(&[0, 5], 3, 1, 1.0, 0), Err(Error::Data { position: 1, .. })));
    }

    #[test]
    fn json_round_trip() {
        let labels = balanced_labels(5, 20);
        let plan = lda_partition(&labels, 5, 7, 0.3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        plan.save_json(&path).unwrap();
        assert_eq!(PartitionPlan::load_json(&path).unwrap(), plan);
    }
}
