//! Datasets: in-memory sample storage, the synthetic Gaussian-mixture task
//! and IDX (MNIST/EMNIST) ingestion.

mod idx;
mod synthetic;

pub use idx::{load_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{generate_synthetic, SyntheticTaskSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major feature storage with one label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Per-sample shape, e.g. `[d]` or `[C, H, W]`.
    pub sample_shape: Vec<usize>,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// One client's shard.
pub type ClientDataset = Dataset;

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, features: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || features.len() != per * labels.len() {
            return Err(Error::shape(
                "Dataset::new features",
                &[labels.len() * per],
                &[features.len()],
            ));
        }
        if let Some(pos) = labels.iter().position(|&y| y >= num_classes) {
            return Err(Error::Data {
                position: pos,
                msg: format!("label {} outside [0, {num_classes})", labels[pos]),
            });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                position: pos / per,
                msg: "non-finite feature".into(),
            });
        }
        Ok(Self {
            sample_shape,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.feature_len();
        &self.features[i * d..(i + 1) * d]
    }

    /// Gather the given samples into a batch tensor `[b, ...sample_shape]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.feature_len();
        let mut feats = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            feats.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        (Tensor::new(shape, feats).expect("batch shape"), labels)
    }

    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (t, labels) = self.batch(indices);
        Dataset {
            sample_shape: self.sample_shape.clone(),
            features: t.into_data(),
            labels,
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn truncate(mut self, n: usize) -> Dataset {
        if n < self.len() {
            let d = self.feature_len();
            self.labels.truncate(n);
            self.features.truncate(n * d);
        }
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_labels_and_lengths() {
        assert!(Dataset::new(vec![2], vec![0.0; 4], vec![0, 1], 2).is_ok());
        assert!(Dataset::new(vec![2], vec![0.0; 5], vec![0, 1], 2).is_err());
        assert!(matches!(
            Dataset::new(vec![2], vec![0.0; 4], vec![0, 2], 2),
            Err(Error::Data { position: 1, .. })
        ));
        assert!(Dataset::new(vec![1], vec![0.0, f64::NAN], vec![0, 0], 1).is_err());
    }

    #[test]
    fn batch_and_subset() {
        let ds = Dataset::new(vec![2], vec![0., 1., 2., 3., 4., 5.], vec![0, 1, 0], 2).unwrap();
        let (t, y) = ds.batch(&[2, 0]);
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[4., 5., 0., 1.]);
        assert_eq!(y, vec![0, 0]);
        assert_eq!(ds.subset(&[1]).features, vec![2., 3.]);
        assert_eq!(ds.class_counts(), vec![2, 1]);
        assert_eq!(ds.clone().truncate(1).len(), 1);
    }
}
