use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::{self, tags};

/// Gaussian mixture with pairwise-equidistant class centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Distance between any two class centers.
    pub separation: f64,
    /// Within-class standard deviation per coordinate.
    pub noise: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 32,
            separation: 3.0,
            noise: 1.0,
            samples_per_class: 600,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("dataset.num_classes", "need at least 2 classes"));
        }
        if self.input_dim < self.num_classes {
            return Err(Error::config(
                "dataset.input_dim",
                "must be >= num_classes for equidistant centers",
            ));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::config("dataset.noise", "must be positive"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::config("dataset.separation", "must be non-negative"));
        }
        if self.samples_per_class < 5 {
            return Err(Error::config("dataset.samples_per_class", "need at least 5"));
        }
        Ok(())
    }
}

/// Orthonormal rows via Gram-Schmidt on Gaussian vectors.
fn orthonormal_rows<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            out.push(v);
        }
    }
    out
}

/// Returns `(train, test)`. Sample `j` of class `c` has index
/// `j * num_classes + c`; within-class indices `j % 5 == 4` go to the test
/// split, giving an exact 80/20 split with identical class priors.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = seed::stream(spec.seed, tags::SYNTHETIC, &[]);
    let (c_n, d) = (spec.num_classes, spec.input_dim);
    let scale = spec.separation / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = orthonormal_rows(c_n, d, &mut rng)
        .into_iter()
        .map(|u| u.into_iter().map(|v| v * scale).collect())
        .collect();

    let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for j in 0..spec.samples_per_class {
        for (c, center) in centers.iter().enumerate() {
            let (xs, ys) = if j % 5 == 4 {
                (&mut te_x, &mut te_y)
            } else {
                (&mut tr_x, &mut tr_y)
            };
            for &mu in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                xs.push(mu + spec.noise * z);
            }
            ys.push(c);
        }
    }
    Ok((
        Dataset::new(vec![d], tr_x, tr_y, c_n)?,
        Dataset::new(vec![d], te_x, te_y, c_n)?,
    ))
}
