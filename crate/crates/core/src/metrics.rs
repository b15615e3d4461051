//! Evaluation and training-dynamics statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, ModelParams};
use crate::tensor::{groups_sum_sq, Tensor};

const EVAL_CHUNK: usize = 1024;

/// Top-1 accuracy in percent. Ties in the argmax go to the lowest class.
pub fn top1_accuracy(model: &ModelParams, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::config("test set", "empty test set"));
    }
    if features.shape().first() != Some(&n) {
        return Err(Error::shape("top1_accuracy", &[n], &features.shape()[..1.min(features.ndim())]));
    }
    let per = features.len() / n;
    let mut correct = 0usize;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let mut shape = features.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, features.data()[start * per..end * per].to_vec())?;
        let logits = forward(model, &chunk)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(100.0 * correct as f64 / n as f64)
}

/// Row-wise argmax with lowest-index tie-break.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub const DISCREPANCY_EPS: f64 = 1e-12;

/// `||partial - full||_2 / (||full||_2 + 1e-12)` over all parameter groups.
pub fn update_discrepancy(full: &[Tensor], partial: &[Tensor]) -> Result<f64> {
    if full.len() != partial.len() {
        return Err(Error::shape("update_discrepancy", &[full.len()], &[partial.len()]));
    }
    let mut diff_sq = 0.0;
    for (a, b) in full.iter().zip(partial) {
        diff_sq += b.sub(a)?.sum_sq();
    }
    Ok(diff_sq.sqrt() / (groups_sum_sq(full).sqrt() + DISCREPANCY_EPS))
}

/// `1 - cos(full, partial)` over the flattened updates.
pub fn cosine_discrepancy(full: &[Tensor], partial: &[Tensor]) -> Result<f64> {
    if full.len() != partial.len() {
        return Err(Error::shape("cosine_discrepancy", &[full.len()], &[partial.len()]));
    }
    let mut dot = 0.0;
    for (a, b) in full.iter().zip(partial) {
        dot += a.dot(b)?;
    }
    let denom = groups_sum_sq(full).sqrt() * groups_sum_sq(partial).sqrt();
    if denom == 0.0 {
        return Ok(if groups_sum_sq(full) == groups_sum_sq(partial) { 0.0 } else { 1.0 });
    }
    Ok(1.0 - dot / denom)
}

fn center_columns(x: &Tensor) -> Vec<f64> {
    let (n, p) = (x.shape()[0], x.shape()[1]);
    let mut means = vec![0.0; p];
    for row in x.data().chunks(p) {
        means.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    x.data()
        .chunks(p)
        .flat_map(|row| row.iter().zip(&means).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect()
}

/// `||A^T B||_F^2` for row-major `A: [n, p]`, `B: [n, q]`.
fn cross_frob_sq(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    let mut c = vec![0.0; p * q];
    for r in 0..n {
        let ar = &a[r * p..(r + 1) * p];
        let br = &b[r * q..(r + 1) * q];
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (cv, &bv) in c[i * q..(i + 1) * q].iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    }
    c.iter().map(|v| v * v).sum()
}

/// Linear CKA between two activation matrices with the same rows.
/// Returns 0 (with a warning) when either input has zero variance.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.ndim() != 2 || y.ndim() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::shape("linear_cka", x.shape(), y.shape()));
    }
    let n = x.shape()[0];
    if n < 2 {
        return Err(Error::config("cka", "need at least 2 samples"));
    }
    let (p, q) = (x.shape()[1], y.shape()[1]);
    let xc = center_columns(x);
    let yc = center_columns(y);
    let xy = cross_frob_sq(&xc, p, &yc, q, n);
    let xx = cross_frob_sq(&xc, p, &xc, p, n).sqrt();
    let yy = cross_frob_sq(&yc, q, &yc, q, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        log::warn!("linear CKA on zero-variance input; defined as 0");
        return Ok(0.0);
    }
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

/// Per-round accuracy (percent) and the reporting window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySeries {
    pub values: Vec<f64>,
    pub window: usize,
}

impl AccuracySeries {
    pub fn new(values: Vec<f64>, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("window", "must be >= 1"));
        }
        if let Some(pos) = values.iter().position(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::Data {
                position: pos,
                msg: format!("accuracy {} outside [0, 100]", values[pos]),
            });
        }
        Ok(Self { values, window })
    }

    pub fn smoothed(&self) -> Vec<f64> {
        moving_average(&self.values, self.window)
    }

    pub fn first_order(&self) -> Option<FirstOrderStats> {
        first_order_stats(&self.values)
    }
}

/// Trailing mean over the last `min(window, t + 1)` values.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..series.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            let s = &series[lo..=t];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
}

/// Statistics of `a[t+1] - a[t]` over the raw series; `None` for fewer than
/// two points.
pub fn first_order_stats(series: &[f64]) -> Option<FirstOrderStats> {
    if series.len() < 2 {
        return None;
    }
    let diffs: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let min = diffs.iter().copied().fold(f64::INFINITY, f64::min);
    Some(FirstOrderStats {
        mean,
        std: var.sqrt(),
        min,
    })
}

/// Table-1 triple plus peak and final smoothed accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub first_order_mean: Option<f64>,
    pub first_order_std: Option<f64>,
    pub first_order_min: Option<f64>,
    pub peak_smoothed_accuracy: Option<f64>,
    pub final_smoothed_accuracy: Option<f64>,
}

impl RunSummary {
    pub fn from_accuracies(acc: &[f64], window: usize) -> Self {
        let fo = first_order_stats(acc);
        let smooth = moving_average(acc, window);
        Self {
            first_order_mean: fo.map(|s| s.mean),
            first_order_std: fo.map(|s| s.std),
            first_order_min: fo.map(|s| s.min),
            peak_smoothed_accuracy: smooth.iter().copied().reduce(f64::max),
            final_smoothed_accuracy: smooth.last().copied(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ArchSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_predictor_on_balanced_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = build_model(&ArchSpec::Linear { input: 2, classes: 4 }, &mut rng).unwrap();
        m.layers[0].weight.data_mut().fill(0.0);
        m.layers[0].bias.as_mut().unwrap().data_mut()[2] = 1.0;
        let x = Tensor::from_fn(&[8, 2], |_| rng.random_range(-1.0..1.0));
        let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
        assert_eq!(top1_accuracy(&m, &x, &y).unwrap(), 25.0);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let logits = Tensor::from_rows(&[&[1.0, 1.0, 0.0], &[0.0, 2.0, 2.0]]);
        assert_eq!(argmax_rows(&logits), vec![0, 1]);
    }

    #[test]
    fn empty_test_set_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = build_model(&ArchSpec::Linear { input: 2, classes: 2 }, &mut rng).unwrap();
        assert!(top1_accuracy(&m, &Tensor::zeros(&[0, 2]), &[]).is_err());
    }

    #[test]
    fn discrepancy_edge_cases() {
        let t = vec![Tensor::from_rows(&[&[1.0, -2.0]]), Tensor::full(&[3], 0.5)];
        assert_eq!(update_discrepancy(&t, &t).unwrap(), 0.0);
        let doubled: Vec<Tensor> = t.iter().map(|x| x.scale(2.0)).collect();
        assert!((update_discrepancy(&t, &doubled).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_discrepancy(&t, &doubled).unwrap().abs() < 1e-15);
        let neg: Vec<Tensor> = t.iter().map(|x| x.scale(-1.0)).collect();
        assert!((cosine_discrepancy(&t, &neg).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cka_of_self_is_one_and_constant_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[50, 6], |_| rng.random_range(-1.0..1.0));
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let c = Tensor::full(&[50, 3], 4.0);
        assert_eq!(linear_cka(&x, &c).unwrap(), 0.0);
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 3), vec![1.0, 1.5, 2.0, 3.0]);
        assert_eq!(moving_average(&[5.0, 7.0], 1), vec![5.0, 7.0]);
        assert_eq!(moving_average(&[2.0; 4], 10), vec![2.0; 4]);
    }

    #[test]
    fn first_order_examples() {
        assert_eq!(
            first_order_stats(&[3.0; 5]).unwrap(),
            FirstOrderStats { mean: 0.0, std: 0.0, min: 0.0 }
        );
        let s = first_order_stats(&[0.0, 10.0, 0.0]).unwrap();
        assert_eq!((s.mean, s.std, s.min), (0.0, 10.0, -10.0));
        assert!(first_order_stats(&[1.0]).is_none());
    }

    #[test]
    fn accuracy_series_validation() {
        assert!(AccuracySeries::new(vec![10.0, 101.0], 3).is_err());
        assert!(AccuracySeries::new(vec![10.0], 0).is_err());
        let s = AccuracySeries::new(vec![10.0, 20.0], 10).unwrap();
        assert_eq!(s.smoothed(), vec![10.0, 15.0]);
    }
}
