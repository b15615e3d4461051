//! Gradient centralization.
//!
//! A weight-shaped tensor `G` is centralized by removing, for every kept
//! index (by default each output channel / feature), the mean over the
//! reduced axes. Equivalently, viewing `G` as an `m x n` matrix whose rows
//! run over the `m` reduced positions, `G~ = (I - e e^T) G` with
//! `e = 1_m / sqrt(m)`. Both routes are implemented; `centralize` is the
//! production path and `centralize_project` exists to cross-check it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

/// Which axes the mean is taken over. Named after the shape of the
/// resulting mean tensor for a conv weight `[C_out, C_in, K_h, K_w]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisMode {
    /// `[C_out, 1, 1, 1]` (conv) / `[F_out, 1]` (FC).
    #[default]
    OutChannel,
    /// `[C_out, C_in, 1, 1]`: mean over the kernel window.
    OutInChannel,
    /// `[C_out, 1, K_h, K_w]`: mean over input channels.
    OutKernel,
    /// `[C_out, C_in, K_h, 1]`: mean over kernel width only.
    OutInKernelRow,
    /// `[1, C_in, K_h, K_w]` / `[1, F_in]`: mean over the output axis.
    InputSide,
}

impl AxisMode {
    pub const ALL: [AxisMode; 5] = [
        AxisMode::OutChannel,
        AxisMode::OutInChannel,
        AxisMode::OutKernel,
        AxisMode::OutInKernelRow,
        AxisMode::InputSide,
    ];

    /// Axes reduced for a tensor of the given rank. Modes that only make
    /// sense for conv weights fall back to the default on other ranks.
    pub fn reduced_axes(self, ndim: usize) -> Vec<usize> {
        match (self, ndim) {
            (AxisMode::InputSide, _) => vec![0],
            (AxisMode::OutInChannel, 4) => vec![2, 3],
            (AxisMode::OutKernel, 4) => vec![1],
            (AxisMode::OutInKernelRow, 4) => vec![3],
            _ => (1..ndim).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub axis_mode: AxisMode,
}

impl ProjectionSpec {
    pub fn new(axis_mode: AxisMode) -> Self {
        Self { axis_mode }
    }
}

/// Reduction geometry of one tensor under a spec.
struct Geometry {
    reduced: Vec<bool>,
    /// Shape of the mean tensor (reduced axes set to 1).
    mean_shape: Vec<usize>,
    /// Number of reduced positions per kept index (`m`).
    m: usize,
}

fn geometry(shape: &[usize], spec: ProjectionSpec) -> Result<Geometry> {
    if shape.len() < 2 {
        return Err(Error::NotCentralizable { shape: shape.to_vec() });
    }
    let axes = spec.axis_mode.reduced_axes(shape.len());
    let mut reduced = vec![false; shape.len()];
    for &a in &axes {
        reduced[a] = true;
    }
    let m: usize = axes.iter().map(|&a| shape[a]).product();
    if m < 2 {
        return Err(Error::NotCentralizable { shape: shape.to_vec() });
    }
    let mean_shape = shape
        .iter()
        .zip(&reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    Ok(Geometry { reduced, mean_shape, m })
}

/// For every flat index of `shape`, its flat index in the mean tensor.
fn kept_index_map(shape: &[usize], geo: &Geometry) -> Vec<usize> {
    let mean_strides = strides_of(&geo.mean_shape);
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut coord = vec![0usize; shape.len()];
    for _ in 0..n {
        let idx = coord
            .iter()
            .zip(&geo.reduced)
            .zip(&mean_strides)
            .map(|((&c, &r), &s)| if r { 0 } else { c * s })
            .sum();
        out.push(idx);
        for ax in (0..shape.len()).rev() {
            coord[ax] += 1;
            if coord[ax] < shape[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
    out
}

/// True when `shape` can be centralized under `spec`.
pub fn is_centralizable(shape: &[usize], spec: ProjectionSpec) -> bool {
    geometry(shape, spec).is_ok()
}

/// Mean of `g` over the reduced axes, shaped like `g` with those axes set to 1.
pub fn mu_vector(g: &Tensor, spec: ProjectionSpec) -> Result<Tensor> {
    let geo = geometry(g.shape(), spec)?;
    let map = kept_index_map(g.shape(), &geo);
    let mut mu = Tensor::zeros(&geo.mean_shape);
    {
        let acc = mu.data_mut();
        for (&v, &k) in g.data().iter().zip(&map) {
            acc[k] += v;
        }
        let inv = 1.0 / geo.m as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(mu)
}

/// `G - broadcast(mu)`.
pub fn centralize_mean_sub(g: &Tensor, spec: ProjectionSpec) -> Result<Tensor> {
    let geo = geometry(g.shape(), spec)?;
    let map = kept_index_map(g.shape(), &geo);
    let mu = mu_vector(g, spec)?;
    let mut out = g.clone();
    for (v, &k) in out.data_mut().iter_mut().zip(&map) {
        *v -= mu.data()[k];
    }
    Ok(out)
}

/// `(I - e e^T) G` with the projector formed explicitly.
pub fn centralize_project(g: &Tensor, spec: ProjectionSpec) -> Result<Tensor> {
    let geo = geometry(g.shape(), spec)?;
    let map = kept_index_map(g.shape(), &geo);
    let m = geo.m;
    let n: usize = geo.mean_shape.iter().product();

    // Gather into an m x n matrix: column = kept index, row = position
    // within that column's reduced slice (in flat-index order).
    let mut row_of = vec![0usize; g.len()];
    let mut fill = vec![0usize; n];
    let mut mat = vec![0.0; m * n];
    for (flat, &col) in map.iter().enumerate() {
        let row = fill[col];
        fill[col] += 1;
        row_of[flat] = row;
        mat[row * n + col] = g.data()[flat];
    }

    let e = 1.0 / (m as f64).sqrt();
    let proj: Vec<f64> = (0..m * m)
        .map(|idx| {
            let (i, j) = (idx / m, idx % m);
            (if i == j { 1.0 } else { 0.0 }) - e * e
        })
        .collect();

    let mut out_mat = vec![0.0; m * n];
    for i in 0..m {
        for k in 0..m {
            let p = proj[i * m + k];
            let src = &mat[k * n..(k + 1) * n];
            for (o, &s) in out_mat[i * n..(i + 1) * n].iter_mut().zip(src) {
                *o += p * s;
            }
        }
    }

    let mut out = g.clone();
    for (flat, v) in out.data_mut().iter_mut().enumerate() {
        *v = out_mat[row_of[flat] * n + map[flat]];
    }
    Ok(out)
}

/// Production centralization. Returns `Ok(None)` when the tensor is not
/// centralizable (biases, or a reduction of length 1).
pub fn centralize(g: &Tensor, spec: ProjectionSpec) -> Option<Tensor> {
    match centralize_mean_sub(g, spec) {
        Ok(t) => Some(t),
        Err(_) => {
            if g.ndim() >= 2 {
                log::warn!(
                    "skipping centralization of shape {:?} under {:?}: reduction length 1",
                    g.shape(),
                    spec.axis_mode
                );
            }
            None
        }
    }
}

/// Centralize in place when possible; returns whether anything changed.
pub fn centralize_in_place(g: &mut Tensor, spec: ProjectionSpec) -> bool {
    match centralize(g, spec) {
        Some(t) => {
            *g = t;
            true
        }
        None => false,
    }
}

/// Zero-based indices of the weight groups that receive Local GC:
/// the first `floor(lambda * L)` in forward order.
pub fn select_local_layers(layer_count: usize, lambda: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("gc.lambda", format!("must lie in [0, 1], got {lambda}")));
    }
    let n = (lambda * layer_count as f64).floor() as usize;
    Ok((0..n.min(layer_count)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_spec() -> ProjectionSpec {
        ProjectionSpec::default()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn fc_mean_is_per_output_row() {
        let g = Tensor::from_rows(&[&[1.0, 3.0], &[3.0, 5.0]]);
        let mu = mu_vector(&g, default_spec()).unwrap();
        assert_eq!(mu.shape(), &[2, 1]);
        assert_eq!(mu.data(), &[2.0, 4.0]);
        let c = centralize_mean_sub(&g, default_spec()).unwrap();
        assert_eq!(c.data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn constant_tensor_mean_is_constant() {
        let g = Tensor::full(&[3, 2, 3, 3], 2.5);
        for mode in AxisMode::ALL {
            let mu = mu_vector(&g, ProjectionSpec::new(mode)).unwrap();
            assert!(mu.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        }
    }

    #[test]
    fn conv_mean_matches_loop_nest() {
        let g = random(&[4, 3, 3, 3], 11);
        let mu = mu_vector(&g, default_spec()).unwrap();
        assert_eq!(mu.shape(), &[4, 1, 1, 1]);
        let d = g.data();
        for co in 0..4 {
            let mut s = 0.0;
            for ci in 0..3 {
                for kh in 0..3 {
                    for kw in 0..3 {
                        s += d[((co * 3 + ci) * 3 + kh) * 3 + kw];
                    }
                }
            }
            assert!((mu.data()[co] - s / 27.0).abs() < 1e-14);
        }
    }

    #[test]
    fn ablation_mean_shapes() {
        let g = random(&[4, 3, 5, 5], 12);
        let shapes: Vec<Vec<usize>> = AxisMode::ALL
            .iter()
            .map(|&m| mu_vector(&g, ProjectionSpec::new(m)).unwrap().shape().to_vec())
            .collect();
        assert_eq!(
            shapes,
            vec![
                vec![4, 1, 1, 1],
                vec![4, 3, 1, 1],
                vec![4, 1, 5, 5],
                vec![4, 3, 5, 1],
                vec![1, 3, 5, 5],
            ]
        );
        let fc = random(&[6, 4], 13);
        assert_eq!(mu_vector(&fc, ProjectionSpec::new(AxisMode::OutKernel)).unwrap().shape(), &[6, 1]);
        assert_eq!(mu_vector(&fc, ProjectionSpec::new(AxisMode::InputSide)).unwrap().shape(), &[1, 4]);
    }

    #[test]
    fn ablation_modes_zero_their_reduced_means() {
        let g = random(&[4, 3, 5, 5], 14);
        for mode in AxisMode::ALL {
            let spec = ProjectionSpec::new(mode);
            let c = centralize_mean_sub(&g, spec).unwrap();
            assert!(mu_vector(&c, spec).unwrap().max_abs() < 1e-15);
            let p = centralize_project(&g, spec).unwrap();
            assert!(p.max_abs_diff(&c).unwrap() < 1e-13, "{mode:?}");
        }
    }

    #[test]
    fn one_dimensional_not_centralizable() {
        let b = Tensor::zeros(&[5]);
        assert!(matches!(mu_vector(&b, default_spec()), Err(Error::NotCentralizable { .. })));
        assert!(centralize(&b, default_spec()).is_none());
    }

    #[test]
    fn reduction_of_length_one_is_skipped() {
        let g = random(&[3, 1], 15);
        assert!(!is_centralizable(g.shape(), default_spec()));
        let mut h = g.clone();
        assert!(!centralize_in_place(&mut h, default_spec()));
        assert_eq!(h, g);
    }

    #[test]
    fn equal_rows_centralize_to_zero() {
        // every input-side position holds the same value per output feature
        let g = Tensor::from_rows(&[&[2.0, 2.0, 2.0], &[-1.0, -1.0, -1.0]]);
        assert!(centralize_project(&g, default_spec()).unwrap().max_abs() < 1e-15);
        assert_eq!(centralize_mean_sub(&g, default_spec()).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn projector_is_idempotent() {
        let g = random(&[5, 7], 16);
        let once = centralize_project(&g, default_spec()).unwrap();
        let twice = centralize_project(&once, default_spec()).unwrap();
        assert!(once.max_abs_diff(&twice).unwrap() < 1e-15);
    }

    #[test]
    fn layer_selection() {
        assert_eq!(select_local_layers(4, 1.0).unwrap(), vec![0, 1, 2, 3]);
        assert!(select_local_layers(4, 0.0).unwrap().is_empty());
        assert_eq!(select_local_layers(4, 0.75).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_local_layers(2, 0.5).unwrap(), vec![0]);
        assert!(select_local_layers(4, 1.01).is_err());
        assert!(select_local_layers(4, -0.1).is_err());
        assert!(select_local_layers(4, f64::NAN).is_err());
    }
}
