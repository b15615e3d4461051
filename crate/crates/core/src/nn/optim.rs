use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::ModelParams;
use crate::tensor::Tensor;

/// Momentum SGD with coupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    /// Fresh state with zero velocity for every parameter group of `model`.
    pub fn new(model: &ModelParams, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        for (key, v) in [("lr", lr), ("momentum", momentum), ("weight_decay", weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(Self {
            velocity: model.zeros_like(),
            lr,
            momentum,
            weight_decay,
        })
    }
}

/// One optimizer step, in place:
/// `g += wd * w; v = m * v + g; w -= lr * v`.
pub fn sgd_step(model: &mut ModelParams, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    model.check_groups(grads, "sgd_step grads")?;
    model.check_groups(&state.velocity, "sgd_step velocity")?;
    let (lr, m, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((w, g), v) in model.groups_mut().into_iter().zip(grads).zip(&mut state.velocity) {
        for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let g_eff = if wd != 0.0 { gi + wd * *wi } else { gi };
            *vi = m * *vi + g_eff;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{Activation, LayerKind, LayerParams};

    fn scalar_model(w: f64) -> ModelParams {
        ModelParams::new(
            vec![1],
            vec![LayerParams {
                kind: LayerKind::FullyConnected,
                weight: Tensor::full(&[1, 1], w),
                bias: None,
                activation: Activation::Identity,
            }],
        )
        .unwrap()
    }

    fn w_of(m: &ModelParams) -> f64 {
        m.layers[0].weight.data()[0]
    }

    #[test]
    fn vanilla_sgd() {
        let mut m = scalar_model(2.0);
        let mut st = OptimizerState::new(&m, 0.1, 0.0, 0.0).unwrap();
        sgd_step(&mut m, &[Tensor::full(&[1, 1], 3.0)], &mut st).unwrap();
        assert!((w_of(&m) - (2.0 - 0.1 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut m = scalar_model(-1.5);
        let mut st = OptimizerState::new(&m, 0.5, 0.9, 0.0).unwrap();
        sgd_step(&mut m, &[Tensor::zeros(&[1, 1])], &mut st).unwrap();
        assert_eq!(w_of(&m), -1.5);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recursion() {
        // v1 = g1, w1 = w0 - lr*v1; v2 = 0.9*v1 + g2, w2 = w1 - lr*v2
        let (w0, g1, g2, lr) = (1.0, 0.5, -0.25, 0.1);
        let v1 = g1;
        let w1 = w0 - lr * v1;
        let v2 = 0.9 * v1 + g2;
        let w2 = w1 - lr * v2;

        let mut m = scalar_model(w0);
        let mut st = OptimizerState::new(&m, lr, 0.9, 0.0).unwrap();
        sgd_step(&mut m, &[Tensor::full(&[1, 1], g1)], &mut st).unwrap();
        sgd_step(&mut m, &[Tensor::full(&[1, 1], g2)], &mut st).unwrap();
        assert!((w_of(&m) - w2).abs() < 1e-15);
        assert!((st.velocity[0].data()[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_added_before_momentum() {
        let mut m = scalar_model(2.0);
        let mut st = OptimizerState::new(&m, 0.1, 0.9, 0.01).unwrap();
        sgd_step(&mut m, &[Tensor::full(&[1, 1], 1.0)], &mut st).unwrap();
        assert!((st.velocity[0].data()[0] - 1.02).abs() < 1e-15);
        assert!((w_of(&m) - (2.0 - 0.102)).abs() < 1e-15);
    }

    #[test]
    fn descends_convex_quadratic_below_stability_limit() {
        // loss = c/2 w^2, gradient c*w; stable for lr < 2/c
        for &c in &[0.5, 1.0, 4.0, 10.0] {
            let lr = 1.9 / c;
            let mut m = scalar_model(3.0);
            let mut st = OptimizerState::new(&m, lr, 0.0, 0.0).unwrap();
            let mut prev = 0.5 * c * 9.0;
            for _ in 0..20 {
                let w = w_of(&m);
                sgd_step(&mut m, &[Tensor::full(&[1, 1], c * w)], &mut st).unwrap();
                let loss = 0.5 * c * w_of(&m).powi(2);
                assert!(loss < prev);
                prev = loss;
            }
        }
    }

    #[test]
    fn negative_coefficients_rejected() {
        let m = scalar_model(0.0);
        assert!(OptimizerState::new(&m, 0.1, -0.1, 0.0).is_err());
        assert!(OptimizerState::new(&m, f64::NAN, 0.0, 0.0).is_err());
    }
}
