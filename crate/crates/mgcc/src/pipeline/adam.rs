//! Adam optimizer over the named trainable tensors.

use super::params::TrainableParams;
use crate::config::TrainConfig;
use crate::error::{MgccError, Result};
use crate::Real;
use ndarray::Array2;

/// Optimizer state: hyperparameters, step counter, and per-tensor first and
/// second moment accumulators aligned with [`TrainableParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F: Real> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: usize,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &TrainableParams<F>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Array2<F>> = params
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. `grads` must align with
    /// [`TrainableParams::tensors`] order.
    pub fn apply(&mut self, params: &mut TrainableParams<F>, grads: &[Array2<F>]) -> Result<()> {
        let tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(MgccError::Training(format!(
                "{} gradients for {} tensors",
                grads.len(),
                tensors.len()
            )));
        }
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bias1 = F::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bias2 = F::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = F::from_f64(self.learning_rate);
        let eps = F::from_f64(self.epsilon);

        for (idx, (name, tensor)) in tensors.into_iter().enumerate() {
            let g = &grads[idx];
            if g.dim() != tensor.dim() {
                return Err(MgccError::Training(format!(
                    "gradient shape {:?} does not match tensor {name} {:?}",
                    g.dim(),
                    tensor.dim()
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            ndarray::Zip::from(tensor)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny() -> (TrainableParams<f64>, OptimizerState<f64>, TrainConfig) {
        let model = ModelConfig {
            d: 2,
            e: 4,
            k: 1,
            n: 2,
            base_vocab: 256,
            backbone_layers: 0,
            backbone_heads: 2,
            cmrm_layers: 1,
            cmrm_proj_width: 4,
            cmrm_ffn_depth: 1,
            mapper_width: 4,
            mapper_heads: 1,
            queries: 2,
            conditioning_width: 2,
            image_size: 2,
            image_channels: 1,
        };
        let train = TrainConfig::default();
        let params = TrainableParams::init(&model, 5);
        let opt = OptimizerState::new(&params, &train);
        (params, opt, train)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, step 1 moves each coordinate by exactly
        // lr·g/(|g| + ε·√(1-β₂)) ≈ lr·sign(g).
        let (mut params, mut opt, cfg) = tiny();
        let before = params.h_cap.matrix.clone();
        let grads: Vec<Array2<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| Array2::ones(t.dim()))
            .collect();
        opt.apply(&mut params, &grads).unwrap();
        let moved = &before - &params.h_cap.matrix;
        for &delta in moved.iter() {
            assert!((delta - cfg.learning_rate).abs() < 1e-6);
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn moments_track_parameter_shapes() {
        let (params, opt, _) = tiny();
        for ((_, t), m) in params.tensors().iter().zip(&opt.m) {
            assert_eq!(t.dim(), m.dim());
        }
    }

    #[test]
    fn mismatched_gradient_count_is_rejected() {
        let (mut params, mut opt, _) = tiny();
        assert!(matches!(
            opt.apply(&mut params, &[]),
            Err(MgccError::Training(_))
        ));
    }
}
