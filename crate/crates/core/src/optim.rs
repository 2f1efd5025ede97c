//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moments plus the shared step count.
pub struct OptimizerState<T> {
    pub cfg: AdamWConfig,
    /// Step count; increments by exactly 1 per `step`.
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(cfg: AdamWConfig, params: &[Tensor<T>]) -> Self {
        OptimizerState {
            cfg,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    /// One AdamW step over all parameters:
    /// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`, bias-corrected `m̂`,`v̂`,
    /// `w ← w − lr·wd·w − lr·m̂/(√v̂ + ε)`.
    ///
    /// Refuses the step (parameters untouched) if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>]) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(params.len(), grads.len());
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params[i].shape() {
                    return Err(Error::shape("adamw_step", params[i].shape(), g.shape()));
                }
                if !g.all_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite gradient for parameter {i}, step refused"
                    )));
                }
            }
        }
        self.t += 1;
        let b1 = T::of_f64(self.cfg.beta1);
        let b2 = T::of_f64(self.cfg.beta2);
        let one = T::one();
        let lr = T::of_f64(self.cfg.lr);
        let wd = T::of_f64(self.cfg.weight_decay);
        let eps = T::of_f64(self.cfg.eps);
        let bc1 = T::of_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::of_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = g else { continue };
            for (((w, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w = *w - lr * wd * *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(v)]
    }

    /// Hand-computed single step: decay term 0.001, update term ≈ 0.1.
    #[test]
    fn hand_computed_first_step() {
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut params = one_param(1.0);
        let mut st = OptimizerState::new(cfg, &params);
        st.step(&mut params, &[Some(Tensor::scalar(0.5))]).unwrap();
        assert!((params[0].item() - 0.899).abs() < 1e-6, "{}", params[0].item());
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = one_param(0.73);
        let mut st = OptimizerState::new(AdamWConfig::default(), &params);
        st.step(&mut params, &[Some(Tensor::scalar(0.0))]).unwrap();
        assert_eq!(params[0].item(), 0.73);
    }

    /// With β1=β2=0 the update reduces to lr·g/(|g|+ε) plus decay.
    #[test]
    fn zero_betas_reduce_to_sign_sgd() {
        let cfg = AdamWConfig {
            lr: 0.05,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            weight_decay: 0.02,
        };
        let mut params = one_param(2.0);
        let mut st = OptimizerState::new(cfg, &params);
        let mut w = 2.0f64;
        for &g in &[0.3, -0.7] {
            st.step(&mut params, &[Some(Tensor::scalar(g))]).unwrap();
            w = w - cfg.lr * cfg.weight_decay * w - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((params[0].item() - w).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_zero_leaves_parameters_bit_identical() {
        let cfg = AdamWConfig {
            lr: 0.0,
            weight_decay: 0.37,
            ..AdamWConfig::default()
        };
        let mut params = vec![Tensor::new(vec![3], vec![0.1f32, -2.5, 7.75]).unwrap()];
        let before: Vec<u32> = params[0].data().iter().map(|v| v.to_bits()).collect();
        let mut st = OptimizerState::new(cfg, &params);
        st.step(&mut params, &[Some(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())])
            .unwrap();
        let after: Vec<u32> = params[0].data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn non_finite_grad_refuses_step() {
        let mut params = one_param(1.0);
        let mut st = OptimizerState::new(AdamWConfig::default(), &params);
        let err = st.step(&mut params, &[Some(Tensor::scalar(f64::NAN))]);
        assert!(err.is_err());
        assert_eq!(params[0].item(), 1.0);
        assert_eq!(st.t, 0);
    }
}
