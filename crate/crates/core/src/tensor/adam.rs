//! Adam with bias correction and optional decoupled L2 weight decay.

use super::{Params, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty coefficient; added to the gradient as `weight_decay * w`.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar = f32> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub step_count: u64,
}

/// Optimizer over one parameter set; state `i` belongs to parameter `i`.
#[derive(Clone, Debug)]
pub struct Adam<S: Scalar = f32> {
    pub cfg: AdamConfig,
    states: Vec<AdamState<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, params: &Params<S>) -> Self {
        let states = params
            .iter()
            .map(|p| AdamState {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                step_count: 0,
            })
            .collect();
        Adam { cfg, states }
    }

    pub fn states(&self) -> &[AdamState<S>] {
        &self.states
    }

    /// One update over every parameter from its accumulated gradient.
    /// Fails fast on non-finite gradients rather than propagating NaNs
    /// into the weights.
    pub fn step(&mut self, params: &mut Params<S>) -> Result<()> {
        if self.states.len() != params.len() {
            return Err(Error::Optim(format!(
                "optimizer tracks {} parameters, got {}",
                self.states.len(),
                params.len()
            )));
        }
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let eps = S::from_f64(self.cfg.eps);
        let wd = S::from_f64(self.cfg.weight_decay);
        let apply_wd = self.cfg.weight_decay != 0.0;
        for (i, st) in self.states.iter_mut().enumerate() {
            let p = params.get_mut(i);
            if !p.grad.all_finite() {
                return Err(Error::Optim(format!(
                    "non-finite gradient in parameter `{}`",
                    p.name
                )));
            }
            st.step_count += 1;
            let c1 = S::ONE / (S::ONE - S::from_f64(self.cfg.beta1.powi(st.step_count as i32)));
            let c2 = S::ONE / (S::ONE - S::from_f64(self.cfg.beta2.powi(st.step_count as i32)));
            let lr = S::from_f64(self.cfg.lr);
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let ms = st.m.data_mut();
            let vs = st.v.data_mut();
            for j in 0..values.len() {
                let g = if apply_wd {
                    grads[j] + wd * values[j]
                } else {
                    grads[j]
                };
                ms[j] = b1 * ms[j] + (S::ONE - b1) * g;
                vs[j] = b2 * vs[j] + (S::ONE - b2) * g * g;
                let m_hat = ms[j] * c1;
                let v_hat = vs[j] * c2;
                values[j] = values[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut ps: Params<f32> = Params::new();
        ps.push("w", Tensor::full(&[3], 1.5));
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &ps);
        opt.step(&mut ps).unwrap();
        assert!(ps.get(0).value.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // Constant gradient 1: bias-corrected first step is lr / (1 + eps').
        let mut ps: Params<f32> = Params::new();
        ps.push("w", Tensor::full(&[1], 0.0));
        ps.get_mut(0).grad.data_mut()[0] = 1.0;
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &ps);
        opt.step(&mut ps).unwrap();
        let w = ps.get(0).value.data()[0];
        assert!((w + 0.1).abs() < 1e-5, "w = {w}");
    }

    #[test]
    fn converges_on_quadratic() {
        // min (w - 3)^2 from 0, 2000 steps at lr 0.05.
        let mut ps: Params<f32> = Params::new();
        ps.push("w", Tensor::full(&[1], 0.0));
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), &ps);
        for _ in 0..2000 {
            let w = ps.get(0).value.data()[0];
            ps.zero_grads();
            ps.get_mut(0).grad.data_mut()[0] = 2.0 * (w - 3.0);
            opt.step(&mut ps).unwrap();
        }
        let w = ps.get(0).value.data()[0];
        assert!((w - 3.0).abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut ps: Params<f32> = Params::new();
        ps.push("w", Tensor::full(&[1], 0.0));
        ps.get_mut(0).grad.data_mut()[0] = f32::NAN;
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &ps);
        assert!(opt.step(&mut ps).is_err());
    }

    #[test]
    fn weight_decay_shrinks_weights() {
        let mut ps: Params<f32> = Params::new();
        ps.push("w", Tensor::full(&[1], 1.0));
        let mut cfg = AdamConfig::with_lr(0.01);
        cfg.weight_decay = 10.0;
        let mut opt = Adam::new(cfg, &ps);
        for _ in 0..200 {
            ps.zero_grads();
            opt.step(&mut ps).unwrap();
        }
        let w = ps.get(0).value.data()[0];
        assert!(w.abs() < 0.05, "w = {w}");
    }
}
