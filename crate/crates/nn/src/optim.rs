use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: None }
    }
}

/// Adam with bias correction. The moment buffers follow the tensor order of
/// the [`ParamSet`] it was created for.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<_> = params.iter().map(|t| Array2::zeros(t.dim())).collect();
        Self { config, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one descent step. Rejects non-finite gradients without touching
    /// the parameters.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Array2<f64>]) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "adam: gradient count mismatch");
        if let Some(i) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(NnError::NonFiniteGradient { tensor: i });
        }
        let scale = match self.config.max_grad_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(crate::params::ParamId(i));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use crate::tape::Tape;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamSet::new();
        params.push(Array2::from_elem((1, 2), 5.0));
        let mut opt = Adam::new(&params, AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let x = b.var(ParamId(0));
            let shifted = tape.add_scalar(x, -1.0);
            let sq = tape.square(shifted);
            let loss = tape.sum(sq);
            let g = tape.backward(loss);
            let grads = params.grads(&b, &g);
            opt.step(&mut params, &grads).unwrap();
        }
        assert!(params.get(ParamId(0)).iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn nan_gradient_is_rejected_and_params_untouched() {
        let mut params = ParamSet::new();
        params.push(Array2::zeros((1, 1)));
        let before = params.clone();
        let mut opt = Adam::new(&params, AdamConfig::default());
        let err = opt.step(&mut params, &[Array2::from_elem((1, 1), f64::NAN)]);
        assert!(err.is_err());
        assert_eq!(params, before);
    }
}
