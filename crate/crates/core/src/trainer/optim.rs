use crate::error::{CtsError, Result};
use crate::model::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CtsError::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(CtsError::config(format!("{} must lie in [0, 1), got {}", name, b)));
            }
        }
        if !(self.eps > 0.0) {
            return Err(CtsError::config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam moments, one pair per trainable tensor in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the gradients held in `store`.
    /// Every trainable tensor must carry a gradient.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.trainable_ids().collect();
        for &id in &ids {
            if store.get(id).grad().is_none() {
                return Err(CtsError::usage(format!("parameter `{}` has no gradient", store.name(id))));
            }
        }
        if self.m.is_empty() {
            self.m = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != ids.len() {
            return Err(CtsError::usage(format!(
                "optimizer tracks {} tensors but the store has {} trainable",
                self.m.len(),
                ids.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, &id) in ids.iter().enumerate() {
            let t = store.get_mut(id);
            let g: Vec<f64> = t.grad().expect("checked above").iter().map(|x| x.as_f64()).collect();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *p = T::from_f64(p.as_f64() - update);
            }
        }
        Ok(())
    }
}
