//! Adam variants used for Engram parameters.
//!
//! Embedding rows use a lazy sparse Adam: moments and step counters exist
//! only for rows that have received a gradient, and bias correction uses the
//! row's own step count. Dense layer weights use plain Adam.

use serde::{Deserialize, Serialize};

use super::{Element, RowState};
use crate::error::{config_err, Result};

/// Hyper-parameters of the embedding optimizer. The effective learning rate
/// is `lr_base * lr_multiplier`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparseAdamConfig {
    pub lr_base: f64,
    pub lr_multiplier: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for SparseAdamConfig {
    fn default() -> Self {
        Self {
            lr_base: 4e-4,
            lr_multiplier: 5.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl SparseAdamConfig {
    pub fn with_lr(lr_base: f64) -> Self {
        Self {
            lr_base,
            ..Self::default()
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr_base * self.lr_multiplier
    }

    /// Embedding rows are never weight-decayed; any other value is an error.
    pub fn validate(&self) -> Result<()> {
        if self.weight_decay != 0.0 {
            return config_err(format!(
                "embedding weight decay must be 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.lr_base.is_finite() && self.lr_base >= 0.0) || !(self.lr_multiplier > 0.0) {
            return config_err("learning rate and multiplier must be non-negative and finite");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config_err("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return config_err("Adam epsilon must be positive");
        }
        Ok(())
    }
}

pub(crate) fn adam_row_update<F: Element>(cfg: &SparseAdamConfig, param: &mut [F], grad: &[F], state: &mut RowState<F>) {
    state.step += 1;
    let b1 = F::from(cfg.beta1).unwrap();
    let b2 = F::from(cfg.beta2).unwrap();
    let one = F::one();
    let bc1 = F::from(1.0 - cfg.beta1.powi(state.step as i32)).unwrap();
    let bc2 = F::from(1.0 - cfg.beta2.powi(state.step as i32)).unwrap();
    let lr = F::from(cfg.effective_lr()).unwrap();
    let eps = F::from(cfg.eps).unwrap();
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Plain Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct DenseAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl DenseAdam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter length changed");
        assert_eq!(grads.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::hasher::{plan_retrieval, NGramConfig};
    use crate::store::ShardedStore;

    fn one_row_store() -> (ShardedStore<f64>, crate::hasher::RetrievalPlan) {
        let cfg = NGramConfig::new(vec![2], 1, 3, vec![11]).unwrap();
        let store = ShardedStore::zeros(0, &cfg.table_keys(), cfg.table_sizes(), 4, 2).unwrap();
        let plan = plan_retrieval(&[5], &cfg, 9);
        (store, plan)
    }

    #[test]
    fn first_step_moves_by_effective_lr() {
        let (mut store, plan) = one_row_store();
        store.scatter_add(&plan, Array2::ones((1, 4)).view()).unwrap();
        let n = store.sparse_adam_step(&SparseAdamConfig::with_lr(1e-3)).unwrap();
        assert_eq!(n, 1);
        let row = plan.index(0, 0);
        // m_hat / sqrt(v_hat) = 1 on the first step
        let expect = -5e-3 / (1.0 + 1e-8 / 1.0);
        for &x in store.row(0, row) {
            assert!((x - expect).abs() < 1e-15, "{x}");
        }
        assert_eq!(store.row_step(0, row), 1);
        assert_eq!(store.state_rows(0), 1);
        assert!(store.touched_rows(0).is_empty());
    }

    #[test]
    fn untouched_rows_are_bit_identical() {
        let cfg = NGramConfig::new(vec![2], 1, 3, vec![31]).unwrap();
        let mut store =
            ShardedStore::<f32>::random_normal(0, &cfg.table_keys(), &[31], 3, 0.5, 9, 3).unwrap();
        let before = store.to_tables();
        let plan = plan_retrieval(&[1, 2], &cfg, 40);
        store.scatter_add(&plan, Array2::from_elem((2, 3), 0.25).view()).unwrap();
        store.sparse_adam_step(&SparseAdamConfig::default()).unwrap();
        let touched: Vec<u64> = (0..2).map(|t| plan.index(t, 0)).collect();
        let after = store.to_tables();
        for r in 0..31u64 {
            let same = before[0].row(r) == after[0].row(r);
            assert_eq!(same, !touched.contains(&r), "row {r}");
        }
        assert_eq!(store.state_rows(0), {
            let mut t = touched.clone();
            t.dedup();
            t.len()
        });
    }

    #[test]
    fn zero_grad_on_fresh_row_does_not_move() {
        let (mut store, plan) = one_row_store();
        store.scatter_add(&plan, Array2::zeros((1, 4)).view()).unwrap();
        store.sparse_adam_step(&SparseAdamConfig::with_lr(1e-2)).unwrap();
        assert!(store.row(0, plan.index(0, 0)).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_grad_after_momentum_keeps_moving() {
        let (mut store, plan) = one_row_store();
        let cfg = SparseAdamConfig::with_lr(1e-2);
        store.scatter_add(&plan, Array2::ones((1, 4)).view()).unwrap();
        store.sparse_adam_step(&cfg).unwrap();
        let after_one = store.row(0, plan.index(0, 0))[0];
        store.scatter_add(&plan, Array2::zeros((1, 4)).view()).unwrap();
        store.sparse_adam_step(&cfg).unwrap();
        let after_two = store.row(0, plan.index(0, 0))[0];
        assert!(after_two < after_one);
    }

    #[test]
    fn weight_decay_is_rejected() {
        let cfg = SparseAdamConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let (mut store, _) = one_row_store();
        assert!(store.sparse_adam_step(&cfg).is_err());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (mut store, plan) = one_row_store();
        let mut g = Array2::ones((1, 4));
        g[[0, 2]] = f64::NAN;
        store.scatter_add(&plan, g.view()).unwrap();
        assert!(store.sparse_adam_step(&SparseAdamConfig::default()).is_err());
        assert!(store.row(0, plan.index(0, 0)).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn dense_adam_first_step() {
        let mut p = vec![1.0, -1.0];
        let mut opt = DenseAdam::new(2, 0.1);
        opt.step(&mut p, &[2.0, -3.0]);
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] + 0.9).abs() < 1e-8);
    }
}
