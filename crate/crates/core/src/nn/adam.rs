use std::collections::HashMap;

use ndarray::ArrayD;

use super::params::{Grads, ParamStore};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (name, value) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Forgets moment estimates for parameters no longer in `store`.
    pub fn retain_present(&mut self, store: &ParamStore) {
        self.moments.retain(|k, _| store.contains(k));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut grads = Grads::new();
        grads.accumulate("w", ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, -0.5]).unwrap());
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &grads);
        let w = store.get("w");
        assert!((w[[0]] - 0.9).abs() < 1e-6);
        assert!((w[[1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let mut grads = Grads::new();
            let w = store.get("w")[[0]];
            grads.accumulate("w", ArrayD::from_elem(IxDyn(&[1]), 2.0 * (w - 2.0)));
            adam.step(&mut store, &grads);
        }
        assert!((store.get("w")[[0]] - 2.0).abs() < 1e-2);
    }
}
