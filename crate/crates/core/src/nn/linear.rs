use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::params::{Grads, ParamStore};

/// Affine map `y = x W^T + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_features: usize,
    pub out_features: usize,
}

/// How a fresh [`Linear`] is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearInit {
    /// Uniform in `±sqrt(3 / fan_in)`.
    FanIn,
    Zeros,
    /// Identity on the leading square block plus uniform noise of the given
    /// half-width.
    Identity(f64),
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: LinearInit,
        rng: &mut R,
    ) -> Self {
        let shape = [out_features, in_features];
        let weight = match init {
            LinearInit::FanIn => {
                let bound = (3.0 / in_features as f64).sqrt();
                store.uniform(format!("{name}.weight"), &shape, bound, rng)
            }
            LinearInit::Zeros => store.zeros(format!("{name}.weight"), &shape),
            LinearInit::Identity(noise) => {
                let key = store.uniform(format!("{name}.weight"), &shape, noise, rng);
                let w = store.get_mut(&key);
                for i in 0..in_features.min(out_features) {
                    w[[i, i]] += 1.0;
                }
                key
            }
        };
        let bias = store.zeros(format!("{name}.bias"), &[out_features]);
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&store.view2(&self.weight).t());
        y += &store.view1(&self.bias);
        y
    }

    /// Accumulates parameter gradients (when `grads` is given) and returns the
    /// input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
        grads: Option<&mut Grads>,
    ) -> Array2<f64> {
        if let Some(grads) = grads {
            grads.accumulate(&self.weight, dy.t().dot(x));
            grads.accumulate(&self.bias, dy.sum_axis(Axis(0)));
        }
        dy.dot(&store.view2(&self.weight))
    }
}
