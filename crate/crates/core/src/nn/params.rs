use std::collections::BTreeMap;

use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Ix1, Ix2, Ix3, Ix4, IxDyn};
use rand::Rng;

/// Named trainable arrays, kept in registration order.
///
/// Modules hold the names of their parameters and look them up here during
/// forward and backward passes; optimizer state and checkpoints key on the
/// same names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> String {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "parameter {name} registered twice");
        name
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> String {
        self.insert(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> String {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-bound..=bound));
        self.insert(name, value)
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn view1(&self, name: &str) -> ArrayView1<'_, f64> {
        self.get(name).view().into_dimensionality::<Ix1>().unwrap()
    }

    pub fn view2(&self, name: &str) -> ArrayView2<'_, f64> {
        self.get(name).view().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn view3(&self, name: &str) -> ArrayView3<'_, f64> {
        self.get(name).view().into_dimensionality::<Ix3>().unwrap()
    }

    pub fn view4(&self, name: &str) -> ArrayView4<'_, f64> {
        self.get(name).view().into_dimensionality::<Ix4>().unwrap()
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate<D: ndarray::Dimension>(&mut self, name: &str, grad: ndarray::Array<f64, D>) {
        let grad = grad.into_dyn();
        match self.map.get_mut(name) {
            Some(acc) => *acc += &grad,
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            *g *= factor;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
