//! Named parameter storage and binding onto a tape.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Element, GradMap, Tape, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Copies entries whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (k, v) in other.iter() {
            if k.starts_with(prefix) {
                self.insert(k, v.clone());
            }
        }
    }

    /// Records every parameter as a leaf; `trainable(name)` decides which
    /// ones require gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k))))
            .collect();
        Bound { vars }
    }

    /// Adds a normal-initialised matrix truncated at two standard deviations.
    pub fn init_trunc_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break T::from_f64_lossy(z * std);
                }
            })
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    /// Adds independent `N(0, std^2)` noise to every element.
    pub fn jitter(&mut self, std: f64, rng: &mut impl Rng) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = T::from_f64_lossy(v.to_f64().unwrap_or(0.0) + z * std);
            }
        }
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, T::from_f64_lossy(value)));
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` not bound")))
    }

    /// Rebinds `name` to another tape variable, e.g. a leaf under test.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    /// Pulls the gradient of every bound parameter out of `grads`. Parameters
    /// that did not receive a gradient are omitted.
    pub fn grads<T: Element>(&self, grads: &mut GradMap<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}
