use rand::Rng;

use super::graph::ParamGrads;
use super::mat::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Mat,
    trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform `fan_in x fan_out` matrix.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let m = Mat::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit));
        self.add(name, m)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn freeze_all(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = false);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Replaces values by name; every stored parameter must be present with
    /// a matching shape.
    pub fn load_named<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Mat>) -> Result<()> {
        for p in &mut self.params {
            let m = lookup(&p.name).ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", p.name)))?;
            if m.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    p.name,
                    m.shape(),
                    p.value.shape()
                )));
            }
            p.value = m.clone();
        }
        Ok(())
    }

    /// Rounds all values through `f32`, the on-disk precision.
    pub fn round_f32(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.round_f32());
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip: Some(1.0),
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First and second moments by parameter name, for snapshots.
    pub fn moments(&self, store: &ParamStore) -> Vec<(String, Mat, Mat)> {
        store
            .ids()
            .filter_map(|id| {
                let i = id.index();
                match (self.m.get(i)?, self.v.get(i)?) {
                    (Some(m), Some(v)) => Some((store.name(id).to_string(), m.clone(), v.clone())),
                    _ => None,
                }
            })
            .collect()
    }

    /// Inverse of [`Adam::moments`].
    pub fn restore(config: AdamConfig, store: &ParamStore, step: u64, moments: &[(String, Mat, Mat)]) -> Result<Self> {
        let mut adam = Self::new(config);
        adam.step = step;
        adam.m = vec![None; store.len()];
        adam.v = vec![None; store.len()];
        for (name, m, v) in moments {
            let id = store
                .ids()
                .find(|&id| store.name(id) == name)
                .ok_or_else(|| Error::Checkpoint(format!("moment for unknown parameter '{name}'")))?;
            if m.shape() != store.value(id).shape() || v.shape() != m.shape() {
                return Err(Error::Checkpoint(format!("moment shape mismatch for '{name}'")));
            }
            adam.m[id.index()] = Some(m.clone());
            adam.v[id.index()] = Some(v.clone());
        }
        Ok(adam)
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr_scale: f64) -> f64 {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let norm = grads.grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
        let clip = match self.config.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = c.lr * lr_scale;
        for (id, g) in &grads.grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let w = store.value_mut(*id);
            for k in 0..g.len() {
                let gk = g.data()[k] * clip;
                let mk = &mut m.data_mut()[k];
                *mk = c.beta1 * *mk + (1.0 - c.beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = c.beta2 * *vk + (1.0 - c.beta2) * gk * gk;
                let mhat = m.data()[k] / bc1;
                let vhat = v.data()[k] / bc2;
                let wk = &mut w.data_mut()[k];
                *wk -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *wk);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::row_vector(&[3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig {
            clip: None,
            ..AdamConfig::with_lr(0.1)
        });
        for _ in 0..500 {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let sq = g.square(wv);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads, 1.0);
        }
        assert!(store.value(w).sq_norm() < 1e-4);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::row_vector(&[1.0]));
        store.freeze_all();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let loss = g.sum_all(wv);
        let grads = g.backward(loss);
        assert!(grads.grads.is_empty());
    }
}
