//! Named trainable parameters and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseArray>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    /// Uniform `±sqrt(6 / fan_in)` initialization.
    pub fn insert_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, DenseArray::new(shape, data).expect("valid shape"));
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn require(&self, name: &str) -> Result<&DenseArray> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn total_len(&self) -> usize {
        self.values.iter().map(DenseArray::len).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(DenseArray::norm_sq).sum::<f64>().sqrt()
    }

    /// Hex SHA-256 over names, shapes and exact `f64` bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self.values.iter().map(|v| tape.param(v.clone())).collect();
        Bound { store: self, vars }
    }

    /// Copies values from `other` for every name both stores share.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, value) in other.iter() {
            let dst = self
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            value.expect_same_shape(dst)?;
            *dst = value.clone();
        }
        Ok(())
    }
}

/// Parameters bound to a particular tape.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
    }

    /// Gradients aligned with the store order; missing entries become zeros.
    pub fn collect(&self, grads: &Gradients) -> Vec<DenseArray> {
        self.vars
            .iter()
            .zip(&self.store.values)
            .map(|(&v, value)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| DenseArray::zeros(value.shape()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// Bias-corrected Adam over every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.values.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[DenseArray]) -> Result<f64> {
        if grads.len() != store.values.len() {
            return Err(Error::Dimension("gradient count does not match parameters".into()));
        }
        let norm = grads.iter().map(DenseArray::norm_sq).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let clip = match self.config.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = store.values[i].data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", DenseArray::from_vec(vec![3.0, -2.0]));
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
        );
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let x = b.var("x").unwrap();
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            let g = tape.backward(loss).unwrap();
            let grads = b.collect(&g);
            opt.update(&mut store, &grads).unwrap();
        }
        assert!(store.get("x").unwrap().max_abs() < 1e-3);
    }

    #[test]
    fn clipping_scales_step() {
        let mut store = ParamStore::new();
        store.insert("x", DenseArray::from_vec(vec![0.0]));
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                lr: 1.0,
                max_grad_norm: Some(1.0),
                ..AdamConfig::default()
            },
        );
        let norm = opt.update(&mut store, &[DenseArray::from_vec(vec![100.0])]).unwrap();
        assert_eq!(norm, 100.0);
        // first Adam step moves by ~lr regardless of scale
        assert!((store.get("x").unwrap().data()[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn fingerprint_tracks_every_bit() {
        let mut s = ParamStore::new();
        s.insert("a", DenseArray::from_vec(vec![1.0, 2.0]));
        let before = s.fingerprint();
        assert_eq!(before, s.clone().fingerprint());
        s.get_mut("a").unwrap().data_mut()[1] = f64::from_bits(2.0f64.to_bits() + 1);
        assert_ne!(before, s.fingerprint());
    }

    #[test]
    fn replacing_keeps_order() {
        let mut s = ParamStore::new();
        s.insert("a", DenseArray::scalar(1.0));
        s.insert("b", DenseArray::scalar(2.0));
        s.insert("a", DenseArray::scalar(3.0));
        assert_eq!(s.names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(s.get("a").unwrap().data(), &[3.0]);
    }
}
