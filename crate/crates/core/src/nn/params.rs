//! Named parameter collections, initialisation and the Adam optimiser.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::graph::{Grads, Graph, Var};
use super::tensor::{Real, Tensor};

/// Ordered `name → tensor` map. Iteration order is lexicographic, so hashing
/// and serialisation are stable.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    /// Parameters whose name starts with `prefix`, with the prefix kept.
    pub fn with_prefix(&self, prefix: &str) -> Params<T> {
        Params {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Params<T>) {
        self.map.extend(other.map);
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and f32 little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.map {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Creates graph leaves for every parameter.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        self.bind_where(g, |_| trainable)
    }

    pub fn bind_where<'g>(
        &self,
        g: &'g Graph<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Bound<'g, T> {
        Bound {
            vars: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable(k))))
                .collect(),
        }
    }
}

/// Parameters bound into a particular graph.
pub struct Bound<'g, T: Real> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Var<'g, T> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g, T>> {
        self.vars.get(name).copied()
    }

    /// Collects gradients of every trainable parameter.
    pub fn grads(&self, grads: &mut Grads<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(_, v)| v.needs_grad())
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }

    pub fn conv(&self, prefix: &str, x: Var<'g, T>, stride: usize, pad: usize) -> Var<'g, T> {
        x.conv2d(
            self.get(&format!("{prefix}.w")),
            self.get(&format!("{prefix}.b")),
            stride,
            pad,
        )
    }

    pub fn linear(&self, prefix: &str, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(
            self.get(&format!("{prefix}.w")),
            self.get(&format!("{prefix}.b")),
        )
    }
}

/// Uniform fan-in initialisation for a 3×3 (or k×k) convolution.
pub fn init_conv<T: Real>(
    p: &mut Params<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    let fan_in = cin * k * k;
    let bound = 1.0 / (fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), uniform(rng, &[cout, cin, k, k], bound));
    p.insert(format!("{name}.b"), uniform(rng, &[cout], bound));
}

pub fn init_linear<T: Real>(
    p: &mut Params<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    din: usize,
    dout: usize,
) {
    let bound = 1.0 / (din as f64).sqrt();
    p.insert(format!("{name}.w"), uniform(rng, &[din, dout], bound));
    p.insert(format!("{name}.b"), uniform(rng, &[dout], bound));
}

pub fn init_zero<T: Real>(p: &mut Params<T>, name: &str, shape: &[usize]) {
    p.insert(name, Tensor::zeros(shape));
}

pub fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| T::from_f64c(rng.random_range(-bound..bound) as f32 as f64))
            .collect(),
    )
}

pub fn normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64c(z * std)
            })
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut Params<T>, grads: &BTreeMap<String, Tensor<T>>) {
        self.step += 1;
        let c = self.cfg;
        let mut clip = 1.0;
        if c.clip_norm > 0.0 {
            let norm: f64 = grads
                .values()
                .flat_map(|g| g.data().iter())
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > c.clip_norm {
                clip = c.clip_norm / norm;
            }
        }
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let (b1, b2) = (T::from_f64c(c.beta1), T::from_f64c(c.beta2));
            let one = T::one();
            let lr_t = T::from_f64c(c.lr / bc1);
            let bc2_t = T::from_f64c(bc2);
            let eps = T::from_f64c(c.eps);
            let clip_t = T::from_f64c(clip);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gv = gv * clip_t;
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv = *pv - lr_t * *mv / ((*vv / bc2_t).sqrt() + eps);
            }
        }
    }
}
