use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use crate::scalar::Scalar;

/// FNV-1a over bytes; used for seed derivation and parameter fingerprints.
pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Named trainable leaves plus the seed that initialized them.
///
/// Each parameter draws from its own generator seeded by `(seed, name)`,
/// so initialization does not depend on registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    seed: u64,
    params: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(fnv1a(name.bytes(), FNV_OFFSET ^ self.seed))
    }

    /// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn init_matrix(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let data = (0..fan_in * fan_out)
            .map(|_| T::of(rng.gen_range(-a..a)))
            .collect();
        self.insert(name, Array::new(vec![fan_in, fan_out], data).expect("sized"));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Array::zeros(shape));
    }

    pub fn init_full(&mut self, name: &str, shape: &[usize], value: T) {
        self.insert(name, Array::full(shape, value));
    }

    pub fn insert(&mut self, name: &str, value: Array<T>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    /// Order-stable hash of every name, shape and value bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for (name, a) in &self.params {
            h = fnv1a(name.bytes(), h);
            for &d in a.shape() {
                h = fnv1a((d as u64).to_le_bytes(), h);
            }
            for &x in a.data() {
                h = fnv1a(x.as_f64().to_bits().to_le_bytes(), h);
            }
        }
        h
    }
}

/// One gradient array per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .iter()
                .map(|(k, v)| (k.clone(), Array::zeros(v.shape())))
                .collect(),
        }
    }

    pub(crate) fn insert(&mut self, name: String, g: Array<T>) {
        self.grads.insert(name, g);
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise accumulation; names missing from `self` are adopted.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.grads.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Array::all_finite)
    }
}
