//! Parameter management, optimizers and shared network building blocks.

pub mod adamw;
pub mod blocks;

use crate::graph::{Graph, Grads, NodeId, Real};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

/// Ordered, named parameter tensors. Iteration order is insertion order and
/// is part of every downstream contract (optimizer state, checkpoints,
/// checksums).
#[derive(Clone, Debug)]
pub struct ParamStore<F: Real> {
    entries: IndexMap<String, ArrayD<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<F>)> {
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

    /// Merges another store under a namespace prefix.
    pub fn adopt(&mut self, prefix: &str, other: ParamStore<F>) {
        for (k, v) in other.entries {
            self.insert(format!("{prefix}{k}"), v);
        }
    }

    /// Splits off all parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (k, v) in &self.entries {
            if k.starts_with(prefix) {
                out.insert(k.clone(), v.clone());
            }
        }
        out
    }

    /// Removes a namespace prefix from every entry (panics on a miss).
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (k, v) in &self.entries {
            out.insert(
                k.strip_prefix(prefix)
                    .unwrap_or_else(|| panic!("{k} lacks prefix {prefix}"))
                    .to_string(),
                v.clone(),
            );
        }
        out
    }

    /// Binds every parameter as a differentiable graph variable.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        let mut ids = IndexMap::new();
        for (k, v) in &self.entries {
            ids.insert(k.clone(), g.variable(v.clone()));
        }
        Bound { ids }
    }

    /// Binds every parameter as a constant (frozen evaluation).
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> Bound {
        let mut ids = IndexMap::new();
        for (k, v) in &self.entries {
            ids.insert(k.clone(), g.constant(v.clone()));
        }
        Bound { ids }
    }

    /// SHA-256 over names and little-endian payload bytes, in order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            h.update(k.as_bytes());
            h.update([0u8]);
            for x in v.iter() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, v) in &self.entries {
            out.insert(k.clone(), v.mapv(|x| T::from_f64(x.as_f64())));
        }
        out
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Node ids for a bound [`ParamStore`], keyed by parameter name.
pub struct Bound {
    ids: IndexMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradients for every parameter, zeros where a parameter is unused.
    pub fn collect_grads<F: Real>(
        &self,
        grads: &Grads<F>,
        store: &ParamStore<F>,
    ) -> Vec<ArrayD<F>> {
        store
            .iter()
            .map(|(name, value)| grads.get_or_zeros(self.id(name), value.shape()))
            .collect()
    }
}

// ---- initializers ----

/// Uniform Xavier/Glorot init, seeded by (seed, name) so layouts do not
/// depend on construction order.
pub fn xavier<F: Real>(seed: u64, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<F> {
    use rand::Rng;
    let mut rng = crate::rng::stream(seed, name, 0);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<F> = (0..shape.iter().product::<usize>())
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Normal init with the given std, seeded by (seed, name).
pub fn normal_init<F: Real>(seed: u64, name: &str, shape: &[usize], std: f64) -> ArrayD<F> {
    let mut rng = crate::rng::stream(seed, name, 0);
    let data: Vec<F> = (0..shape.iter().product::<usize>())
        .map(|_| F::from_f64(crate::rng::normal(&mut rng) * std))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros<F: Real>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<F: Real>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::one())
}

/// Linear layer applied over the last axis of an arbitrarily-batched input.
pub fn linear<F: Real>(
    g: &mut Graph<F>,
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
) -> NodeId {
    let in_shape = g.shape(x).to_vec();
    let cin = *in_shape.last().unwrap();
    let cout = g.shape(w)[1];
    let rows: usize = in_shape[..in_shape.len() - 1].iter().product();
    let flat = g.reshape(x, &[rows, cin]);
    let mut y = g.matmul(flat, w);
    if let Some(b) = b {
        y = g.add(y, b);
    }
    let mut out_shape = in_shape;
    *out_shape.last_mut().unwrap() = cout;
    g.reshape(y, &out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_and_adopt_preserve_namespaces() {
        let mut store = ParamStore::<f32>::new();
        store.insert("vae.enc.w", zeros(&[2, 2]));
        store.insert("mapper.proj.w", zeros(&[3]));
        let mapper = store.subset("mapper.");
        assert_eq!(mapper.len(), 1);
        let mut merged = ParamStore::<f32>::new();
        merged.adopt("again.", mapper);
        assert_eq!(merged.names().next(), Some("again.mapper.proj.w"));
    }

    #[test]
    fn checksum_tracks_values() {
        let mut a = ParamStore::<f32>::new();
        a.insert("w", ones(&[4]));
        let c1 = a.checksum();
        a.get_mut("w")[[0]] = 2.0;
        assert_ne!(c1, a.checksum());
    }
}
