use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Adds every tensor to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Binds existing leaves, one per tensor in name order.
    pub fn bind_vars(&self, vars: &[Var]) -> Bound {
        assert_eq!(vars.len(), self.tensors.len(), "one leaf per parameter");
        Bound {
            vars: self
                .tensors
                .keys()
                .cloned()
                .zip(vars.iter().copied())
                .collect(),
        }
    }

    /// Tensors in name order, the order [`ParamStore::bind_vars`] expects.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.tensors.values().cloned().collect()
    }

    /// Gradients of the bound leaves, keyed by parameter name.
    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .map(|(k, t)| {
                let grad = bound
                    .vars
                    .get(k)
                    .and_then(|&v| g.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (k.clone(), grad)
            })
            .collect()
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }
}

pub(crate) fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal() * std).collect();
    Tensor::new(shape, data).expect("shape built from positive extents")
}
