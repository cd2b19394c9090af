use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A named real array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of named parameter tensors. This is the unit of
/// serialization, averaging and optimizer updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamBundle {
    entries: IndexMap<String, Tensor>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Shape(format!("parameter bundle has no tensor '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of real scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Same names, same order, same shapes.
    pub fn same_layout(&self, other: &ParamBundle) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape == tb.shape)
    }

    /// Merges `other` into `self`, replacing tensors with equal names.
    pub fn extend(&mut self, other: ParamBundle) {
        for (k, v) in other.entries {
            self.entries.insert(k, v);
        }
    }

    /// Coordinate-wise arithmetic mean of bundles with identical layout.
    /// Accumulated as a running mean, so equal inputs average to
    /// themselves bit for bit.
    pub fn average(bundles: &[ParamBundle]) -> Result<ParamBundle> {
        let first = bundles
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot average an empty list".into()))?;
        if let Some(bad) = bundles.iter().position(|b| !b.same_layout(first)) {
            return Err(Error::Shape(format!(
                "bundle {bad} differs in layout from bundle 0"
            )));
        }
        let mut out = first.clone();
        for (name, t) in out.entries.iter_mut() {
            for (j, v) in t.data.iter_mut().enumerate() {
                for (i, b) in bundles.iter().enumerate().skip(1) {
                    *v += (b.entries[name].data[j] - *v) / (i + 1) as f64;
                }
            }
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
