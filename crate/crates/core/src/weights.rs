use indexmap::IndexMap;

use crate::tensor::{Real, Result, Tensor, TensorError};

/// Ordered, uniquely named collection of tensors. Iteration order is
/// insertion order, which is the canonical order on the wire.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights<T: Real = f32> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ModelWeights<T> {
    pub fn new() -> Self {
        ModelWeights {
            tensors: IndexMap::new(),
        }
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(TensorError::Contract(format!(
                "duplicate tensor name {name:?}"
            )));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Same names, same order, same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    /// Bit-level equality, distinguishing `-0.0` from `0.0` and comparing NaNs by payload.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.same_layout(other)
            && self
                .tensors
                .values()
                .zip(other.tensors.values())
                .all(|(a, b)| {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
                })
    }
}

impl<T: Real> FromIterator<(String, Tensor<T>)> for ModelWeights<T> {
    /// Later duplicates replace earlier entries in place.
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ModelWeights {
            tensors: iter.into_iter().collect(),
        }
    }
}

impl<'a, T: Real> IntoIterator for &'a ModelWeights<T> {
    type Item = (&'a String, &'a Tensor<T>);
    type IntoIter = indexmap::map::Iter<'a, String, Tensor<T>>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.iter()
    }
}
