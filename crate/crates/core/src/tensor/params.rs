use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Trainable,
    /// Running statistics (batchnorm moving mean/variance).
    NonTrainable,
}

/// Ordered named-tensor table holding one network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights<T> {
    entries: IndexMap<String, (Tensor<T>, ParamKind)>,
}

impl<T: Real> Default for NetworkWeights<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> NetworkWeights<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Inserts a tensor; trainable tensors get a gradient buffer.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>, kind: ParamKind) {
        tensor.set_requires_grad(kind == ParamKind::Trainable);
        self.entries.insert(name.into(), (tensor, kind));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|(t, _)| t)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|(t, _)| t)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|(_, k)| *k)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, ParamKind)> {
        self.entries.iter().map(|(n, (t, k))| (n.as_str(), t, *k))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, ParamKind)> {
        self.entries.iter_mut().map(|(n, (t, k))| (n.as_str(), t, *k))
    }

    /// (total, trainable, non-trainable) scalar counts.
    pub fn count_params(&self) -> (usize, usize, usize) {
        let mut trainable = 0;
        let mut frozen = 0;
        for (t, k) in self.entries.values() {
            match k {
                ParamKind::Trainable => trainable += t.len(),
                ParamKind::NonTrainable => frozen += t.len(),
            }
        }
        (trainable + frozen, trainable, frozen)
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(|(t, _)| t.zero_grad());
    }

    /// Multiplies every accumulated gradient by `factor`.
    pub fn scale_grads(&mut self, factor: T) {
        for (t, _) in self.entries.values_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|(t, _)| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> NetworkWeights<U> {
        let mut out = NetworkWeights::new();
        for (name, (t, k)) in &self.entries {
            out.insert(name.clone(), t.cast::<U>(), *k);
        }
        out
    }

    /// Sets every value (including running statistics) to zero.
    pub fn fill_zero(&mut self) {
        for (t, _) in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_counts() {
        assert_eq!(NetworkWeights::<f32>::new().count_params(), (0, 0, 0));
    }

    #[test]
    fn counts_split_by_kind() {
        let mut w = NetworkWeights::<f64>::new();
        w.insert("a", Tensor::zeros(&[3, 4]), ParamKind::Trainable);
        w.insert("b", Tensor::zeros(&[5]), ParamKind::NonTrainable);
        assert_eq!(w.count_params(), (17, 12, 5));
        assert!(w.get("a").unwrap().grad().is_some());
        assert!(w.get("b").unwrap().grad().is_none());
        assert!(matches!(w.get("c"), Err(TensorError::UnknownParameter(_))));
        assert_eq!(w.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }
}
