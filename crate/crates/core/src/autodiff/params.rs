use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Named collection of tensors. Iteration order is the lexicographic order of
/// the names, so flattening is deterministic.
///
/// The same type carries parameters and gradient maps; two sets with identical
/// names and shapes support element-wise arithmetic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Replaces the tensor stored under `name`; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamSet::set",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Merges two sets with disjoint names.
    pub fn merge(mut self, other: ParamSet) -> Result<Self> {
        for (name, t) in other.tensors {
            self.insert(name, t)?;
        }
        Ok(self)
    }

    /// Subset whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    fn check_compatible(&self, other: &ParamSet, op: &'static str) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            let missing = self
                .tensors
                .keys()
                .find(|k| !other.tensors.contains_key(*k))
                .or_else(|| other.tensors.keys().find(|k| !self.tensors.contains_key(*k)));
            return Err(Error::MissingParam(
                missing.cloned().unwrap_or_else(|| op.to_string()),
            ));
        }
        for (name, t) in &self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: t.shape().to_vec(),
                    rhs: o.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &ParamSet, scale: f64) -> Result<ParamSet> {
        let mut out = self.clone();
        out.add_scaled_in_place(other, scale)?;
        Ok(out)
    }

    /// `self += scale * other`.
    pub fn add_scaled_in_place(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        self.check_compatible(other, "ParamSet::add_scaled")?;
        for (name, t) in self.tensors.iter_mut() {
            let o = &other.tensors[name];
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn scaled(&self, scale: f64) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| x * scale)))
                .collect(),
        }
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_compatible(other, "ParamSet::dot")?;
        Ok(self
            .tensors
            .iter()
            .map(|(k, t)| {
                t.data()
                    .iter()
                    .zip(other.tensors[k].data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum())
    }

    /// Euclidean norm of all scalars flattened together.
    pub fn norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Concatenation of all scalars in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the shape template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_scalars() {
            return Err(Error::InvalidArgument(format!(
                "flat vector has {} entries, template needs {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.tensors {
            let n = t.len();
            tensors.insert(
                name.clone(),
                Tensor::from_parts(t.shape().to_vec(), flat[offset..offset + n].to_vec()),
            );
            offset += n;
        }
        Ok(ParamSet { tensors })
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vals: &[(&str, Vec<f64>)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, v) in vals {
            p.insert(*n, Tensor::vector(v.clone()).unwrap()).unwrap();
        }
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = set(&[("a", vec![1.0])]);
        assert!(matches!(
            p.insert("a", Tensor::scalar(0.0)),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn arithmetic_and_norm() {
        let a = set(&[("w", vec![1.0, 2.0]), ("b", vec![2.0])]);
        let b = set(&[("w", vec![1.0, 0.0]), ("b", vec![-2.0])]);
        let c = a.add_scaled(&b, 0.5).unwrap();
        assert_eq!(c.get("w").unwrap().data(), &[1.5, 2.0]);
        assert_eq!(c.get("b").unwrap().data(), &[1.0]);
        assert_eq!(a.dot(&b).unwrap(), 1.0 - 4.0);
        assert_eq!(set(&[("x", vec![3.0, 4.0])]).norm(), 5.0);
        // name order: b before w
        assert_eq!(a.flatten(), vec![2.0, 1.0, 2.0]);
        assert_eq!(a.unflatten(&a.flatten()).unwrap(), a);
    }

    #[test]
    fn incompatible_sets_error() {
        let a = set(&[("w", vec![1.0, 2.0])]);
        let b = set(&[("w", vec![1.0])]);
        assert!(matches!(
            a.add_scaled(&b, 1.0),
            Err(Error::ShapeMismatch { .. })
        ));
        let c = set(&[("v", vec![1.0, 2.0])]);
        assert!(matches!(a.dot(&c), Err(Error::MissingParam(_))));
    }
}
