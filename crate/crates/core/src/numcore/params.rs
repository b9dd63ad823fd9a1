use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Name and `(rows, cols)` of one parameter array.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named dense parameter arrays, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        if !value.all_finite() {
            return Err(Error::NonFinite("parameter value".into()));
        }
        self.entries.insert(name.into(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn shapes(&self) -> Vec<ParamShape> {
        self.entries
            .iter()
            .map(|(name, t)| ParamShape {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Row-major concatenation of every array in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(flat: &[f64], shapes: &[ParamShape]) -> Result<Self> {
        let expected: usize = shapes.iter().map(ParamShape::len).sum();
        if flat.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: flat.len(),
            });
        }
        let mut sorted: Vec<&ParamShape> = shapes.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for s in sorted {
            let data = flat[offset..offset + s.len()].to_vec();
            offset += s.len();
            entries.insert(s.name.clone(), Tensor::from_vec(s.rows, s.cols, data)?);
        }
        Ok(Self { entries })
    }

    pub fn l2_norm_squared(&self) -> f64 {
        self.entries.values().map(Tensor::sum_squares).sum()
    }

    /// Element-wise `self + other`; both sets must have identical layouts.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), t.map(|x| x * factor)))
                .collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shapes() != other.shapes() {
            return Err(Error::Shape("parameter sets have different layouts".into()));
        }
        Ok(Self {
            entries: self
                .entries
                .iter()
                .zip(other.entries.values())
                .map(|((k, a), b)| (k.clone(), a.zip_map(b, &f)))
                .collect(),
        })
    }

    /// Registers every array as a trainable leaf.
    pub fn to_leaves(&self, graph: &mut Graph) -> ParamVars {
        ParamVars {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), graph.leaf(t.clone())))
                .collect(),
        }
    }

    /// Registers every array as a non-differentiable constant.
    pub fn to_constants(&self, graph: &mut Graph) -> ParamVars {
        ParamVars {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), graph.constant(t.clone())))
                .collect(),
        }
    }

    /// Copy with every name prefixed by `prefix`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, t)| (format!("{prefix}{k}"), t.clone()))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Union of two sets with disjoint names.
    pub fn merged(&self, other: &Self) -> Result<Self> {
        let mut entries = self.entries.clone();
        for (k, t) in &other.entries {
            if entries.insert(k.clone(), t.clone()).is_some() {
                return Err(Error::Shape(format!("duplicate parameter `{k}`")));
            }
        }
        Ok(Self { entries })
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }
}

/// Graph handles for a [`ParamSet`], in the same name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVars {
    entries: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn from_pairs(mut entries: Vec<(String, Var)>) -> Self {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.entries
            .binary_search_by(|(k, _)| k.as_str().cmp(name))
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Pairs names with a same-length list of vars (e.g. gradients).
    pub fn with_vars(&self, vars: Vec<Var>) -> Self {
        debug_assert_eq!(vars.len(), self.entries.len());
        Self {
            entries: self
                .entries
                .iter()
                .zip(vars)
                .map(|((k, _), v)| (k.clone(), v))
                .collect(),
        }
    }

    /// Reads the current values out of the graph.
    pub fn values(&self, graph: &Graph) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), graph.value(*v).clone()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_flattens_to_empty() {
        assert!(ParamSet::new().flatten().is_empty());
        let p = ParamSet::unflatten(&[], &[]).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn weight_then_bias_ordering() {
        let mut p = ParamSet::new();
        p.insert("l00.offset", Tensor::row(vec![5.0, 6.0])).unwrap();
        p.insert(
            "l00.kernel",
            Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(p.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn unflatten_length_mismatch() {
        let shapes = vec![ParamShape {
            name: "a".into(),
            rows: 2,
            cols: 2,
        }];
        assert!(matches!(
            ParamSet::unflatten(&[1.0; 3], &shapes),
            Err(Error::LengthMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = ParamSet::new();
        assert!(p.insert("a", Tensor::scalar(f64::NAN)).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(
            dims in proptest::collection::vec((1usize..5, 1usize..5), 0..5),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamSet::new();
            for (i, (r, c)) in dims.iter().enumerate() {
                let data = (0..r * c).map(|_| rng.gen_range(-1e3..1e3)).collect();
                p.insert(format!("p{i}"), Tensor::from_vec(*r, *c, data).unwrap()).unwrap();
            }
            let back = ParamSet::unflatten(&p.flatten(), &p.shapes()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
