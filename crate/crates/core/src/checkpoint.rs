//! Named-parameter checkpoints and the deltas between them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::linalg::Tensor;

/// Metadata key listing tensor names that must not be merged.
pub const FROZEN_KEY: &str = "frozen";

/// Model weights: tensors keyed by name, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    params: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

/// A parameter-space difference with the same names and shapes as the
/// checkpoints it came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Delta {
    params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(params: BTreeMap<String, Tensor>) -> Result<Self> {
        for (name, t) in &params {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("tensor {name:?} has non-finite values")));
            }
        }
        Ok(Self {
            params,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Compat(format!("missing tensor {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Replace a tensor; the shape must match the existing entry, if any.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        if let Some(old) = self.params.get(name) {
            if old.shape() != t.shape() {
                return Err(Error::Compat(format!(
                    "tensor {name:?}: shape {:?} does not match {:?}",
                    t.shape(),
                    old.shape()
                )));
            }
        }
        if !t.is_finite() {
            return Err(Error::Numeric(format!("tensor {name:?} has non-finite values")));
        }
        self.params.insert(name.to_string(), t);
        Ok(())
    }

    pub fn zeros_like(&self) -> Checkpoint {
        Checkpoint {
            params: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Names listed under the `frozen` metadata key (comma separated).
    pub fn frozen(&self) -> BTreeSet<String> {
        self.meta
            .get(FROZEN_KEY)
            .map(|s| {
                s.split(',')
                    .map(str::trim)
                    .filter(|n| !n.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn check_compatible(&self, other: &Checkpoint) -> Result<()> {
        check_same_layout(&self.params, &other.params)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Ok(Checkpoint::from_container(container::read(path)?))
    }

    pub fn from_container(c: Container) -> Checkpoint {
        Checkpoint {
            params: c.tensors,
            meta: c.meta,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(&self.to_container(), path)
    }

    pub fn to_container(&self) -> Container {
        Container {
            tensors: self.params.clone(),
            meta: self.meta.clone(),
        }
    }

    /// `self − other`, per tensor.
    pub fn diff(&self, other: &Checkpoint) -> Result<Delta> {
        self.check_compatible(other)?;
        let params = self
            .params
            .iter()
            .map(|(name, a)| {
                let b = &other.params[name];
                Ok((name.clone(), a.sub(b)?))
            })
            .collect::<Result<_>>()?;
        Ok(Delta { params })
    }

    /// `self + Σ coeffs[i] · deltas[i]`.
    ///
    /// Accumulates in f64 in list order and rounds to f32 once per element.
    pub fn axpy(&self, deltas: &[&Delta], coeffs: &[f64]) -> Result<Checkpoint> {
        if deltas.len() != coeffs.len() {
            return Err(Error::Argument(format!(
                "{} deltas but {} coefficients",
                deltas.len(),
                coeffs.len()
            )));
        }
        if let Some(c) = coeffs.iter().find(|c| !c.is_finite()) {
            return Err(Error::Numeric(format!("non-finite coefficient {c}")));
        }
        for d in deltas {
            check_same_layout(&self.params, &d.params)?;
        }
        let mut params = BTreeMap::new();
        for (name, base) in &self.params {
            let mut acc: Vec<f64> = base.data().iter().map(|&v| v as f64).collect();
            for (d, &c) in deltas.iter().zip(coeffs) {
                for (a, &x) in acc.iter_mut().zip(d.params[name].data()) {
                    *a += c * x as f64;
                }
            }
            let data = acc.into_iter().map(|v| v as f32).collect();
            params.insert(name.clone(), Tensor::new(base.shape().to_vec(), data)?);
        }
        let out = Checkpoint {
            params,
            meta: self.meta.clone(),
        };
        out.ensure_finite()?;
        Ok(out)
    }

    fn ensure_finite(&self) -> Result<()> {
        for (name, t) in &self.params {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("tensor {name:?} became non-finite")));
            }
        }
        Ok(())
    }

    pub fn add_delta(&self, d: &Delta) -> Result<Checkpoint> {
        self.axpy(&[d], &[1.0])
    }
}

impl Delta {
    pub fn new(params: BTreeMap<String, Tensor>) -> Self {
        Self { params }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn map_tensors(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<Delta> {
        let params = self
            .params
            .iter()
            .map(|(k, t)| Ok((k.clone(), f(k, t)?)))
            .collect::<Result<_>>()?;
        Ok(Delta { params })
    }

    pub fn scale(&self, k: f32) -> Delta {
        Delta {
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.scale(k)))
                .collect(),
        }
    }

    /// View the delta as a checkpoint, e.g. to start an accumulation from zero.
    pub fn into_checkpoint(self) -> Result<Checkpoint> {
        Checkpoint::new(self.params)
    }

    pub fn check_compatible(&self, c: &Checkpoint) -> Result<()> {
        check_same_layout(&c.params, &self.params)
    }

    pub fn nonzero_count(&self) -> usize {
        self.params
            .values()
            .map(|t| t.data().iter().filter(|&&v| v != 0.0).count())
            .sum()
    }
}

fn check_same_layout(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> Result<()> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        let left: BTreeSet<_> = a.keys().collect();
        let right: BTreeSet<_> = b.keys().collect();
        let only: Vec<_> = left.symmetric_difference(&right).collect();
        return Err(Error::Compat(format!("tensor name sets differ: {only:?}")));
    }
    for (name, t) in a {
        if t.shape() != b[name].shape() {
            return Err(Error::Compat(format!(
                "tensor {name:?}: shape {:?} vs {:?}",
                t.shape(),
                b[name].shape()
            )));
        }
    }
    Ok(())
}
