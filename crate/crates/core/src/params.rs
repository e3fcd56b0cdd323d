//! Named trainable parameters.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat registry of every trainable array, addressed by [`ParamId`] during
/// the forward pass and by dotted name on disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: layer constructors own their prefixes.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names.iter().enumerate().filter(move |(_, n)| n.starts_with(prefix)).map(|(i, _)| ParamId(i))
    }

    /// Replaces every value from `named`, which must contain exactly this
    /// store's names with matching shapes.
    pub fn load_strict(&mut self, named: &BTreeMap<String, Matrix>) -> Result<()> {
        let report = self.compare(named);
        if !report.is_clean() {
            return Err(Error::IncompatibleCheckpoint(report.describe()));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            *value = named[name].clone();
        }
        Ok(())
    }

    pub fn compare(&self, named: &BTreeMap<String, Matrix>) -> LoadReport {
        let mut report = LoadReport::default();
        for (name, value) in self.names.iter().zip(&self.values) {
            match named.get(name) {
                None => report.missing.push(name.clone()),
                Some(m) if m.shape() != value.shape() => {
                    report.shape_mismatch.push((name.clone(), value.shape(), m.shape()))
                }
                Some(_) => {}
            }
        }
        for name in named.keys() {
            if !self.names.contains(name) {
                report.unexpected.push(name.clone());
            }
        }
        report
    }

    pub fn to_named(&self) -> BTreeMap<String, Matrix> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

/// Outcome of matching a named parameter set against a store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub missing: Vec<String>,
    pub unexpected: Vec<String>,
    pub shape_mismatch: Vec<(String, (usize, usize), (usize, usize))>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.shape_mismatch.is_empty()
    }

    pub fn describe(&self) -> String {
        format!(
            "{} missing, {} unexpected, {} shape mismatches (first missing: {:?}, first unexpected: {:?})",
            self.missing.len(),
            self.unexpected.len(),
            self.shape_mismatch.len(),
            self.missing.first(),
            self.unexpected.first()
        )
    }
}

/// Glorot-uniform init for a `fan_in × fan_out` weight.
pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::uniform(fan_in, fan_out, bound, rng)
}
