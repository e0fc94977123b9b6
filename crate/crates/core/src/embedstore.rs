//! Embedding sets, class catalogs and label vectors.
//!
//! These are the values exchanged with the exporter through the container
//! format (see [`crate::container`]). Every constructor validates its
//! invariants, so a value that exists is a valid value.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Allowed deviation from 1 for rows of a set flagged unit-norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// Rows with a norm at or below this are treated as the zero vector.
pub const ZERO_ROW_THRESHOLD: f64 = 1e-12;

/// An `n x d` matrix of embedding rows with one identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: Vec<f64>,
    rows: usize,
    dims: usize,
    ids: Vec<String>,
    unit_norm: bool,
}

impl EmbeddingSet {
    /// Builds a set from row-major `data`.
    pub fn new(data: Vec<f64>, dims: usize, ids: Vec<String>, unit_norm: bool) -> Result<Self> {
        if dims < 2 {
            return Err(Error::validation(format!("embedding dims must be >= 2, got {dims}")));
        }
        if !data.len().is_multiple_of(dims) {
            return Err(Error::validation(format!("data length {} is not a multiple of dims {dims}", data.len())));
        }
        let rows = data.len() / dims;
        if rows == 0 {
            return Err(Error::validation("embedding set must have at least one row"));
        }
        if ids.len() != rows {
            return Err(Error::validation(format!("{} ids for {rows} rows", ids.len())));
        }
        let set = Self { data, rows, dims, ids, unit_norm };
        set.validate()?;
        Ok(set)
    }

    /// Builds a set with ids `{prefix}{index}`.
    pub fn with_generated_ids(data: Vec<f64>, dims: usize, prefix: &str, unit_norm: bool) -> Result<Self> {
        let rows = data.len().checked_div(dims).unwrap_or(0);
        let ids = (0..rows).map(|i| format!("{prefix}{i}")).collect();
        Self::new(data, dims, ids, unit_norm)
    }

    pub fn from_rows(rows: &[Vec<f64>], prefix: &str, unit_norm: bool) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::validation("ragged rows"));
        }
        Self::with_generated_ids(rows.concat(), dims, prefix, unit_norm)
    }

    fn validate(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite value in row `{}`", self.ids[pos / self.dims])));
        }
        let mut seen = HashSet::with_capacity(self.rows);
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::validation(format!("duplicate id `{id}`")));
            }
        }
        if self.unit_norm {
            for (i, row) in self.iter_rows().enumerate() {
                let norm = norm(row);
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(Error::validation(format!("row `{}` flagged unit-norm has norm {norm}", self.ids[i])));
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dims)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn is_unit_norm(&self) -> bool {
        self.unit_norm
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    pub fn l2_normalize(&self) -> Result<Self> {
        let mut data = self.data.clone();
        for (i, row) in data.chunks_exact_mut(self.dims).enumerate() {
            let n = norm(row);
            if n <= ZERO_ROW_THRESHOLD {
                return Err(Error::DegenerateInput { id: self.ids[i].clone(), norm: n });
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { data, rows: self.rows, dims: self.dims, ids: self.ids.clone(), unit_norm: true })
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dims);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.rows {
                return Err(Error::validation(format!("row index {i} out of range for {} rows", self.rows)));
            }
            data.extend_from_slice(self.row(i));
            ids.push(self.ids[i].clone());
        }
        Self::new(data, self.dims, ids, self.unit_norm)
    }

    /// Stacks `self` on top of `other` (same dims). Ids must stay unique.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch { expected: self.dims, actual: other.dims });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        Self::new(data, self.dims, ids, self.unit_norm && other.unit_norm)
    }

    /// Replaces the data while keeping ids. Used by transforms that preserve row identity.
    pub(crate) fn with_data(&self, data: Vec<f64>, dims: usize, unit_norm: bool) -> Result<Self> {
        Self::new(data, dims, self.ids.clone(), unit_norm)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Which text embedding set of a catalog to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    Single,
    /// Template-averaged embeddings; falls back to single when absent.
    Multi,
}

/// Class names with their text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCatalog {
    names: Vec<String>,
    single: EmbeddingSet,
    multi: Option<EmbeddingSet>,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>, single: EmbeddingSet, multi: Option<EmbeddingSet>) -> Result<Self> {
        let m = names.len();
        if m < 2 {
            return Err(Error::validation(format!("catalog needs at least 2 classes, got {m}")));
        }
        if single.rows() != m {
            return Err(Error::validation(format!("single-template set has {} rows for {m} classes", single.rows())));
        }
        if let Some(multi) = &multi {
            if multi.rows() != m {
                return Err(Error::validation(format!("multi-template set has {} rows for {m} classes", multi.rows())));
            }
            if multi.dims() != single.dims() {
                return Err(Error::DimensionMismatch { expected: single.dims(), actual: multi.dims() });
            }
        }
        Ok(Self { names, single, multi })
    }

    pub fn classes(&self) -> usize {
        self.names.len()
    }

    pub fn dims(&self) -> usize {
        self.single.dims()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn single(&self) -> &EmbeddingSet {
        &self.single
    }

    pub fn multi(&self) -> Option<&EmbeddingSet> {
        self.multi.as_ref()
    }

    pub fn text(&self, template: Template) -> &EmbeddingSet {
        match template {
            Template::Single => &self.single,
            Template::Multi => self.multi.as_ref().unwrap_or(&self.single),
        }
    }
}

/// Ground-truth labels; `None` is the UNLABELED sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    values: Vec<Option<usize>>,
}

impl LabelVector {
    pub fn new(values: Vec<Option<usize>>) -> Self {
        Self { values }
    }

    pub fn from_labels(values: &[usize]) -> Self {
        Self { values: values.iter().copied().map(Some).collect() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Option<usize>] {
        &self.values
    }

    pub fn get(&self, i: usize) -> Option<usize> {
        self.values[i]
    }

    /// Checks that every labeled entry is a valid class index.
    pub fn check_classes(&self, m: usize) -> Result<()> {
        match self.values.iter().flatten().find(|&&v| v >= m) {
            Some(v) => Err(Error::validation(format!("label {v} out of range for {m} classes"))),
            None => Ok(()),
        }
    }

    /// All labels, failing on any sentinel.
    pub fn dense(&self) -> Result<Vec<usize>> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::validation(format!("label {i} is UNLABELED"))))
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self { values: indices.iter().map(|&i| self.values[i]).collect() }
    }
}
