use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Flat vector of model parameters (or of a parameter difference).
///
/// All elements are finite; the constructors reject NaN and infinities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(ParamVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.0.get(index).copied()
    }

    /// Mutable access for in-crate update loops. Callers re-check finiteness.
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn ensure_len(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::mismatch(expected, self.len()));
        }
        Ok(())
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Element-wise `self - other`.
    pub fn difference(&self, other: &ParamVector) -> Result<ParamVector> {
        other.ensure_len(self.len())?;
        let out: Vec<f64> = self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect();
        ParamVector::from_vec(out)
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.len() == other.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

/// Sparse parameter difference over a model of `dim` parameters.
///
/// Entries are kept sorted by index with no duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDelta {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl SparseDelta {
    pub fn empty(dim: usize) -> Self {
        SparseDelta {
            dim,
            entries: Vec::new(),
        }
    }

    /// Every component of `dense`, including zeros.
    pub fn from_dense(dense: &ParamVector) -> Self {
        SparseDelta {
            dim: dense.len(),
            entries: dense.iter().enumerate().map(|(i, &v)| (i as u32, v)).collect(),
        }
    }

    pub fn from_entries(dim: usize, mut entries: Vec<(u32, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(i, _)| i);
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::InvalidArgument(format!("duplicate sparse index {}", pair[0].0)));
            }
        }
        if let Some(&(i, _)) = entries.last() {
            if i as usize >= dim {
                return Err(Error::InvalidArgument(format!(
                    "sparse index {i} out of range for dimension {dim}"
                )));
            }
        }
        if let Some(pos) = entries.iter().position(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: entries[pos].0 as usize,
            });
        }
        Ok(SparseDelta { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    /// Dense view with unreleased indices set to zero.
    pub fn to_dense(&self) -> ParamVector {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        ParamVector(out)
    }
}

/// Adam first and second moments, as shared in momentum-aggregation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: ParamVector,
    pub v: ParamVector,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: ParamVector::zeros(len),
            v: ParamVector::zeros(len),
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}
