use crate::error::{shape_err, Error, Result};

use super::tensor::{self, Tensor};

/// Named gradient tensors in the declaration order of the parameters they
/// differentiate. The flat view concatenates entries in that order, which is
/// what makes global inner products (and the projection built on them)
/// reproducible.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradVector {
    entries: Vec<(String, Tensor)>,
}

impl GradVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut g = Self::new();
        for (name, t) in entries {
            g.push(name, t)?;
        }
        Ok(g)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Invalid(format!("duplicate gradient entry `{name}`")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            data.extend_from_slice(t.data());
        }
        Tensor::vector(data)
    }

    /// Inverse of [`flatten`](Self::flatten), using `self` as the layout.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(shape_err(format!(
                "unflatten: {} values for a {}-entry layout",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (n, t) in &self.entries {
            let len = t.len();
            entries.push((
                n.clone(),
                Tensor::new(t.shape().to_vec(), flat[offset..offset + len].to_vec())?,
            ));
            offset += len;
        }
        Ok(Self { entries })
    }

    fn check_layout(&self, other: &GradVector) -> Result<()> {
        if self.entries.len() != other.entries.len()
            || self
                .entries
                .iter()
                .zip(&other.entries)
                .any(|((na, ta), (nb, tb))| na != nb || ta.shape() != tb.shape())
        {
            return Err(shape_err("gradient vectors have different layouts"));
        }
        Ok(())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &GradVector) -> Result<()> {
        self.check_layout(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            a.axpy(s, b)?;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.scale(s)))
                .collect(),
        }
    }

    pub fn dot(&self, other: &GradVector) -> Result<f64> {
        self.check_layout(other)?;
        let mut acc = 0.0;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            acc += tensor::dot(a.data(), b.data())?;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cosine(&self, other: &GradVector) -> Result<f64> {
        self.check_layout(other)?;
        tensor::cosine(self.flatten().data(), other.flatten().data())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}
