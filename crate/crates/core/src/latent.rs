use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the shared latent space (clean latents, noised latents and
/// noise predictions all live here).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Latent(Vec<f64>);

impl Latent {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("latent entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    /// Wraps `values` without checking finiteness. Callers that produce values
    /// from model arithmetic check [`Latent::is_finite`] at step boundaries.
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Latent) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(&self, other: &Latent) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, a: f64) -> Latent {
        Latent(self.0.iter().map(|v| a * v).collect())
    }

    /// `a * x + b * y`
    pub fn combine(a: f64, x: &Latent, b: f64, y: &Latent) -> Latent {
        debug_assert_eq!(x.dim(), y.dim());
        Latent(x.0.iter().zip(&y.0).map(|(p, q)| a * p + b * q).collect())
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, a: f64, other: &Latent) {
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s += a * o;
        }
    }

    pub fn sub(&self, other: &Latent) -> Latent {
        Latent::combine(1.0, self, -1.0, other)
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for Latent {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Latent> for Vec<f64> {
    fn from(z: Latent) -> Self {
        z.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub usize);

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Guidance signal: the null condition or one registered concept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    Null,
    Concept(ConceptId),
}

impl Condition {
    pub fn concept(id: usize) -> Self {
        Condition::Concept(ConceptId(id))
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }
}

/// Symbolic concept names; a concept's id is its index in the table.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptTable(Vec<String>);

impl ConceptTable {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Parameter(format!("concept {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::Parameter(format!("duplicate concept name {n:?}")));
            }
        }
        Ok(Self(names))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn name(&self, id: ConceptId) -> Option<&str> {
        self.0.get(id.0).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Result<ConceptId> {
        self.0
            .iter()
            .position(|n| n == name)
            .map(ConceptId)
            .ok_or_else(|| Error::Condition(format!("unknown concept {name:?}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = ConceptId> {
        (0..self.0.len()).map(ConceptId)
    }

    /// Errors unless `cond` is `Null` or a registered concept.
    pub fn check(&self, cond: Condition) -> Result<()> {
        match cond {
            Condition::Null => Ok(()),
            Condition::Concept(id) if id.0 < self.0.len() => Ok(()),
            Condition::Concept(id) => Err(Error::Condition(format!(
                "concept {id} is not registered ({} concepts)",
                self.0.len()
            ))),
        }
    }
}
