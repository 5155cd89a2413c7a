//! Remap erasure: erased concepts are answered with the null prediction.

use super::{Denoiser, Linearized};
use crate::error::Result;
use crate::latent::{ConceptId, ConceptTable, Condition, Latent};
use crate::schedule::Timestep;

#[derive(Clone, Debug)]
pub struct ErasedDenoiser<D> {
    base: D,
    erased: Vec<ConceptId>,
}

/// Wraps `base` so that every concept in `names` behaves like the null
/// condition. Unknown names are a condition error; an empty set is the
/// identity wrapper.
pub fn erase<D: Denoiser>(base: D, names: &[&str]) -> Result<ErasedDenoiser<D>> {
    let mut erased = names
        .iter()
        .map(|n| base.concepts().id(n))
        .collect::<Result<Vec<_>>>()?;
    erased.sort();
    erased.dedup();
    Ok(ErasedDenoiser { base, erased })
}

impl<D: Denoiser> ErasedDenoiser<D> {
    pub fn base(&self) -> &D {
        &self.base
    }

    pub fn erased(&self) -> &[ConceptId] {
        &self.erased
    }

    pub fn is_erased(&self, cond: Condition) -> bool {
        matches!(cond, Condition::Concept(id) if self.erased.contains(&id))
    }

    fn route(&self, cond: Condition) -> Condition {
        if self.is_erased(cond) {
            Condition::Null
        } else {
            cond
        }
    }
}

impl<D: Denoiser> Denoiser for ErasedDenoiser<D> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn concepts(&self) -> &ConceptTable {
        self.base.concepts()
    }

    fn epsilon(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Latent> {
        self.check_input(z, cond)?;
        self.base.epsilon(z, step, self.route(cond))
    }

    fn linearize(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Linearized<'_>> {
        self.check_input(z, cond)?;
        self.base.linearize(z, step, self.route(cond))
    }
}
