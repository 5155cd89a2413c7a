//! Classifier-free guidance.

use super::{Denoiser, Linearized};
use crate::error::{Error, Result};
use crate::latent::{ConceptTable, Condition, Latent};
use crate::schedule::Timestep;

/// `eps_null + s (eps_c - eps_null)`. The null condition bypasses guidance.
pub fn cfg_epsilon<D: Denoiser + ?Sized>(
    model: &D,
    z: &Latent,
    step: Timestep,
    cond: Condition,
    scale: f64,
) -> Result<Latent> {
    let null = model.epsilon(z, step, Condition::Null)?;
    if cond.is_null() {
        return Ok(null);
    }
    let c = model.epsilon(z, step, cond)?;
    Ok(Latent::combine(1.0 - scale, &null, scale, &c))
}

/// A denoiser whose conditional predictions are guided at a fixed scale.
#[derive(Clone, Debug)]
pub struct Guided<D> {
    base: D,
    scale: f64,
}

impl<D: Denoiser> Guided<D> {
    pub fn new(base: D, scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Parameter(format!("guidance scale must be finite and >= 0, got {scale}")));
        }
        Ok(Self { base, scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn base(&self) -> &D {
        &self.base
    }
}

impl<D: Denoiser> Denoiser for Guided<D> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn concepts(&self) -> &ConceptTable {
        self.base.concepts()
    }

    fn epsilon(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Latent> {
        cfg_epsilon(&self.base, z, step, cond, self.scale)
    }

    fn linearize(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Linearized<'_>> {
        let null = self.base.linearize(z, step, Condition::Null)?;
        if cond.is_null() {
            return Ok(null);
        }
        let c = self.base.linearize(z, step, cond)?;
        let s = self.scale;
        let eps = Latent::combine(1.0 - s, &null.epsilon, s, &c.epsilon);
        Ok(Linearized::new(eps, move |v: &Latent| {
            Latent::combine(1.0 - s, &null.vjp(v), s, &c.vjp(v))
        }))
    }
}
