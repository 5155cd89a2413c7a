//! Conditional noise predictors `eps(z, t, c)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::latent::{ConceptTable, Condition, Latent};
use crate::schedule::Timestep;

mod erased;
mod file;
mod gm;
mod guided;
mod mlp;

pub use erased::{erase, ErasedDenoiser};
pub use file::{MatrixRecord, ModelFile, ModelSpec, SkipRecord, FORMAT_VERSION};
pub use gm::{GaussianMixtureDenoiser, MixtureComponent};
pub use guided::{cfg_epsilon, Guided};
pub use mlp::{DenseLayer, MlpDenoiser, MlpGradients, SkipPath, TrainingBatch};

/// Noise prediction at one point together with its pullback `v -> v^T J`,
/// where `J` is the Jacobian of the prediction with respect to the latent.
pub struct Linearized<'a> {
    pub epsilon: Latent,
    pullback: Box<dyn Fn(&Latent) -> Latent + Send + 'a>,
}

impl<'a> Linearized<'a> {
    pub fn new(epsilon: Latent, pullback: impl Fn(&Latent) -> Latent + Send + 'a) -> Self {
        Self {
            epsilon,
            pullback: Box::new(pullback),
        }
    }

    pub fn vjp(&self, v: &Latent) -> Latent {
        (self.pullback)(v)
    }
}

/// A conditional noise predictor.
///
/// Implementations are immutable during evaluation and must return
/// bitwise-identical outputs for identical inputs.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    fn concepts(&self) -> &ConceptTable;

    fn epsilon(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Latent>;

    /// Prediction plus input pullback. Denoisers without an input gradient
    /// return [`Error::Capability`].
    fn linearize(&self, _z: &Latent, _step: Timestep, _cond: Condition) -> Result<Linearized<'_>> {
        Err(Error::Capability)
    }

    /// `v^T (d eps / d z)`
    fn input_vjp(&self, z: &Latent, step: Timestep, cond: Condition, v: &Latent) -> Result<Latent> {
        check_dim(self.dim(), v)?;
        Ok(self.linearize(z, step, cond)?.vjp(v))
    }

    fn check_input(&self, z: &Latent, cond: Condition) -> Result<()> {
        check_dim(self.dim(), z)?;
        self.concepts().check(cond)
    }
}

pub(crate) fn check_dim(dim: usize, z: &Latent) -> Result<()> {
    if z.dim() != dim {
        return Err(Error::Model(format!(
            "latent has dimension {}, model expects {dim}",
            z.dim()
        )));
    }
    Ok(())
}

macro_rules! forward_denoiser {
    ($($ty:ty),*) => {$(
        impl<D: Denoiser + ?Sized> Denoiser for $ty {
            fn dim(&self) -> usize {
                (**self).dim()
            }
            fn concepts(&self) -> &ConceptTable {
                (**self).concepts()
            }
            fn epsilon(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Latent> {
                (**self).epsilon(z, step, cond)
            }
            fn linearize(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Linearized<'_>> {
                (**self).linearize(z, step, cond)
            }
            fn input_vjp(&self, z: &Latent, step: Timestep, cond: Condition, v: &Latent) -> Result<Latent> {
                (**self).input_vjp(z, step, cond, v)
            }
        }
    )*};
}

forward_denoiser!(&D, Box<D>, Arc<D>);

/// `eps == 0` everywhere. Handy as the exactly invertible reference model.
#[derive(Clone, Debug)]
pub struct ZeroDenoiser {
    dim: usize,
    concepts: ConceptTable,
}

impl ZeroDenoiser {
    pub fn new(dim: usize, concepts: ConceptTable) -> Self {
        Self { dim, concepts }
    }
}

impl Denoiser for ZeroDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn concepts(&self) -> &ConceptTable {
        &self.concepts
    }

    fn epsilon(&self, z: &Latent, _step: Timestep, cond: Condition) -> Result<Latent> {
        self.check_input(z, cond)?;
        Ok(Latent::zeros(self.dim))
    }

    fn linearize(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Linearized<'_>> {
        let eps = self.epsilon(z, step, cond)?;
        let dim = self.dim;
        Ok(Linearized::new(eps, move |_| Latent::zeros(dim)))
    }
}
