//! Numerical core for text-free inversion attacks on concept-erased diffusion models.
//!
//! The crate is organised bottom-up:
//!
//! * [`schedule`] owns the cumulative signal coefficients and the inversion
//!   coefficients derived from them.
//! * [`denoisers`] provides conditional noise predictors: an exact
//!   Gaussian-mixture denoiser, a small MLP, and erasure wrappers.
//! * [`trainer`] fits the MLP with the denoising objective and implements
//!   fine-tuned erasure.
//! * [`sampler`] runs deterministic DDIM generation with optional
//!   classifier-free guidance.
//! * [`inversion`] holds the approximate DDIM inversion and the
//!   optimisation-based fixed-point inversion.
//! * [`evaluation`] scores regenerated latents.
//!
//! All arithmetic is `f64`.

pub mod denoisers;
pub mod error;
pub mod evaluation;
pub mod inversion;
pub mod io;
pub mod latent;
pub mod optim;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use denoisers::{
    erase, Denoiser, ErasedDenoiser, GaussianMixtureDenoiser, Guided, Linearized, MixtureComponent,
    MlpDenoiser, ModelFile,
};
pub use error::{Error, Result};
pub use latent::{ConceptId, ConceptTable, Condition, Latent};
pub use schedule::{NoiseSchedule, Timestep};
