//! Deterministic DDIM generation.
//!
//! ```text
//! z0_hat  = (z_t - sqrt(1 - a_t) eps) / sqrt(a_t)
//! z_{t-1} = sqrt(a_{t-1}) z0_hat + sqrt(1 - a_{t-1}) eps
//! ```
//!
//! with a single `eps = eps(z_t, t, c)` shared by both lines.

use serde::{Deserialize, Serialize};

use crate::denoisers::{cfg_epsilon, Denoiser};
use crate::error::{Error, Result};
use crate::latent::{Condition, Latent};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `latents[0] = z_T`, last is `z_0`.
    Generation,
    /// `latents[0] = z_0`, last is `z_T`.
    Inversion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub latents: Vec<Latent>,
    pub direction: Direction,
}

impl Trajectory {
    /// Latent at timestep `t`, independent of direction.
    pub fn at(&self, t: usize) -> Option<&Latent> {
        let n = self.latents.len();
        match self.direction {
            Direction::Inversion => self.latents.get(t),
            Direction::Generation => (t < n).then(|| &self.latents[n - 1 - t]),
        }
    }

    pub fn clean(&self) -> &Latent {
        self.at(0).expect("trajectory is never empty")
    }

    pub fn noise(&self) -> &Latent {
        self.at(self.latents.len() - 1).expect("trajectory is never empty")
    }

    pub fn num_steps(&self) -> usize {
        self.latents.len() - 1
    }
}

/// `eps` under optional guidance; guidance is skipped for the null condition.
pub(crate) fn guided_epsilon<D: Denoiser + ?Sized>(
    model: &D,
    z: &Latent,
    step: crate::schedule::Timestep,
    cond: Condition,
    guidance: Option<f64>,
) -> Result<Latent> {
    match guidance {
        Some(s) if !cond.is_null() => cfg_epsilon(model, z, step, cond, s),
        _ => model.epsilon(z, step, cond),
    }
}

fn z0_from_eps(z_t: &Latent, eps: &Latent, alpha: f64) -> Latent {
    let inv = 1.0 / alpha.sqrt();
    Latent::combine(inv, z_t, -(1.0 - alpha).sqrt() * inv, eps)
}

pub fn predict_z0<D: Denoiser + ?Sized>(
    model: &D,
    z_t: &Latent,
    t: usize,
    cond: Condition,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let step = schedule.timestep(t)?;
    let eps = model.epsilon(z_t, step, cond)?;
    Ok(z0_from_eps(z_t, &eps, step.alpha))
}

/// One reverse step given an already evaluated `eps(z_t, t, c)`.
pub fn ddim_step_with_eps(z_t: &Latent, eps: &Latent, t: usize, schedule: &NoiseSchedule) -> Result<Latent> {
    let alpha = schedule.timestep(t)?.alpha;
    let alpha_prev = schedule.alpha(t - 1)?;
    let z0 = z0_from_eps(z_t, eps, alpha);
    Ok(Latent::combine(alpha_prev.sqrt(), &z0, (1.0 - alpha_prev).sqrt(), eps))
}

pub fn ddim_step<D: Denoiser + ?Sized>(
    model: &D,
    z_t: &Latent,
    t: usize,
    cond: Condition,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let step = schedule.timestep(t)?;
    let eps = model.epsilon(z_t, step, cond)?;
    ddim_step_with_eps(z_t, &eps, t, schedule)
}

/// Runs `t = T..1` from `z_T`. With `guidance = Some(s)` conditional
/// predictions are classifier-free guided at scale `s`.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    model: &D,
    z_big_t: &Latent,
    cond: Condition,
    schedule: &NoiseSchedule,
    guidance: Option<f64>,
) -> Result<Trajectory> {
    if !z_big_t.is_finite() {
        return Err(Error::Input("initial noise is not finite".into()));
    }
    if let Some(s) = guidance {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::Parameter(format!("guidance scale must be >= 0, got {s}")));
        }
    }
    let n = schedule.num_steps();
    let mut latents = Vec::with_capacity(n + 1);
    latents.push(z_big_t.clone());
    for t in (1..=n).rev() {
        let z_t = latents.last().expect("non-empty");
        let step = schedule.timestep(t)?;
        let eps = guided_epsilon(model, z_t, step, cond, guidance)?;
        let next = ddim_step_with_eps(z_t, &eps, t, schedule)?;
        if !next.is_finite() {
            return Err(Error::Numeric {
                step: t,
                iteration: None,
            });
        }
        latents.push(next);
    }
    Ok(Trajectory {
        latents,
        direction: Direction::Generation,
    })
}
