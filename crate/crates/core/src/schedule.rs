//! Cumulative signal coefficients `alpha_0 .. alpha_T` and the coefficients of
//! the exact one-step DDIM reversal.
//!
//! Index 0 is the clean-data end of the chain and always has `alpha_0 = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

/// A resolved timestep handed to denoisers: they see the index (for time
/// embeddings) and the signal coefficient (for analytic scores).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timestep {
    pub index: usize,
    pub num_steps: usize,
    pub alpha: f64,
}

impl Timestep {
    /// Time embedding in `[0, 1]`.
    pub fn fraction(&self) -> f64 {
        if self.num_steps == 0 {
            0.0
        } else {
            self.index as f64 / self.num_steps as f64
        }
    }
}

impl NoiseSchedule {
    /// Builds a schedule from an explicit `alpha_0 .. alpha_T` list.
    ///
    /// `alpha_0` must be exactly 1 and the sequence strictly decreasing inside
    /// `(0, 1]`. A one-element list `[1.0]` is the degenerate zero-step schedule.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        match alphas.first() {
            None => return Err(Error::Parameter("schedule needs at least alpha_0".into())),
            Some(&a0) if a0 != 1.0 => {
                return Err(Error::Parameter(format!("alpha_0 must be exactly 1, got {a0}")))
            }
            _ => {}
        }
        for (t, w) in alphas.windows(2).enumerate() {
            let (prev, cur) = (w[0], w[1]);
            if !(cur > 0.0 && cur <= 1.0) || !cur.is_finite() {
                return Err(Error::Parameter(format!("alpha_{} = {cur} outside (0, 1]", t + 1)));
            }
            if cur >= prev {
                return Err(Error::Parameter(format!(
                    "alphas must strictly decrease: alpha_{} = {cur} >= alpha_{t} = {prev}",
                    t + 1
                )));
            }
        }
        Ok(Self { alphas })
    }

    /// Skips the monotonicity check. Only for probing degenerate coefficient
    /// behaviour (e.g. `alpha_t == alpha_{t-1}`) in tests.
    #[doc(hidden)]
    pub fn from_alphas_unchecked(alphas: Vec<f64>) -> Self {
        Self { alphas }
    }

    pub fn num_steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alphas.get(t).copied().ok_or(Error::Index {
            index: t,
            max: self.num_steps(),
        })
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            Err(Error::Index {
                index: t,
                max: self.num_steps(),
            })
        } else {
            Ok(())
        }
    }

    /// Timestep `t` in `1..=T`.
    pub fn timestep(&self, t: usize) -> Result<Timestep> {
        self.check_step(t)?;
        Ok(Timestep {
            index: t,
            num_steps: self.num_steps(),
            alpha: self.alphas[t],
        })
    }

    /// The `t = 0` evaluation used by the first approximate inversion step:
    /// time embedding 0 with the smallest trained noise level `alpha_1`, since
    /// the denoiser is undefined at `alpha = 1`.
    pub fn boundary_timestep(&self) -> Result<Timestep> {
        if self.num_steps() == 0 {
            return Err(Error::Index { index: 1, max: 0 });
        }
        Ok(Timestep {
            index: 0,
            num_steps: self.num_steps(),
            alpha: self.alphas[1],
        })
    }

    /// `C1(t) = sqrt(alpha_t / alpha_{t-1})`
    pub fn c1(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(c1_from(self.alphas[t], self.alphas[t - 1]))
    }

    /// `C2(t) = sqrt(1 - alpha_t) - sqrt(alpha_t (1 - alpha_{t-1}) / alpha_{t-1})`
    pub fn c2(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(c2_from(self.alphas[t], self.alphas[t - 1]))
    }
}

pub(crate) fn c1_from(alpha: f64, alpha_prev: f64) -> f64 {
    (alpha / alpha_prev).sqrt()
}

pub(crate) fn c2_from(alpha: f64, alpha_prev: f64) -> f64 {
    (1.0 - alpha).sqrt() - (alpha * (1.0 - alpha_prev) / alpha_prev).sqrt()
}

impl TryFrom<Vec<f64>> for NoiseSchedule {
    type Error = Error;
    fn try_from(alphas: Vec<f64>) -> Result<Self> {
        Self::from_alphas(alphas)
    }
}

impl From<NoiseSchedule> for Vec<f64> {
    fn from(s: NoiseSchedule) -> Self {
        s.alphas
    }
}

fn check_betas(beta_start: f64, beta_end: f64) -> Result<()> {
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )));
    }
    Ok(())
}

fn linear_betas(n: usize, beta_start: f64, beta_end: f64) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| {
        if n == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64
        }
    })
}

/// `alpha_t = prod_{s <= t} (1 - beta_s)` with `beta` linearly spaced over `steps`.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    check_betas(beta_start, beta_end)?;
    let mut alphas = Vec::with_capacity(steps + 1);
    alphas.push(1.0);
    let mut prod = 1.0;
    for beta in linear_betas(steps, beta_start, beta_end) {
        prod *= 1.0 - beta;
        alphas.push(prod);
    }
    NoiseSchedule::from_alphas(alphas)
}

/// Linear-beta schedule over `train_steps` fine steps, subsampled to `steps`
/// inference steps with stride `train_steps / steps`: `alpha_t = abar_{t * stride}`.
pub fn make_strided_schedule(
    train_steps: usize,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 || train_steps < steps {
        return Err(Error::Parameter(format!(
            "need 1 <= steps <= train_steps, got steps={steps}, train_steps={train_steps}"
        )));
    }
    let fine = make_linear_schedule(train_steps, beta_start, beta_end)?;
    let stride = train_steps / steps;
    let alphas = (0..=steps).map(|t| fine.alphas[t * stride]).collect();
    NoiseSchedule::from_alphas(alphas)
}
