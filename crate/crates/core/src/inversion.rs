//! Approximate DDIM inversion and optimisation-based fixed-point inversion.
//!
//! Exact reversal of a sampling step reads `z_t = C1 z_{t-1} + C2 eps(z_t, t)`,
//! which is implicit in `z_t`. Standard inversion replaces the unknown
//! `eps(z_t, t)` with `eps(z_{t-1}, t - 1)`. The fixed-point inversion instead
//! starts from that estimate and minimises
//!
//! ```text
//! L_t(z_t) = || C1 z_{t-1} + C2 eps(z_t, t, null) - z_t ||^2
//! ```
//!
//! with a few first-order steps, keeping the best iterate seen.

use serde::{Deserialize, Serialize};

use crate::denoisers::Denoiser;
use crate::error::{Error, Result};
use crate::latent::{Condition, Latent};
use crate::optim::{gradient_descent_step, AdamW, AdamWParams};
use crate::sampler::{Direction, Trajectory};
use crate::schedule::{NoiseSchedule, Timestep};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InnerOptimizer {
    /// Adaptive moments, reset at every timestep, no weight decay.
    Adamw { beta1: f64, beta2: f64, eps: f64 },
    /// Plain `z <- z - eta grad`.
    GradientDescent,
}

impl Default for InnerOptimizer {
    fn default() -> Self {
        let p = AdamWParams::default();
        InnerOptimizer::Adamw {
            beta1: p.beta1,
            beta2: p.beta2,
            eps: p.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinaConfig {
    /// Inner iterations per timestep.
    pub k: usize,
    pub eta: f64,
    pub optimizer: InnerOptimizer,
    /// The inner loop stops once the loss drops below this.
    pub residual_tolerance: f64,
}

impl Default for TinaConfig {
    fn default() -> Self {
        Self {
            k: 25,
            eta: 1e-3,
            optimizer: InnerOptimizer::default(),
            residual_tolerance: 1e-10,
        }
    }
}

impl TinaConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Parameter(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.residual_tolerance >= 0.0) {
            return Err(Error::Parameter(format!(
                "residual_tolerance must be >= 0, got {}",
                self.residual_tolerance
            )));
        }
        if let InnerOptimizer::Adamw { beta1, beta2, eps } = self.optimizer {
            AdamWParams {
                lr: self.eta,
                beta1,
                beta2,
                eps,
                weight_decay: 0.0,
            }
            .validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMode {
    Standard,
    Tina,
    /// Standard inversion under a concept condition (diagnostic only).
    Conditioned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub init_residual: f64,
    pub final_residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionReport {
    pub z_t_star: Latent,
    pub per_step: Vec<StepRecord>,
    pub mode: InversionMode,
    /// `z_0 .. z_T`
    pub path: Trajectory,
    /// Noise level used for the `t = 0` evaluation of the first standard step.
    pub boundary_alpha: Option<f64>,
}

fn previous_timestep(schedule: &NoiseSchedule, t: usize) -> Result<Timestep> {
    if t == 1 {
        schedule.boundary_timestep()
    } else {
        schedule.timestep(t - 1)
    }
}

/// `z_t ~ C1 z_{t-1} + C2 eps(z_{t-1}, t - 1, c)`; at `t = 1` the evaluation
/// uses time index 0 with noise level `alpha_1`.
pub fn standard_inversion_step<D: Denoiser + ?Sized>(
    model: &D,
    z_prev: &Latent,
    t: usize,
    cond: Condition,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let c1 = schedule.c1(t)?;
    let c2 = schedule.c2(t)?;
    let eps = model.epsilon(z_prev, previous_timestep(schedule, t)?, cond)?;
    Ok(Latent::combine(c1, z_prev, c2, &eps))
}

/// `f*(z_t) = C1 z_{t-1} + C2 eps(z_t, t, c)`
pub fn fixed_point_map<D: Denoiser + ?Sized>(
    model: &D,
    z_t: &Latent,
    z_prev: &Latent,
    t: usize,
    cond: Condition,
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    let c1 = schedule.c1(t)?;
    let c2 = schedule.c2(t)?;
    let eps = model.epsilon(z_t, schedule.timestep(t)?, cond)?;
    Ok(Latent::combine(c1, z_prev, c2, &eps))
}

fn residual_sq<D: Denoiser + ?Sized>(
    model: &D,
    z_t: &Latent,
    z_prev: &Latent,
    t: usize,
    cond: Condition,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    Ok(fixed_point_map(model, z_t, z_prev, t, cond, schedule)?
        .sub(z_t)
        .norm_sq())
}

fn loss_and_gradient<D: Denoiser + ?Sized>(
    model: &D,
    z_t: &Latent,
    z_prev: &Latent,
    t: usize,
    cond: Condition,
    schedule: &NoiseSchedule,
) -> Result<(f64, Latent)> {
    let c1 = schedule.c1(t)?;
    let c2 = schedule.c2(t)?;
    let lin = model.linearize(z_t, schedule.timestep(t)?, cond)?;
    let mut r = Latent::combine(c1, z_prev, c2, &lin.epsilon);
    r.add_scaled(-1.0, z_t);
    // grad = 2 (C2 J - I)^T r
    let grad = Latent::combine(2.0 * c2, &lin.vjp(&r), -2.0, &r);
    Ok((r.norm_sq(), grad))
}

/// Fixed-point residual `||f*(z_t) - z_t||^2` under the null condition and
/// its gradient with respect to `z_t`.
pub fn tina_loss<D: Denoiser + ?Sized>(
    model: &D,
    z_t: &Latent,
    z_prev: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(f64, Latent)> {
    loss_and_gradient(model, z_t, z_prev, t, Condition::Null, schedule)
}

enum Inner {
    Adam(AdamW),
    Descent(f64),
}

impl Inner {
    fn new(config: &TinaConfig, dim: usize) -> Result<Self> {
        Ok(match config.optimizer {
            InnerOptimizer::Adamw { beta1, beta2, eps } => Inner::Adam(AdamW::new(
                AdamWParams {
                    lr: config.eta,
                    beta1,
                    beta2,
                    eps,
                    weight_decay: 0.0,
                },
                dim,
            )?),
            InnerOptimizer::GradientDescent => Inner::Descent(config.eta),
        })
    }

    fn step(&mut self, z: &mut Latent, grad: &Latent) {
        match self {
            Inner::Adam(opt) => opt.step(z.as_mut_slice(), grad.as_slice()),
            Inner::Descent(lr) => gradient_descent_step(z.as_mut_slice(), grad.as_slice(), *lr),
        }
    }
}

fn optimise_step<D: Denoiser + ?Sized>(
    model: &D,
    z_prev: &Latent,
    t: usize,
    cond: Condition,
    schedule: &NoiseSchedule,
    config: &TinaConfig,
) -> Result<(Latent, StepRecord)> {
    let mut z = standard_inversion_step(model, z_prev, t, cond, schedule)?;
    if !z.is_finite() {
        return Err(Error::Numeric {
            step: t,
            iteration: Some(0),
        });
    }
    let (mut loss, mut grad) = loss_and_gradient(model, &z, z_prev, t, cond, schedule)?;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            step: t,
            iteration: Some(0),
        });
    }
    let init_residual = loss;
    let mut best = (z.clone(), loss);
    let mut iterations = 0;
    let mut inner = Inner::new(config, z.dim())?;
    for k in 1..=config.k {
        if loss < config.residual_tolerance {
            break;
        }
        inner.step(&mut z, &grad);
        (loss, grad) = loss_and_gradient(model, &z, z_prev, t, cond, schedule)?;
        if !z.is_finite() || !loss.is_finite() {
            return Err(Error::Numeric {
                step: t,
                iteration: Some(k),
            });
        }
        iterations = k;
        if loss < best.1 {
            best = (z.clone(), loss);
        }
    }
    let (z_best, final_residual) = best;
    Ok((
        z_best,
        StepRecord {
            t,
            init_residual,
            final_residual,
            iterations,
        },
    ))
}

/// One timestep of the fixed-point inversion under the null condition.
/// Returns the lowest-loss iterate visited, so
/// `final_residual <= init_residual` always holds.
pub fn tina_inversion_step<D: Denoiser + ?Sized>(
    model: &D,
    z_prev: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
    config: &TinaConfig,
) -> Result<(Latent, StepRecord)> {
    config.validate()?;
    optimise_step(model, z_prev, t, Condition::Null, schedule, config)
}

fn check_start<D: Denoiser + ?Sized>(model: &D, z0: &Latent) -> Result<()> {
    if !z0.is_finite() {
        return Err(Error::Input("target latent is not finite".into()));
    }
    model.check_input(z0, Condition::Null)
}

fn boundary_alpha(schedule: &NoiseSchedule) -> Option<f64> {
    schedule.boundary_timestep().ok().map(|s| s.alpha)
}

fn finish(path: Vec<Latent>, per_step: Vec<StepRecord>, mode: InversionMode, schedule: &NoiseSchedule) -> InversionReport {
    InversionReport {
        z_t_star: path.last().expect("path starts with z0").clone(),
        per_step,
        mode,
        path: Trajectory {
            latents: path,
            direction: Direction::Inversion,
        },
        boundary_alpha: boundary_alpha(schedule),
    }
}

fn standard_with_condition<D: Denoiser + ?Sized>(
    model: &D,
    z0: &Latent,
    cond: Condition,
    schedule: &NoiseSchedule,
    mode: InversionMode,
) -> Result<InversionReport> {
    check_start(model, z0)?;
    model.concepts().check(cond)?;
    let mut path = vec![z0.clone()];
    let mut per_step = Vec::with_capacity(schedule.num_steps());
    for t in 1..=schedule.num_steps() {
        let z_prev = path.last().expect("non-empty");
        let z_t = standard_inversion_step(model, z_prev, t, cond, schedule)?;
        if !z_t.is_finite() {
            return Err(Error::Numeric { step: t, iteration: None });
        }
        // measured only, never fed back
        let residual = residual_sq(model, &z_t, z_prev, t, cond, schedule)?;
        per_step.push(StepRecord {
            t,
            init_residual: residual,
            final_residual: residual,
            iterations: 0,
        });
        path.push(z_t);
    }
    Ok(finish(path, per_step, mode, schedule))
}

/// Approximate DDIM inversion of `z0` for `t = 1..T`.
pub fn standard_inversion<D: Denoiser + ?Sized>(
    model: &D,
    z0: &Latent,
    cond: Condition,
    schedule: &NoiseSchedule,
) -> Result<InversionReport> {
    standard_with_condition(model, z0, cond, schedule, InversionMode::Standard)
}

/// Standard inversion under a concept condition, for reproducing how a
/// text-erased model resists prompt-guided inversion.
pub fn conditioned_inversion<D: Denoiser + ?Sized>(
    model: &D,
    z0: &Latent,
    cond: Condition,
    schedule: &NoiseSchedule,
) -> Result<InversionReport> {
    standard_with_condition(model, z0, cond, schedule, InversionMode::Conditioned)
}

/// Text-free fixed-point inversion of `z0`. The condition is always null.
pub fn tina_inversion<D: Denoiser + ?Sized>(
    model: &D,
    z0: &Latent,
    schedule: &NoiseSchedule,
    config: &TinaConfig,
) -> Result<InversionReport> {
    config.validate()?;
    check_start(model, z0)?;
    let mut path = vec![z0.clone()];
    let mut per_step = Vec::with_capacity(schedule.num_steps());
    for t in 1..=schedule.num_steps() {
        let z_prev = path.last().expect("non-empty");
        let (z_t, record) = optimise_step(model, z_prev, t, Condition::Null, schedule, config)?;
        per_step.push(record);
        path.push(z_t);
    }
    Ok(finish(path, per_step, InversionMode::Tina, schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::{GaussianMixtureDenoiser, ZeroDenoiser};
    use crate::latent::ConceptTable;
    use crate::sampler::{ddim_sample, ddim_step};
    use crate::schedule::make_linear_schedule;

    fn concepts() -> ConceptTable {
        ConceptTable::new(["A"]).unwrap()
    }

    fn standard_normal(dim: usize) -> GaussianMixtureDenoiser {
        GaussianMixtureDenoiser::one_per_concept(&["A"], &[1.0], vec![Latent::zeros(dim)], 1.0).unwrap()
    }

    fn two_blob() -> GaussianMixtureDenoiser {
        GaussianMixtureDenoiser::one_per_concept(
            &["A", "B"],
            &[0.4, 0.6],
            vec![
                Latent::from_vec(vec![0.8, 0.1, -0.3]),
                Latent::from_vec(vec![-0.5, 0.6, 0.2]),
            ],
            0.02,
        )
        .unwrap()
    }

    fn two_step() -> NoiseSchedule {
        NoiseSchedule::from_alphas(vec![1.0, 0.8, 0.64]).unwrap()
    }

    #[test]
    fn zero_model_standard_step_is_rescale() {
        let s = two_step();
        let z = Latent::from_vec(vec![1.0, -3.0]);
        let out = standard_inversion_step(&ZeroDenoiser::new(2, concepts()), &z, 2, Condition::Null, &s).unwrap();
        assert_eq!(out, z.scaled(s.c1(2).unwrap()));
    }

    #[test]
    fn standard_step_linear_oracle() {
        let s = two_step();
        let z = Latent::from_vec(vec![1.0, 1.0]);
        let out = standard_inversion_step(&standard_normal(2), &z, 2, Condition::Null, &s).unwrap();
        let c1 = (0.64f64 / 0.8).sqrt();
        let want = c1 + 0.2 * 0.2f64.sqrt();
        assert!((out[0] - want).abs() < 1e-12);
        assert!((out[0] - 0.983_870).abs() < 1e-6);
    }

    #[test]
    fn constant_schedule_step_is_identity() {
        let s = NoiseSchedule::from_alphas_unchecked(vec![1.0, 0.5, 0.5]);
        let z = Latent::from_vec(vec![0.4, -0.9, 0.1]);
        let out = standard_inversion_step(&two_blob(), &z, 2, Condition::Null, &s).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-15);
    }

    #[test]
    fn first_step_uses_boundary_evaluation() {
        let s = two_step();
        let m = standard_normal(2);
        let z0 = Latent::from_vec(vec![0.5, 0.5]);
        let out = standard_inversion_step(&m, &z0, 1, Condition::Null, &s).unwrap();
        // eps(z0, 0) = sqrt(1 - alpha_1) z0
        let want = s.c1(1).unwrap() + s.c2(1).unwrap() * 0.2f64.sqrt();
        assert!((out[0] - 0.5 * want).abs() < 1e-15);
        let report = standard_inversion(&m, &z0, Condition::Null, &s).unwrap();
        assert_eq!(report.boundary_alpha, Some(0.8));
    }

    #[test]
    fn standard_inversion_degenerate_and_zero_model() {
        let z0 = Latent::from_vec(vec![0.2, 0.3]);
        let empty = NoiseSchedule::from_alphas(vec![1.0]).unwrap();
        let r = standard_inversion(&standard_normal(2), &z0, Condition::Null, &empty).unwrap();
        assert_eq!(r.z_t_star, z0);
        assert!(r.per_step.is_empty());

        let s = make_linear_schedule(25, 1e-3, 0.05).unwrap();
        let zero = ZeroDenoiser::new(2, concepts());
        let r = standard_inversion(&zero, &z0, Condition::Null, &s).unwrap();
        // C1 telescopes to sqrt(alpha_T / alpha_0)
        let want = z0.scaled(s.alpha(25).unwrap().sqrt());
        assert!(r.z_t_star.max_abs_diff(&want) < 1e-12);
        let back = ddim_sample(&zero, &r.z_t_star, Condition::Null, &s, None).unwrap();
        assert!(back.clean().max_abs_diff(&z0) < 1e-12);
        assert_eq!(r.mode, InversionMode::Standard);
    }

    #[test]
    fn fixed_point_map_examples() {
        let s = NoiseSchedule::from_alphas_unchecked(vec![1.0, 0.5, 0.5]);
        let zp = Latent::from_vec(vec![0.1, 0.2, 0.3]);
        let zt = Latent::from_vec(vec![5.0, -5.0, 1.0]);
        let f = fixed_point_map(&two_blob(), &zt, &zp, 2, Condition::Null, &s).unwrap();
        assert!(f.max_abs_diff(&zp) < 1e-15);

        // eps = a z with a = sqrt(1 - 0.64) = 0.6
        let s = two_step();
        let m = standard_normal(2);
        let zp = Latent::from_vec(vec![1.0, 1.0]);
        let c1 = s.c1(2).unwrap();
        let c2 = s.c2(2).unwrap();
        let star = c1 / (1.0 - c2 * 0.6);
        assert!((star - 1.016_394).abs() < 1e-6);
        let zs = Latent::from_vec(vec![star, star]);
        let f = fixed_point_map(&m, &zs, &zp, 2, Condition::Null, &s).unwrap();
        assert!(f.max_abs_diff(&zs) < 1e-15);
    }

    #[test]
    fn tina_loss_linear_expansion() {
        let s = two_step();
        let m = standard_normal(2);
        let zp = Latent::from_vec(vec![1.0, 1.0]);
        let c1 = s.c1(2).unwrap();
        let c2 = s.c2(2).unwrap();
        let star = c1 / (1.0 - c2 * 0.6);
        let (l, g) = tina_loss(&m, &Latent::from_vec(vec![star, star]), &zp, 2, &s).unwrap();
        assert!(l < 1e-30 && g.norm() < 1e-14);
        let delta = [0.03, -0.01];
        let z = Latent::from_vec(vec![star + delta[0], star + delta[1]]);
        let (l, g) = tina_loss(&m, &z, &zp, 2, &s).unwrap();
        let f = c2 * 0.6 - 1.0;
        let want: f64 = delta.iter().map(|d| (f * d).powi(2)).sum();
        assert!((l - want).abs() < 1e-15);
        for i in 0..2 {
            assert!((g[i] - 2.0 * f * f * delta[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn tina_loss_gradient_matches_finite_differences() {
        let s = make_linear_schedule(10, 1e-3, 0.1).unwrap();
        let m = two_blob();
        let zp = Latent::from_vec(vec![0.3, 0.2, -0.4]);
        let z = Latent::from_vec(vec![0.35, 0.1, -0.2]);
        let (_, g) = tina_loss(&m, &z, &zp, 6, &s).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut a = z.clone();
            a.as_mut_slice()[j] += h;
            let mut b = z.clone();
            b.as_mut_slice()[j] -= h;
            let fd = (tina_loss(&m, &a, &zp, 6, &s).unwrap().0 - tina_loss(&m, &b, &zp, 6, &s).unwrap().0) / (2.0 * h);
            assert!((g[j] - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn capability_error_without_gradient() {
        struct Opaque(ConceptTable);
        impl Denoiser for Opaque {
            fn dim(&self) -> usize {
                1
            }
            fn concepts(&self) -> &ConceptTable {
                &self.0
            }
            fn epsilon(&self, z: &Latent, _: Timestep, _: Condition) -> Result<Latent> {
                Ok(z.clone())
            }
        }
        let s = two_step();
        let z = Latent::from_vec(vec![1.0]);
        assert!(matches!(
            tina_loss(&Opaque(concepts()), &z, &z, 1, &s),
            Err(Error::Capability)
        ));
    }

    #[test]
    fn zero_iterations_return_standard_step() {
        let s = make_linear_schedule(10, 1e-3, 0.1).unwrap();
        let m = two_blob();
        let zp = Latent::from_vec(vec![0.3, 0.2, -0.4]);
        let (z, rec) = tina_inversion_step(&m, &zp, 4, &s, &TinaConfig::with_k(0)).unwrap();
        assert_eq!(z, standard_inversion_step(&m, &zp, 4, Condition::Null, &s).unwrap());
        assert_eq!(rec.iterations, 0);
        assert_eq!(rec.init_residual, rec.final_residual);
    }

    #[test]
    fn converged_start_stops_early() {
        let s = make_linear_schedule(10, 1e-3, 0.1).unwrap();
        let zero = ZeroDenoiser::new(2, concepts());
        let zp = Latent::from_vec(vec![0.3, 0.2]);
        let (z, rec) = tina_inversion_step(&zero, &zp, 3, &s, &TinaConfig::default()).unwrap();
        assert_eq!(rec.iterations, 0);
        assert_eq!(z, zp.scaled(s.c1(3).unwrap()));
    }

    #[test]
    fn linear_model_descent_contracts_at_predicted_rate() {
        // eps = a z, so the residual error delta shrinks by
        // 1 - 2 eta (1 - C2 a)^2 per plain descent step
        let s = make_linear_schedule(20, 1e-4, 0.05).unwrap();
        let m = standard_normal(3);
        let zp = Latent::from_vec(vec![0.4, -0.2, 0.9]);
        for (eta, t) in [(0.1, 1), (0.1, 7), (0.3, 20)] {
            let config = TinaConfig {
                k: 25,
                eta,
                optimizer: InnerOptimizer::GradientDescent,
                residual_tolerance: 0.0,
            };
            let a = (1.0 - s.alpha(t).unwrap()).sqrt();
            let c2a = s.c2(t).unwrap() * a;
            let star = zp.scaled(s.c1(t).unwrap() / (1.0 - c2a));
            let init = standard_inversion_step(&m, &zp, t, Condition::Null, &s).unwrap();
            let rate = (1.0 - 2.0 * eta * (1.0 - c2a).powi(2)).powi(25);
            let (z, rec) = tina_inversion_step(&m, &zp, t, &s, &config).unwrap();
            let want = init.sub(&star).norm() * rate;
            assert!((z.sub(&star).norm() - want).abs() <= 1e-6 * want + 1e-14, "t={t}");
            assert!(rec.final_residual <= rec.init_residual);
        }
    }

    #[test]
    fn linear_model_reaches_closed_form_fixed_point() {
        let s = make_linear_schedule(20, 1e-4, 0.05).unwrap();
        let m = standard_normal(3);
        let config = TinaConfig {
            k: 25,
            eta: 0.5,
            optimizer: InnerOptimizer::GradientDescent,
            residual_tolerance: 0.0,
        };
        let zp = Latent::from_vec(vec![0.4, -0.2, 0.9]);
        for t in [1, 7, 20] {
            let a = (1.0 - s.alpha(t).unwrap()).sqrt();
            let star = zp.scaled(s.c1(t).unwrap() / (1.0 - s.c2(t).unwrap() * a));
            let (z, rec) = tina_inversion_step(&m, &zp, t, &s, &config).unwrap();
            assert!(z.max_abs_diff(&star) < 1e-6, "t={t}: {}", z.max_abs_diff(&star));
            assert!(rec.final_residual <= rec.init_residual);
        }
    }

    #[test]
    fn zero_model_tina_equals_standard() {
        let s = make_linear_schedule(12, 1e-3, 0.05).unwrap();
        let zero = ZeroDenoiser::new(2, concepts());
        let z0 = Latent::from_vec(vec![-0.7, 0.25]);
        let a = tina_inversion(&zero, &z0, &s, &TinaConfig::default()).unwrap();
        let b = standard_inversion(&zero, &z0, Condition::Null, &s).unwrap();
        assert_eq!(a.z_t_star, b.z_t_star);
        assert_eq!(a.path.latents, b.path.latents);
        assert_eq!(a.mode, InversionMode::Tina);
    }

    #[test]
    fn tina_improves_round_trip_on_mixture() {
        let s = make_linear_schedule(20, 1e-3, 0.05).unwrap();
        let m = two_blob();
        let z0 = Latent::from_vec(vec![0.78, 0.15, -0.28]);
        let std_rep = standard_inversion(&m, &z0, Condition::Null, &s).unwrap();
        let tina = tina_inversion(&m, &z0, &s, &TinaConfig::default()).unwrap();
        let err = |r: &InversionReport| {
            ddim_sample(&m, &r.z_t_star, Condition::Null, &s, None)
                .unwrap()
                .clean()
                .distance(&z0)
        };
        assert!(err(&tina) < err(&std_rep), "{} vs {}", err(&tina), err(&std_rep));
        for r in &tina.per_step {
            assert!(r.final_residual <= r.init_residual);
        }
    }

    #[test]
    fn accepted_steps_are_self_consistent() {
        let s = make_linear_schedule(15, 1e-3, 0.05).unwrap();
        let m = two_blob();
        let z0 = Latent::from_vec(vec![-0.45, 0.62, 0.18]);
        let config = TinaConfig {
            k: 200,
            eta: 0.4,
            optimizer: InnerOptimizer::GradientDescent,
            residual_tolerance: 1e-20,
        };
        let r = tina_inversion(&m, &z0, &s, &config).unwrap();
        for rec in &r.per_step {
            let t = rec.t;
            let z_t = r.path.at(t).unwrap();
            let z_prev = r.path.at(t - 1).unwrap();
            let back = ddim_step(&m, z_t, t, Condition::Null, &s).unwrap();
            let bound = rec.final_residual.sqrt() / s.c1(t).unwrap() + 1e-12;
            assert!(back.distance(z_prev) <= bound, "t={t}");
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let s = two_step();
        let z = Latent::from_vec(vec![0.0, 0.0]);
        let bad = TinaConfig {
            eta: 0.0,
            ..TinaConfig::default()
        };
        assert!(tina_inversion(&standard_normal(2), &z, &s, &bad).is_err());
        let bad = TinaConfig {
            residual_tolerance: -1.0,
            ..TinaConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
