//! Exact noise predictor for isotropic Gaussian-mixture data.
//!
//! Under the forward process `z_t = sqrt(a) z_0 + sqrt(1 - a) e`, component
//! `k` diffuses to `N(sqrt(a) mu_k, s_k^2 I)` with `s_k^2 = a v_k + 1 - a`.
//! The minimiser of the noise-prediction error is
//!
//! ```text
//! eps*(z) = -sqrt(1 - a) grad log p_t(z) = sqrt(1 - a) sum_k g_k (z - sqrt(a) mu_k) / s_k^2
//! ```
//!
//! with posterior weights `g_k`. Its Jacobian is
//! `sqrt(1 - a) [ (sum_k g_k / s_k^2) I - Cov_g(u) ]` where `u_k = (z - sqrt(a) mu_k) / s_k^2`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_dim, Denoiser, Linearized};
use crate::error::{Error, Result};
use crate::latent::{ConceptId, ConceptTable, Condition, Latent};
use crate::schedule::Timestep;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Latent,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixtureDenoiser {
    dim: usize,
    components: Vec<MixtureComponent>,
    concepts: ConceptTable,
    concept_components: Vec<Vec<usize>>,
    all_components: Vec<usize>,
}

/// Per-component quantities at one diffused point.
struct Posterior {
    weights: Vec<f64>,
    // u_k = (z - sqrt(a) mu_k) / s_k^2, row per selected component
    u: Vec<Latent>,
    inv_var: Vec<f64>,
}

impl GaussianMixtureDenoiser {
    /// `concept_components[c]` lists the component indices that make up
    /// concept `c`; the null condition always uses every component.
    pub fn new(
        components: Vec<MixtureComponent>,
        concepts: ConceptTable,
        concept_components: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let dim = components
            .first()
            .map(|c| c.mean.dim())
            .ok_or_else(|| Error::Parameter("mixture needs at least one component".into()))?;
        if dim == 0 {
            return Err(Error::Parameter("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.dim() != dim {
                return Err(Error::Parameter(format!("component {k} mean has wrong dimension")));
            }
            if !c.mean.is_finite() {
                return Err(Error::Parameter(format!("component {k} mean is not finite")));
            }
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return Err(Error::Parameter(format!("component {k} variance must be > 0")));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Parameter(format!("component {k} weight must be > 0")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!("mixture weights sum to {total}, not 1")));
        }
        if concept_components.len() != concepts.len() {
            return Err(Error::Parameter(format!(
                "{} concepts but {} component subsets",
                concepts.len(),
                concept_components.len()
            )));
        }
        for (c, subset) in concept_components.iter().enumerate() {
            if subset.is_empty() {
                return Err(Error::Parameter(format!(
                    "concept {:?} has no components",
                    concepts.names()[c]
                )));
            }
            if let Some(&k) = subset.iter().find(|&&k| k >= components.len()) {
                return Err(Error::Parameter(format!("component index {k} out of range")));
            }
        }
        let all_components = (0..components.len()).collect();
        Ok(Self {
            dim,
            components,
            concepts,
            concept_components,
            all_components,
        })
    }

    /// One component per concept, with shared isotropic variance.
    pub fn one_per_concept(
        names: &[&str],
        weights: &[f64],
        means: Vec<Latent>,
        variance: f64,
    ) -> Result<Self> {
        if names.len() != weights.len() || names.len() != means.len() {
            return Err(Error::Parameter("names, weights and means differ in length".into()));
        }
        let components = weights
            .iter()
            .zip(means)
            .map(|(&weight, mean)| MixtureComponent {
                weight,
                mean,
                variance,
            })
            .collect();
        let subsets = (0..names.len()).map(|k| vec![k]).collect();
        Self::new(components, ConceptTable::new(names.iter().copied())?, subsets)
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn concept_components(&self) -> &[Vec<usize>] {
        &self.concept_components
    }

    fn subset(&self, cond: Condition) -> &[usize] {
        match cond {
            Condition::Null => &self.all_components,
            Condition::Concept(id) => &self.concept_components[id.0],
        }
    }

    fn posterior(&self, z: &Latent, alpha: f64, cond: Condition) -> Posterior {
        let subset = self.subset(cond);
        let sqrt_a = alpha.sqrt();
        let d = self.dim as f64;
        let mut logits = Vec::with_capacity(subset.len());
        let mut u = Vec::with_capacity(subset.len());
        let mut inv_var = Vec::with_capacity(subset.len());
        for &k in subset {
            let c = &self.components[k];
            let s2 = alpha * c.variance + 1.0 - alpha;
            let diff = Latent::combine(1.0, z, -sqrt_a, &c.mean);
            logits.push(c.weight.ln() - 0.5 * d * s2.ln() - 0.5 * diff.norm_sq() / s2);
            u.push(diff.scaled(1.0 / s2));
            inv_var.push(1.0 / s2);
        }
        Posterior {
            weights: softmax(&logits),
            u,
            inv_var,
        }
    }

    /// Bayes-optimal noise prediction for the conditioned, diffused mixture.
    pub fn gm_epsilon(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Latent> {
        self.check_input(z, cond)?;
        let post = self.posterior(z, step.alpha, cond);
        let mut eps = Latent::zeros(self.dim);
        for (g, u) in post.weights.iter().zip(&post.u) {
            eps.add_scaled(*g, u);
        }
        Ok(eps.scaled((1.0 - step.alpha).sqrt()))
    }

    /// `v^T (d eps* / d z)` including the posterior-weight covariance term.
    pub fn gm_epsilon_vjp(
        &self,
        z: &Latent,
        step: Timestep,
        cond: Condition,
        v: &Latent,
    ) -> Result<Latent> {
        check_dim(self.dim, v)?;
        Ok(self.linearize(z, step, cond)?.vjp(v))
    }

    /// Draws a clean sample from the (conditioned) mixture; returns the
    /// sample and the component it came from.
    pub fn sample_clean<R: Rng + ?Sized>(&self, cond: Condition, rng: &mut R) -> Result<(Latent, usize)> {
        self.concepts.check(cond)?;
        let subset = self.subset(cond);
        let total: f64 = subset.iter().map(|&k| self.components[k].weight).sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = *subset.last().expect("non-empty subset");
        for &k in subset {
            pick -= self.components[k].weight;
            if pick < 0.0 {
                chosen = k;
                break;
            }
        }
        let c = &self.components[chosen];
        let sd = c.variance.sqrt();
        let values = c
            .mean
            .as_slice()
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok((Latent::from_vec(values), chosen))
    }

    /// First concept containing component `k`.
    pub fn concept_of_component(&self, k: usize) -> Option<ConceptId> {
        self.concept_components
            .iter()
            .position(|s| s.contains(&k))
            .map(ConceptId)
    }

    /// `p(concept | z0)` on clean latents, normalised over concepts.
    pub fn concept_posterior(&self, z0: &Latent) -> Result<Vec<f64>> {
        check_dim(self.dim, z0)?;
        if !z0.is_finite() {
            return Err(Error::Input("latent is not finite".into()));
        }
        let d = self.dim as f64;
        let log_lik: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() - 0.5 * d * c.variance.ln() - 0.5 * z0.sub(&c.mean).norm_sq() / c.variance)
            .collect();
        let per_concept: Vec<f64> = self
            .concept_components
            .iter()
            .map(|s| log_sum_exp(s.iter().map(|&k| log_lik[k])))
            .collect();
        Ok(softmax(&per_concept))
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Denoiser for GaussianMixtureDenoiser {
    fn dim(&self) -> usize {
        self.dim
    }

    fn concepts(&self) -> &ConceptTable {
        &self.concepts
    }

    fn epsilon(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Latent> {
        self.gm_epsilon(z, step, cond)
    }

    fn linearize(&self, z: &Latent, step: Timestep, cond: Condition) -> Result<Linearized<'_>> {
        self.check_input(z, cond)?;
        let scale = (1.0 - step.alpha).sqrt();
        let post = self.posterior(z, step.alpha, cond);
        let mut mean_u = Latent::zeros(self.dim);
        for (g, u) in post.weights.iter().zip(&post.u) {
            mean_u.add_scaled(*g, u);
        }
        let eps = mean_u.scaled(scale);
        let diag: f64 = post.weights.iter().zip(&post.inv_var).map(|(g, iv)| g * iv).sum();
        Ok(Linearized::new(eps, move |v: &Latent| {
            // J is symmetric, so v^T J = J v.
            let mut out = v.scaled(diag);
            for (g, u) in post.weights.iter().zip(&post.u) {
                out.add_scaled(-g * u.dot(v), u);
            }
            out.add_scaled(mean_u.dot(v), &mean_u);
            out.scaled(scale)
        }))
    }
}
