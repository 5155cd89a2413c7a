//! Scoring of regenerated latents.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::denoisers::{Denoiser, GaussianMixtureDenoiser, MlpDenoiser};
use crate::error::{Error, Result};
use crate::latent::{ConceptId, Condition, Latent};
use crate::schedule::Timestep;

/// How the attacker produced the initial noise that gets regenerated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Fresh noise, sampled with the concept prompt under guidance.
    TextGuided,
    /// Standard null-condition inversion.
    StandardInvNull,
    /// Fixed-point inversion with a reduced iteration budget.
    TinaLessK,
    /// Fixed-point inversion with the full iteration budget.
    Tina,
    /// Standard inversion and regeneration under the concept condition.
    Conditioned,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::TextGuided,
        Arm::StandardInvNull,
        Arm::TinaLessK,
        Arm::Tina,
        Arm::Conditioned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::TextGuided => "text",
            Arm::StandardInvNull => "standard",
            Arm::TinaLessK => "tina_less_k",
            Arm::Tina => "tina",
            Arm::Conditioned => "conditioned",
        }
    }

    pub fn valid_names() -> String {
        Arm::ALL.map(Arm::name).join(", ")
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "text" | "text_guided" => Arm::TextGuided,
            "standard" | "standard_inv_null" => Arm::StandardInvNull,
            "tina_less_k" | "tina_less" => Arm::TinaLessK,
            "tina" => Arm::Tina,
            "conditioned" => Arm::Conditioned,
            _ => {
                return Err(Error::Input(format!(
                    "unknown arm {s:?}; valid arms: {}",
                    Arm::valid_names()
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedSample {
    pub target: ConceptId,
    pub predicted: ConceptId,
    pub posterior: f64,
    pub recon_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub arm: Arm,
    pub samples: Vec<ClassifiedSample>,
    pub hits: usize,
    pub asr: f64,
}

impl AttackReport {
    /// Scores `samples` against their own targets. An empty list has ASR 0.
    pub fn new(arm: Arm, samples: Vec<ClassifiedSample>) -> Self {
        let hits = samples.iter().filter(|s| s.predicted == s.target).count();
        let asr = if samples.is_empty() {
            0.0
        } else {
            hits as f64 / samples.len() as f64
        };
        Self {
            arm,
            samples,
            hits,
            asr,
        }
    }

    pub fn mean_recon_error(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.recon_error))
    }

    pub fn mean_posterior(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.posterior))
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    values.sum::<f64>() / n as f64
}

/// Maximum a-posteriori concept of a clean latent under the true mixture.
/// Ties go to the lowest concept index.
pub fn bayes_classify(data: &GaussianMixtureDenoiser, z0: &Latent) -> Result<(ConceptId, f64)> {
    let post = data.concept_posterior(z0)?;
    let mut best = 0;
    for (i, &p) in post.iter().enumerate() {
        if p > post[best] {
            best = i;
        }
    }
    Ok((ConceptId(best), post[best]))
}

/// Exact count ratio of samples predicted as `target`.
pub fn attack_success_rate(samples: &[ClassifiedSample], target: ConceptId) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to score".into()));
    }
    let hits = samples.iter().filter(|s| s.predicted == target).count();
    Ok(hits as f64 / samples.len() as f64)
}

pub fn reconstruction_error(z0: &Latent, z0_prime: &Latent) -> Result<f64> {
    if z0.dim() != z0_prime.dim() {
        return Err(Error::Input(format!(
            "dimension mismatch: {} vs {}",
            z0.dim(),
            z0_prime.dim()
        )));
    }
    Ok(z0.distance(z0_prime))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance.
pub fn separability_score(features: &[(usize, Vec<f64>)]) -> Result<f64> {
    let mut labels: Vec<usize> = features.iter().map(|(l, _)| *l).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Input("need at least two labels".into()));
    }
    let counts: Vec<usize> = labels
        .iter()
        .map(|l| features.iter().filter(|(m, _)| m == l).count())
        .collect();
    if counts.iter().any(|&c| c < 2) {
        return Err(Error::Input("need at least two points per label".into()));
    }
    let dim = features[0].1.len();
    if features.iter().any(|(_, v)| v.len() != dim || !v.iter().all(|x| x.is_finite())) {
        return Err(Error::Input("feature vectors must be finite and equally long".into()));
    }
    let slot = |l: usize| labels.binary_search(&l).expect("label collected above");
    let mut total = 0.0;
    for (i, (li, vi)) in features.iter().enumerate() {
        let mut sums = vec![0.0; labels.len()];
        for (j, (lj, vj)) in features.iter().enumerate() {
            if i != j {
                sums[slot(*lj)] += euclid(vi, vj);
            }
        }
        let own = slot(*li);
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..labels.len())
            .filter(|&k| k != own)
            .map(|k| sums[k] / counts[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / features.len() as f64)
}

/// Projection onto the two leading principal axes. Each axis is signed so
/// that its largest-magnitude loading is positive.
pub fn pca_2d(vectors: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::Input("PCA needs at least two points".into()));
    }
    let dim = vectors[0].len();
    if dim < 2 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Input("PCA needs equally long vectors of dimension >= 2".into()));
    }
    let data = DMatrix::from_fn(n, dim, |i, j| vectors[i][j]);
    let centered = {
        let mean = data.row_mean();
        DMatrix::from_fn(n, dim, |i, j| data[(i, j)] - mean[j])
    };
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let col = eig.eigenvectors.column(k);
            let pivot = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.iter().map(|x| sign * x).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |axis: &[f64]| row.iter().zip(axis).map(|(a, b)| a * b).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect())
}

/// Hidden activations of `layer` (0 is the embedded input).
pub fn extract_features(model: &MlpDenoiser, z: &Latent, step: Timestep, cond: Condition, layer: usize) -> Result<Vec<f64>> {
    model.extract_features(z, step, cond, layer)
}

/// Convenience for callers holding a denoiser trait object.
pub fn classify_all(data: &GaussianMixtureDenoiser, latents: &[Latent]) -> Result<Vec<(ConceptId, f64)>> {
    if let Some(l) = latents.iter().find(|l| l.dim() != data.dim()) {
        return Err(Error::Input(format!("latent of dimension {} for a {}-d mixture", l.dim(), data.dim())));
    }
    latents.iter().map(|z| bayes_classify(data, z)).collect()
}
