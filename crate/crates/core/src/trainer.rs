//! Denoising-objective training of [`MlpDenoiser`] and fine-tuned erasure.
//!
//! Every minibatch draws from its own ChaCha stream (`seed`, stream = global
//! batch index), so results depend only on the seed and batch layout.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoisers::{Denoiser, GaussianMixtureDenoiser, MlpDenoiser, SkipPath, TrainingBatch};
use crate::error::{Error, Result};
use crate::latent::{ConceptId, ConceptTable, Condition, Latent};
use crate::optim::{AdamW, AdamWParams};
use crate::schedule::NoiseSchedule;

/// Stream reserved for parameter initialisation.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "defaults::batches_per_epoch")]
    pub batches_per_epoch: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Probability of replacing the label with the null condition.
    #[serde(default = "defaults::uncond_prob")]
    pub uncond_prob: f64,
}

mod defaults {
    pub fn batches_per_epoch() -> usize {
        100
    }
    pub fn batch_size() -> usize {
        256
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn uncond_prob() -> f64 {
        0.2
    }
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batches_per_epoch: defaults::batches_per_epoch(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            seed,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            weight_decay: 0.0,
            uncond_prob: defaults::uncond_prob(),
        }
    }

    fn adamw(&self) -> AdamWParams {
        AdamWParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("batch counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::Parameter(format!(
                "uncond_prob must be in [0, 1], got {}",
                self.uncond_prob
            )));
        }
        self.adamw().validate()
    }

    fn batch_rng(&self, batch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(batch);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Variance of the analytic skip path; `None` disables it.
    pub skip_variance: Option<f64>,
}

impl Default for MlpArchitecture {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            embed_dim: 8,
            skip_variance: None,
        }
    }
}

/// A source of labelled clean latents.
pub trait LabelledSampler {
    fn dim(&self) -> usize;
    fn concepts(&self) -> &ConceptTable;
    /// Draws from the full data distribution.
    fn sample_labelled(&self, rng: &mut ChaCha8Rng) -> Result<(Latent, ConceptId)>;
    /// Draws from one concept.
    fn sample_concept(&self, concept: ConceptId, rng: &mut ChaCha8Rng) -> Result<Latent>;
}

impl LabelledSampler for GaussianMixtureDenoiser {
    fn dim(&self) -> usize {
        Denoiser::dim(self)
    }

    fn concepts(&self) -> &ConceptTable {
        Denoiser::concepts(self)
    }

    fn sample_labelled(&self, rng: &mut ChaCha8Rng) -> Result<(Latent, ConceptId)> {
        let (z, k) = self.sample_clean(Condition::Null, rng)?;
        let c = self
            .concept_of_component(k)
            .ok_or_else(|| Error::Model(format!("component {k} belongs to no concept")))?;
        Ok((z, c))
    }

    fn sample_concept(&self, concept: ConceptId, rng: &mut ChaCha8Rng) -> Result<Latent> {
        Ok(self.sample_clean(Condition::Concept(concept), rng)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: MlpDenoiser,
    /// `(epoch, mean minibatch loss)`, epochs counted from 1.
    pub loss_curve: Vec<(usize, f64)>,
}

/// `||eps - eps_theta(sqrt(a_t) z0 + sqrt(1 - a_t) eps, t, c)||^2`
pub fn denoising_loss(
    model: &MlpDenoiser,
    z0: &Latent,
    cond: Condition,
    eps: &Latent,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if z0.dim() != model.dim() || eps.dim() != model.dim() {
        return Err(Error::Model("latent and noise must match model dimension".into()));
    }
    let step = schedule.timestep(t)?;
    let z_t = Latent::combine(step.alpha.sqrt(), z0, (1.0 - step.alpha).sqrt(), eps);
    Ok(model.epsilon(&z_t, step, cond)?.sub(eps).norm_sq())
}

fn noise(dim: usize, rng: &mut ChaCha8Rng) -> Latent {
    Latent::from_vec((0..dim).map(|_| rng.sample(StandardNormal)).collect())
}

fn diffuse(
    z0: &Latent,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Latent, crate::schedule::Timestep, Latent)> {
    let t = rng.random_range(1..=schedule.num_steps());
    let step = schedule.timestep(t)?;
    let eps = noise(z0.dim(), rng);
    let z_t = Latent::combine(step.alpha.sqrt(), z0, (1.0 - step.alpha).sqrt(), &eps);
    Ok((z_t, step, eps))
}

fn rows(latents: &[Latent], dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = latents.iter().flat_map(|l| l.as_slice().iter().copied()).collect();
    Array2::from_shape_vec((latents.len(), dim), flat).expect("consistent latent dimension")
}

fn denoising_batch<S: LabelledSampler + ?Sized>(
    data: &S,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch> {
    let dim = data.dim();
    let n = config.batch_size;
    let (mut zs, mut targets) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut steps, mut conds) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let (z0, label) = data.sample_labelled(rng)?;
        let cond = if rng.random::<f64>() < config.uncond_prob {
            Condition::Null
        } else {
            Condition::Concept(label)
        };
        let (z_t, step, eps) = diffuse(&z0, schedule, rng)?;
        zs.push(z_t);
        targets.push(eps);
        steps.push(step);
        conds.push(cond);
    }
    Ok(TrainingBatch {
        z_t: rows(&zs, dim),
        steps,
        conds,
        targets: rows(&targets, dim),
    })
}

/// Runs AdamW over the parameters at `indices` (all parameters if `None`).
fn fit(
    mut model: MlpDenoiser,
    config: &TrainConfig,
    indices: Option<&[usize]>,
    mut make_batch: impl FnMut(&MlpDenoiser, &mut ChaCha8Rng) -> Result<TrainingBatch>,
) -> Result<Trained> {
    config.validate()?;
    let mut params = model.params_flat();
    let select = |flat: &[f64]| -> Vec<f64> {
        match indices {
            Some(idx) => idx.iter().map(|&i| flat[i]).collect(),
            None => flat.to_vec(),
        }
    };
    let mut active = select(&params);
    let mut opt = AdamW::new(config.adamw(), active.len())?;
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut batch_index = 0u64;
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for _ in 0..config.batches_per_epoch {
            let mut rng = config.batch_rng(batch_index);
            batch_index += 1;
            let batch = make_batch(&model, &mut rng)?;
            let (loss, grads) = model.batch_loss_and_gradients(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch });
            }
            total += loss;
            opt.step(&mut active, &select(&grads.flat));
            match indices {
                Some(idx) => idx.iter().zip(&active).for_each(|(&i, &v)| params[i] = v),
                None => params.copy_from_slice(&active),
            }
            if !active.iter().all(|p| p.is_finite()) {
                return Err(Error::Training { epoch });
            }
            model.set_params_flat(&params)?;
        }
        loss_curve.push((epoch, total / config.batches_per_epoch as f64));
    }
    Ok(Trained { model, loss_curve })
}

/// Randomly initialised network for `data`, drawn from the init stream of `seed`.
pub fn init_denoiser<S: LabelledSampler + ?Sized>(
    data: &S,
    arch: &MlpArchitecture,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<MlpDenoiser> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let model = MlpDenoiser::init(
        data.dim(),
        &arch.hidden,
        arch.embed_dim,
        schedule.num_steps(),
        data.concepts().clone(),
        &mut rng,
    )?;
    match arch.skip_variance {
        Some(v) => model.with_skip(SkipPath::new(schedule, v)?),
        None => Ok(model),
    }
}

/// Trains a fresh network on the denoising objective with uniform
/// timesteps and label dropout.
pub fn train_denoiser<S: LabelledSampler + ?Sized>(
    data: &S,
    arch: &MlpArchitecture,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Trained> {
    config.validate()?;
    let init = init_denoiser(data, arch, schedule, config.seed)?;
    train_from(init, data, config, schedule)
}

/// Continues training `model`.
pub fn train_from<S: LabelledSampler + ?Sized>(
    model: MlpDenoiser,
    data: &S,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Trained> {
    if model.dim() != data.dim() || model.concepts() != data.concepts() {
        return Err(Error::Model("model and data disagree on dimension or concepts".into()));
    }
    if model.num_steps() != schedule.num_steps() {
        return Err(Error::Model("model and schedule disagree on step count".into()));
    }
    fit(model, config, None, |_, rng| denoising_batch(data, config, schedule, rng))
}

/// Which parameters fine-tuned erasure may change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    Embeddings,
    /// Embeddings plus the first-layer weights that read them.
    #[default]
    ConditionPathway,
    All,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneOptions {
    pub scope: FinetuneScope,
    /// Fraction of each batch drawn from other concepts with their own frozen
    /// conditional predictions as targets. Zero disables retention.
    pub retention: f64,
}

/// Regresses `eps(z_t, t, concept)` toward the frozen model's
/// `eps(z_t, t, null)` on diffused samples of `concept`.
pub fn finetune_erase<S: LabelledSampler + ?Sized>(
    model: &MlpDenoiser,
    data: &S,
    concept: ConceptId,
    config: &TrainConfig,
    options: &FinetuneOptions,
    schedule: &NoiseSchedule,
) -> Result<Trained> {
    model.concepts().check(Condition::Concept(concept))?;
    if !(0.0..1.0).contains(&options.retention) {
        return Err(Error::Parameter(format!(
            "retention must be in [0, 1), got {}",
            options.retention
        )));
    }
    let others: Vec<ConceptId> = model.concepts().ids().filter(|&c| c != concept).collect();
    if options.retention > 0.0 && others.is_empty() {
        return Err(Error::Parameter("retention needs at least one other concept".into()));
    }
    let frozen = model.clone();
    let indices: Option<Vec<usize>> = match options.scope {
        FinetuneScope::Embeddings => Some(model.embedding_indices().collect()),
        FinetuneScope::ConditionPathway => Some(model.condition_pathway_indices()),
        FinetuneScope::All => None,
    };
    let dim = model.dim();
    fit(model.clone(), config, indices.as_deref(), |_, rng| {
        let n = config.batch_size;
        let (mut zs, mut targets) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut steps, mut conds) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let retain = options.retention > 0.0 && rng.random::<f64>() < options.retention;
            let (source, target_cond) = if retain {
                let c = others[rng.random_range(0..others.len())];
                (c, Condition::Concept(c))
            } else {
                (concept, Condition::Null)
            };
            let z0 = data.sample_concept(source, rng)?;
            let (z_t, step, _) = diffuse(&z0, schedule, rng)?;
            targets.push(frozen.epsilon(&z_t, step, target_cond)?);
            zs.push(z_t);
            steps.push(step);
            conds.push(Condition::Concept(source));
        }
        Ok(TrainingBatch {
            z_t: rows(&zs, dim),
            steps,
            conds,
            targets: rows(&targets, dim),
        })
    })
}
