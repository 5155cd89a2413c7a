//! The two-phase attack: invert a target on the erased model without any
//! prompt, then regenerate from the recovered noise on that same model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use tina_core::denoisers::ModelSpec;
use tina_core::evaluation::{bayes_classify, reconstruction_error, separability_score, Arm, AttackReport, ClassifiedSample};
use tina_core::inversion::{conditioned_inversion, standard_inversion, tina_inversion, StepRecord};
use tina_core::io::read_latents;
use tina_core::sampler::ddim_sample;
use tina_core::trainer::{finetune_erase, train_denoiser, FinetuneOptions};
use tina_core::{erase, ConceptId, Condition, Denoiser, GaussianMixtureDenoiser, Latent, MlpDenoiser, ModelFile, NoiseSchedule};

use crate::config::{DataSource, DenoiserSource, ErasureMethod, ExperimentConfig};
use crate::error::{LabError, Result};
use crate::manifest::LossCurve;
use crate::presets;

/// Data mixture plus the models before and after erasure.
pub struct Models {
    /// Ground-truth mixture; also the Bayes classifier.
    pub data: GaussianMixtureDenoiser,
    pub original: Arc<dyn Denoiser>,
    pub erased: Arc<dyn Denoiser>,
    pub original_file: ModelFile,
    pub erased_file: ModelFile,
    /// The original network, when the denoiser is one.
    pub original_mlp: Option<MlpDenoiser>,
    pub loss_curves: Vec<LossCurve>,
}

pub fn load_data(config: &ExperimentConfig) -> Result<GaussianMixtureDenoiser> {
    let data = match &config.model.data {
        DataSource::Preset(name) => presets::by_name(name)
            .ok_or_else(|| LabError::Usage(format!("unknown preset {name:?}")))??,
        DataSource::File(path) => ModelFile::load(path)?.mixture()?,
    };
    config.check_against(&data)?;
    Ok(data)
}

fn mean_variance(data: &GaussianMixtureDenoiser) -> f64 {
    let c = data.components();
    c.iter().map(|x| x.variance).sum::<f64>() / c.len() as f64
}

fn check_compatible(model: &dyn Denoiser, data: &GaussianMixtureDenoiser) -> Result<()> {
    if model.dim() != data.dim() || model.concepts().names() != data.concepts().names() {
        return Err(tina_core::Error::Model(format!(
            "model ({}-d, concepts {:?}) does not match the data ({}-d, concepts {:?})",
            model.dim(),
            model.concepts().names(),
            data.dim(),
            data.concepts().names()
        ))
        .into());
    }
    Ok(())
}

/// Builds the original denoiser, training a network if the config asks for one.
pub fn original_model(
    config: &ExperimentConfig,
    data: &GaussianMixtureDenoiser,
    schedule: &NoiseSchedule,
) -> Result<(ModelFile, Option<MlpDenoiser>, Vec<LossCurve>)> {
    Ok(match &config.model.denoiser {
        DenoiserSource::Analytic => (ModelFile::from_mixture(data), None, Vec::new()),
        DenoiserSource::File(path) => {
            let file = ModelFile::load(path)?;
            let mlp = match file.model {
                ModelSpec::Mlp { .. } => Some(file.mlp()?),
                _ => None,
            };
            (file, mlp, Vec::new())
        }
        DenoiserSource::Mlp(mlp) => {
            let arch = mlp.architecture(mean_variance(data));
            let trained = train_denoiser(data, &arch, &mlp.train_config(config.stage_seed("train")), schedule)?;
            let curve = LossCurve::new("train", trained.loss_curve);
            (ModelFile::from_mlp(&trained.model), Some(trained.model), vec![curve])
        }
    })
}

pub fn prepare_models(config: &ExperimentConfig) -> Result<Models> {
    let schedule = config.schedule.build()?;
    let data = load_data(config)?;
    let (original_file, original_mlp, mut loss_curves) = original_model(config, &data, &schedule)?;
    let original: Arc<dyn Denoiser> = Arc::from(original_file.build()?);
    check_compatible(original.as_ref(), &data)?;
    let names: Vec<&str> = config.erasure.concepts.iter().map(String::as_str).collect();

    let (erased, erased_file): (Arc<dyn Denoiser>, ModelFile) = match config.erasure.method {
        ErasureMethod::None => (original.clone(), original_file.clone()),
        ErasureMethod::Remap => (
            Arc::new(erase(original.clone(), &names)?),
            ModelFile::erased(original_file.clone(), &names),
        ),
        ErasureMethod::Finetune => {
            let mut model = original_mlp.clone().ok_or_else(|| {
                LabError::Usage("fine-tuned erasure needs an unerased network denoiser".into())
            })?;
            let ft = &config.erasure.finetune;
            let options = FinetuneOptions {
                scope: ft.scope,
                retention: ft.retention,
            };
            for name in &names {
                let id = data.concepts().id(name)?;
                let seed = config.stage_seed(&format!("finetune:{name}"));
                let trained = finetune_erase(&model, &data, id, &ft.train_config(seed), &options, &schedule)?;
                loss_curves.push(LossCurve::new(&format!("finetune_{name}"), trained.loss_curve));
                model = trained.model;
            }
            let file = ModelFile::from_mlp(&model);
            (Arc::new(model), file)
        }
    };
    Ok(Models {
        data,
        original,
        erased,
        original_file,
        erased_file,
        original_mlp,
        loss_curves,
    })
}

/// Counter-based stream: results do not depend on scheduling order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Latent {
    Latent::from_vec((0..dim).map(|_| rng.sample(StandardNormal)).collect())
}

/// Phase 2. Only the recovered noise, the null condition and the erased model
/// reach the sampler.
pub fn regenerate(erased: &dyn Denoiser, z_t_star: &Latent, schedule: &NoiseSchedule) -> Result<Latent> {
    Ok(ddim_sample(erased, z_t_star, Condition::Null, schedule, None)?
        .clean()
        .clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    /// Recovered noise; for the text arm, the fresh noise it started from.
    pub z_t_star: Latent,
    pub regenerated: Latent,
    pub classified: ClassifiedSample,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug)]
pub struct ArmRun {
    pub arm: Arm,
    /// One entry per sample index; failures carry the error text.
    pub outcomes: Vec<std::result::Result<SampleOutcome, String>>,
}

impl ArmRun {
    pub fn report(&self) -> AttackReport {
        let samples = self.outcomes.iter().flatten().map(|o| o.classified).collect();
        AttackReport::new(self.arm, samples)
    }

    pub fn failures(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_err()).count()
    }
}

#[derive(Clone, Debug)]
pub struct AttackRun {
    pub config_hash: String,
    pub seed: u64,
    pub concepts: Vec<String>,
    pub target: ConceptId,
    pub targets: Vec<std::result::Result<Latent, String>>,
    pub arms: Vec<ArmRun>,
    pub loss_curves: Vec<LossCurve>,
}

impl AttackRun {
    pub fn arm(&self, arm: Arm) -> Option<&ArmRun> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn report(&self, arm: Arm) -> Option<AttackReport> {
        self.arm(arm).map(ArmRun::report)
    }
}

fn score(data: &GaussianMixtureDenoiser, target: &Latent, concept: ConceptId, regenerated: &Latent) -> Result<ClassifiedSample> {
    let (predicted, _) = bayes_classify(data, regenerated)?;
    Ok(ClassifiedSample {
        target: concept,
        predicted,
        posterior: data.concept_posterior(regenerated)?[concept.0],
        recon_error: reconstruction_error(target, regenerated)?,
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| LabError::Usage(format!("cannot start worker pool: {e}")))
}

pub fn draw_targets(
    config: &ExperimentConfig,
    models: &Models,
    schedule: &NoiseSchedule,
    concept: ConceptId,
) -> Result<Vec<std::result::Result<Latent, String>>> {
    let n = config.attack.samples;
    let dim = models.data.dim();
    if let Some(path) = &config.attack.targets_path {
        let rows = read_latents(path)?;
        if rows.len() < n {
            return Err(tina_core::Error::Input(format!("{} holds {} targets, need {n}", path.display(), rows.len())).into());
        }
        if let Some(r) = rows.iter().find(|r| r.dim() != dim) {
            return Err(tina_core::Error::Input(format!("target of dimension {} for {dim}-d data", r.dim())).into());
        }
        return Ok(rows.into_iter().take(n).map(Ok).collect());
    }
    let seed = config.stage_seed("attack");
    let guidance = config.attack.target_guidance;
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let noise = gaussian(dim, &mut stream_rng(seed, 2 * i as u64));
            ddim_sample(models.original.as_ref(), &noise, Condition::Concept(concept), schedule, Some(guidance))
                .map(|tr| tr.clean().clone())
                .map_err(|e| e.to_string())
        })
        .collect())
}

/// Phase 1 for one arm and one target.
fn run_arm(
    arm: Arm,
    config: &ExperimentConfig,
    models: &Models,
    schedule: &NoiseSchedule,
    concept: ConceptId,
    index: usize,
    target: &Latent,
) -> Result<SampleOutcome> {
    let erased = models.erased.as_ref();
    let (z_t_star, regenerated, steps) = match arm {
        Arm::TextGuided => {
            let noise = gaussian(target.dim(), &mut stream_rng(config.stage_seed("attack"), 2 * index as u64 + 1));
            let tr = ddim_sample(erased, &noise, Condition::Concept(concept), schedule, Some(config.attack.guidance))?;
            (noise, tr.clean().clone(), Vec::new())
        }
        Arm::StandardInvNull => {
            let r = standard_inversion(erased, target, Condition::Null, schedule)?;
            let regen = regenerate(erased, &r.z_t_star, schedule)?;
            (r.z_t_star, regen, r.per_step)
        }
        Arm::Tina | Arm::TinaLessK => {
            let tina = config.attack.tina_config(arm).expect("fixed-point arm");
            let r = tina_inversion(erased, target, schedule, tina)?;
            let regen = regenerate(erased, &r.z_t_star, schedule)?;
            (r.z_t_star, regen, r.per_step)
        }
        Arm::Conditioned => {
            let cond = Condition::Concept(concept);
            let r = conditioned_inversion(erased, target, cond, schedule)?;
            let regen = ddim_sample(erased, &r.z_t_star, cond, schedule, None)?.clean().clone();
            (r.z_t_star, regen, r.per_step)
        }
    };
    Ok(SampleOutcome {
        classified: score(&models.data, target, concept, &regenerated)?,
        z_t_star,
        regenerated,
        steps,
    })
}

/// Runs every configured arm on already prepared models.
pub fn run_attack_with(config: &ExperimentConfig, models: &Models) -> Result<AttackRun> {
    let schedule = config.schedule.build()?;
    let concept = models.data.concepts().id(&config.attack.target)?;
    pool(config.workers)?.install(|| {
        let targets = draw_targets(config, models, &schedule, concept)?;
        let n = targets.len();
        let mut arms = Vec::with_capacity(config.attack.arms.len());
        for &arm in &config.attack.arms {
            let outcomes: Vec<_> = targets
                .par_iter()
                .enumerate()
                .map(|(i, t)| match t {
                    Ok(target) => run_arm(arm, config, models, &schedule, concept, i, target).map_err(|e| e.to_string()),
                    Err(e) => Err(format!("target: {e}")),
                })
                .collect();
            let run = ArmRun { arm, outcomes };
            let failed = run.failures();
            if 2 * failed > n {
                return Err(LabError::Aborted {
                    arm: arm.name().into(),
                    failed,
                    total: n,
                });
            }
            arms.push(run);
        }
        Ok(AttackRun {
            config_hash: config.hash(),
            seed: config.seed,
            concepts: models.data.concepts().names().to_vec(),
            target: concept,
            targets,
            arms,
            loss_curves: models.loss_curves.clone(),
        })
    })
}

pub fn run_attack(config: &ExperimentConfig) -> Result<AttackRun> {
    let models = prepare_models(config)?;
    run_attack_with(config, &models)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separability {
    /// Silhouette of the recovered noises themselves.
    pub raw: f64,
    /// Silhouette of the chosen hidden layer's activations.
    pub features: f64,
    pub layer: usize,
    pub per_concept: usize,
}

/// Recovers noises for samples of every concept on the original network and
/// scores how well they cluster by concept, before and after one layer.
pub fn separability(config: &ExperimentConfig, models: &Models) -> Result<Separability> {
    let mlp = models
        .original_mlp
        .as_ref()
        .ok_or_else(|| LabError::Usage("separability needs a network denoiser".into()))?;
    let schedule = config.schedule.build()?;
    let per = config.evaluation.separability_per_concept;
    let layer = config.evaluation.separability_layer;
    let seed = config.stage_seed("separability");
    let top = schedule.timestep(schedule.num_steps())?;
    let jobs: Vec<(usize, usize)> = models.data.concepts().ids().flat_map(|c| (0..per).map(move |i| (c.0, i))).collect();
    let rows: Vec<(usize, Vec<f64>, Vec<f64>)> = pool(config.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(c, i)| {
                let noise = gaussian(mlp.dim(), &mut stream_rng(seed, (c * per + i) as u64));
                let z0 = ddim_sample(mlp, &noise, Condition::concept(c), &schedule, Some(config.attack.target_guidance))?
                    .clean()
                    .clone();
                let z_star = tina_inversion(mlp, &z0, &schedule, &config.attack.tina)?.z_t_star;
                let feats = mlp.extract_features(&z_star, top, Condition::Null, layer)?;
                Ok((c, z_star.into_vec(), feats))
            })
            .collect::<Result<_>>()
    })?;
    let raw: Vec<(usize, Vec<f64>)> = rows.iter().map(|(c, z, _)| (*c, z.clone())).collect();
    let feats: Vec<(usize, Vec<f64>)> = rows.into_iter().map(|(c, _, f)| (c, f)).collect();
    Ok(Separability {
        raw: separability_score(&raw)?,
        features: separability_score(&feats)?,
        layer,
        per_concept: per,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_config, parse_config_with, Overrides};

    fn small(arms: &str, n: usize) -> ExperimentConfig {
        parse_config(&format!(
            "seed = 5\n[schedule]\nsteps = 10\ntrain_steps = 100\n[model]\npreset = \"two-concept\"\n[attack]\nsamples = {n}\narms = [{arms}]\n"
        ))
        .unwrap()
    }

    #[test]
    fn zero_samples_give_an_empty_run() {
        let run = run_attack(&small("\"tina\", \"text\"", 0)).unwrap();
        assert!(run.targets.is_empty());
        assert_eq!(run.arms.len(), 2);
        assert!(run.arms.iter().all(|a| a.outcomes.is_empty()));
        assert_eq!(run.report(Arm::Tina).unwrap().asr, 0.0);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let one = small("\"standard\", \"tina\"", 6);
        let four = ExperimentConfig { workers: 4, ..one.clone() };
        let a = run_attack(&one).unwrap();
        let b = run_attack(&four).unwrap();
        for (x, y) in a.arms.iter().zip(&b.arms) {
            assert_eq!(x.outcomes, y.outcomes);
        }
    }

    #[test]
    fn targets_come_from_the_target_concept() {
        let c = small("\"standard\"", 8);
        let models = prepare_models(&c).unwrap();
        let run = run_attack_with(&c, &models).unwrap();
        for t in &run.targets {
            let (pred, _) = bayes_classify(&models.data, t.as_ref().unwrap()).unwrap();
            assert_eq!(pred, run.target);
        }
    }

    #[test]
    fn regeneration_ignores_everything_but_its_inputs() {
        let c = small("\"tina\"", 2);
        let models = prepare_models(&c).unwrap();
        let schedule = c.schedule.build().unwrap();
        let z = gaussian(8, &mut stream_rng(1, 0));
        let a = regenerate(models.erased.as_ref(), &z, &schedule).unwrap();
        let b = regenerate(models.erased.as_ref(), &z, &schedule).unwrap();
        assert_eq!(a, b);
        let direct = ddim_sample(models.erased.as_ref(), &z, Condition::Null, &schedule, None).unwrap();
        assert_eq!(&a, direct.clean());
    }

    #[test]
    fn mostly_failing_run_is_aborted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut bad = Latent::zeros(8);
        bad.as_mut_slice()[0] = 1e200;
        tina_core::io::write_latents(&path, &[bad.clone(), bad, Latent::zeros(8)]).unwrap();
        let mut c = parse_config_with(
            "[model]\npreset = \"two-concept\"\n[schedule]\nsteps = 5\ntrain_steps = 50\n[attack]\nsamples = 3\narms = [\"standard\"]\n",
            &Overrides {
                seed: Some(1),
                ..Overrides::default()
            },
        )
        .unwrap();
        c.attack.targets_path = Some(path);
        match run_attack(&c) {
            Err(LabError::Aborted { failed, total, .. }) => assert_eq!((failed, total), (2, 3)),
            other => panic!("expected abort, got {other:?}"),
        }
    }
}
