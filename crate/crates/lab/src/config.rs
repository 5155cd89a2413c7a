//! Experiment configuration: TOML parsing, defaults and batched validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tina_core::evaluation::Arm;
use tina_core::inversion::{InnerOptimizer, TinaConfig};
use tina_core::schedule::make_strided_schedule;
use tina_core::trainer::{FinetuneScope, MlpArchitecture, TrainConfig};
use tina_core::NoiseSchedule;

use crate::error::{ConfigErrors, ConfigIssue, LabError, Result};
use crate::presets::{self, PRESETS};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Not part of the config hash: it does not change any numeric output.
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for per-sample parallelism; 0 uses every core.
    #[serde(skip)]
    pub workers: usize,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub erasure: ErasureConfig,
    pub attack: AttackConfig,
    pub evaluation: EvaluationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Length of the underlying linear-beta schedule, strided down to `steps`.
    pub train_steps: usize,
    /// Explicit `alpha_0..alpha_T`; overrides the beta fields.
    pub alphas: Option<Vec<f64>>,
}

impl ScheduleConfig {
    pub fn build(&self) -> tina_core::Result<NoiseSchedule> {
        match &self.alphas {
            Some(a) => NoiseSchedule::from_alphas(a.clone()),
            None => make_strided_schedule(self.train_steps, self.steps, self.beta_start, self.beta_end),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Preset(String),
    /// A mixture model file.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserSource {
    /// The data mixture's own closed-form denoiser.
    Analytic,
    /// A model file written by `train` or `erase`.
    File(PathBuf),
    /// An MLP trained on the data mixture at startup.
    Mlp(MlpTraining),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MlpTraining {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Adds the analytic skip path using the mixture's component variance.
    pub skip: bool,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub uncond_prob: f64,
}

impl MlpTraining {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batches_per_epoch: self.batches_per_epoch,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            uncond_prob: self.uncond_prob,
            ..TrainConfig::new(self.epochs, seed)
        }
    }

    pub fn architecture(&self, skip_variance: f64) -> MlpArchitecture {
        MlpArchitecture {
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            skip_variance: self.skip.then_some(skip_variance),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelConfig {
    pub data: DataSource,
    pub denoiser: DenoiserSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErasureMethod {
    None,
    Remap,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scope: FinetuneScope,
    pub retention: f64,
}

impl FinetuneConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batches_per_epoch: self.batches_per_epoch,
            batch_size: self.batch_size,
            lr: self.lr,
            ..TrainConfig::new(self.epochs, seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErasureConfig {
    pub method: ErasureMethod,
    pub concepts: Vec<String>,
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackConfig {
    pub arms: Vec<Arm>,
    /// Trials per arm.
    pub samples: usize,
    /// Concept the targets are drawn from.
    pub target: String,
    /// Guidance scale of the text-prompt arm.
    pub guidance: f64,
    /// Guidance scale used to draw targets from the original model.
    pub target_guidance: f64,
    /// External target latents instead of sampling the original model.
    pub targets_path: Option<PathBuf>,
    pub tina: TinaConfig,
    pub tina_less_k: TinaConfig,
}

impl AttackConfig {
    pub fn tina_config(&self, arm: Arm) -> Option<&TinaConfig> {
        match arm {
            Arm::Tina => Some(&self.tina),
            Arm::TinaLessK => Some(&self.tina_less_k),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationConfig {
    /// Hidden layer whose activations feed the separability score.
    pub separability_layer: usize,
    pub separability_per_concept: usize,
}

pub const DEFAULT_ARMS: [Arm; 4] = [Arm::TextGuided, Arm::StandardInvNull, Arm::TinaLessK, Arm::Tina];

// Raw mirror of the file. Every field is optional so that defaults and
// validation stay in one place.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    workers: Option<usize>,
    #[serde(default)]
    schedule: RawSchedule,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    erasure: RawErasure,
    #[serde(default)]
    attack: RawAttack,
    #[serde(default)]
    evaluation: RawEvaluation,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    steps: Option<usize>,
    beta_start: Option<f64>,
    beta_end: Option<f64>,
    train_steps: Option<usize>,
    alphas: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    preset: Option<String>,
    data_path: Option<PathBuf>,
    denoiser: Option<String>,
    path: Option<PathBuf>,
    mlp: Option<RawMlp>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMlp {
    hidden: Option<Vec<usize>>,
    embed_dim: Option<usize>,
    skip: Option<bool>,
    epochs: Option<usize>,
    batches_per_epoch: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    uncond_prob: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawErasure {
    method: Option<String>,
    concepts: Option<Vec<String>>,
    #[serde(default)]
    finetune: RawFinetune,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFinetune {
    epochs: Option<usize>,
    batches_per_epoch: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    scope: Option<String>,
    retention: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    arms: Option<Vec<String>>,
    samples: Option<usize>,
    target: Option<String>,
    guidance: Option<f64>,
    target_guidance: Option<f64>,
    targets_path: Option<PathBuf>,
    #[serde(default)]
    tina: RawTina,
    #[serde(default)]
    tina_less_k: RawTina,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTina {
    k: Option<usize>,
    eta: Option<f64>,
    optimizer: Option<String>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    residual_tolerance: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvaluation {
    separability_layer: Option<usize>,
    separability_per_concept: Option<usize>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub arms: Option<Vec<String>>,
    pub samples: Option<usize>,
    pub workers: Option<usize>,
}

struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            field: field.to_string(),
            message: message.into(),
            location: None,
        });
    }

    fn positive(&mut self, field: &str, v: usize) {
        if v == 0 {
            self.push(field, "must be positive");
        }
    }

    fn finite_positive(&mut self, field: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.push(field, format!("must be a finite positive number, got {v}"));
        }
    }

    fn finite_nonnegative(&mut self, field: &str, v: f64) {
        if !(v >= 0.0 && v.is_finite()) {
            self.push(field, format!("must be a finite non-negative number, got {v}"));
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.chars().rev().take_while(|&c| c != '\n').count() + 1;
    (line, col)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with(text, &Overrides::default())
}

pub fn parse_config_with(text: &str, overrides: &Overrides) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let location = e.span().map(|s| line_col(text, s.start));
        LabError::Config(ConfigErrors(vec![ConfigIssue {
            field: String::new(),
            message: e.message().trim().to_string(),
            location,
        }]))
    })?;
    resolve(raw, overrides)
}

fn resolve(raw: RawConfig, ov: &Overrides) -> Result<ExperimentConfig> {
    let mut issues = Issues(Vec::new());

    let seed = ov.seed.or(raw.seed);
    if seed.is_none() {
        issues.push("seed", "required field is missing");
    }

    let s = raw.schedule;
    let schedule = ScheduleConfig {
        steps: s.steps.unwrap_or(50),
        beta_start: s.beta_start.unwrap_or(1e-4),
        beta_end: s.beta_end.unwrap_or(0.02),
        train_steps: s.train_steps.unwrap_or(1000),
        alphas: s.alphas,
    };
    if let Err(e) = schedule.build() {
        issues.push("schedule", e.to_string());
    }

    let model = resolve_model(raw.model, &mut issues);
    let erasure = resolve_erasure(raw.erasure, &model, &mut issues);
    let attack = resolve_attack(raw.attack, ov, &erasure, &mut issues);

    let e = raw.evaluation;
    let evaluation = EvaluationConfig {
        separability_layer: e.separability_layer.unwrap_or(1),
        separability_per_concept: e.separability_per_concept.unwrap_or(50),
    };
    if let DenoiserSource::Mlp(m) = &model.denoiser {
        if evaluation.separability_layer > m.hidden.len() {
            issues.push(
                "evaluation.separability_layer",
                format!("network has {} hidden layers", m.hidden.len()),
            );
        }
    }

    if let DataSource::Preset(name) = &model.data {
        if let Some(Ok(data)) = presets::by_name(name) {
            check_concepts(&data, &erasure, &attack, &mut issues);
        }
    }

    if !issues.0.is_empty() {
        return Err(LabError::Config(ConfigErrors(issues.0)));
    }
    Ok(ExperimentConfig {
        seed: seed.expect("checked above"),
        output_dir: raw.output_dir,
        workers: ov.workers.or(raw.workers).unwrap_or(1),
        schedule,
        model,
        erasure,
        attack,
        evaluation,
    })
}

fn check_concepts(data: &impl tina_core::Denoiser, erasure: &ErasureConfig, attack: &AttackConfig, issues: &mut Issues) {
    let table = data.concepts();
    for name in &erasure.concepts {
        if table.id(name).is_err() {
            issues.push("erasure.concepts", format!("unknown concept {name:?}; known: {}", table.names().join(", ")));
        }
    }
    if table.id(&attack.target).is_err() {
        issues.push("attack.target", format!("unknown concept {:?}; known: {}", attack.target, table.names().join(", ")));
    }
}

fn resolve_model(m: RawModel, issues: &mut Issues) -> ModelConfig {
    let data = match (m.preset, m.data_path) {
        (Some(_), Some(_)) => {
            issues.push("model", "set either preset or data_path, not both");
            DataSource::Preset(PRESETS[0].into())
        }
        (None, Some(p)) => DataSource::File(p),
        (preset, None) => {
            let name = preset.unwrap_or_else(|| PRESETS[0].into());
            if !PRESETS.contains(&name.as_str()) {
                issues.push("model.preset", format!("unknown preset {name:?}; valid presets: {}", PRESETS.join(", ")));
            }
            DataSource::Preset(name)
        }
    };

    let kind = m.denoiser.unwrap_or_else(|| if m.path.is_some() { "file" } else { "analytic" }.into());
    let raw_mlp = m.mlp.unwrap_or_default();
    let denoiser = match kind.as_str() {
        "analytic" => DenoiserSource::Analytic,
        "file" => match m.path {
            Some(p) => DenoiserSource::File(p),
            None => {
                issues.push("model.path", "required when denoiser = \"file\"");
                DenoiserSource::Analytic
            }
        },
        "mlp" => {
            let mlp = MlpTraining {
                hidden: raw_mlp.hidden.unwrap_or_else(|| vec![128, 128]),
                embed_dim: raw_mlp.embed_dim.unwrap_or(8),
                skip: raw_mlp.skip.unwrap_or(true),
                epochs: raw_mlp.epochs.unwrap_or(400),
                batches_per_epoch: raw_mlp.batches_per_epoch.unwrap_or(100),
                batch_size: raw_mlp.batch_size.unwrap_or(256),
                lr: raw_mlp.lr.unwrap_or(1e-3),
                weight_decay: raw_mlp.weight_decay.unwrap_or(0.0),
                uncond_prob: raw_mlp.uncond_prob.unwrap_or(0.2),
            };
            if mlp.hidden.is_empty() || mlp.hidden.contains(&0) {
                issues.push("model.mlp.hidden", "needs at least one layer, all widths positive");
            }
            issues.positive("model.mlp.embed_dim", mlp.embed_dim);
            issues.positive("model.mlp.batches_per_epoch", mlp.batches_per_epoch);
            issues.positive("model.mlp.batch_size", mlp.batch_size);
            issues.finite_positive("model.mlp.lr", mlp.lr);
            issues.finite_nonnegative("model.mlp.weight_decay", mlp.weight_decay);
            if !(0.0..=1.0).contains(&mlp.uncond_prob) {
                issues.push("model.mlp.uncond_prob", "must be in [0, 1]");
            }
            DenoiserSource::Mlp(mlp)
        }
        other => {
            issues.push(
                "model.denoiser",
                format!("unknown denoiser {other:?}; valid: analytic, file, mlp"),
            );
            DenoiserSource::Analytic
        }
    };
    ModelConfig { data, denoiser }
}

fn resolve_erasure(e: RawErasure, model: &ModelConfig, issues: &mut Issues) -> ErasureConfig {
    let method = match e.method.as_deref().unwrap_or("remap") {
        "none" => ErasureMethod::None,
        "remap" => ErasureMethod::Remap,
        "finetune" => ErasureMethod::Finetune,
        other => {
            issues.push("erasure.method", format!("unknown method {other:?}; valid: none, remap, finetune"));
            ErasureMethod::Remap
        }
    };
    let concepts = e.concepts.unwrap_or_else(|| vec!["A".into()]);
    if method != ErasureMethod::None && concepts.is_empty() {
        issues.push("erasure.concepts", "must name at least one concept");
    }
    if method == ErasureMethod::Finetune && model.denoiser == DenoiserSource::Analytic {
        issues.push("erasure.method", "finetune needs a network denoiser (model.denoiser = \"mlp\" or \"file\")");
    }
    let f = e.finetune;
    let scope = match f.scope.as_deref().unwrap_or("condition_pathway") {
        "embeddings" => FinetuneScope::Embeddings,
        "condition_pathway" => FinetuneScope::ConditionPathway,
        "all" => FinetuneScope::All,
        other => {
            issues.push(
                "erasure.finetune.scope",
                format!("unknown scope {other:?}; valid: embeddings, condition_pathway, all"),
            );
            FinetuneScope::ConditionPathway
        }
    };
    let finetune = FinetuneConfig {
        epochs: f.epochs.unwrap_or(30),
        batches_per_epoch: f.batches_per_epoch.unwrap_or(100),
        batch_size: f.batch_size.unwrap_or(256),
        lr: f.lr.unwrap_or(1e-3),
        scope,
        retention: f.retention.unwrap_or(0.0),
    };
    issues.positive("erasure.finetune.batches_per_epoch", finetune.batches_per_epoch);
    issues.positive("erasure.finetune.batch_size", finetune.batch_size);
    issues.finite_positive("erasure.finetune.lr", finetune.lr);
    if !(0.0..1.0).contains(&finetune.retention) {
        issues.push("erasure.finetune.retention", "must be in [0, 1)");
    }
    ErasureConfig {
        method,
        concepts,
        finetune,
    }
}

fn resolve_tina(raw: &RawTina, base: TinaConfig, field: &str, issues: &mut Issues) -> TinaConfig {
    let optimizer = match raw.optimizer.as_deref() {
        None => base.optimizer,
        Some("adamw") => InnerOptimizer::default(),
        Some("gd") | Some("gradient_descent") => InnerOptimizer::GradientDescent,
        Some(other) => {
            issues.push(
                &format!("{field}.optimizer"),
                format!("unknown optimizer {other:?}; valid: adamw, gradient_descent"),
            );
            base.optimizer
        }
    };
    let optimizer = match optimizer {
        InnerOptimizer::Adamw { beta1, beta2, eps } => InnerOptimizer::Adamw {
            beta1: raw.beta1.unwrap_or(beta1),
            beta2: raw.beta2.unwrap_or(beta2),
            eps: raw.eps.unwrap_or(eps),
        },
        gd => gd,
    };
    let config = TinaConfig {
        k: raw.k.unwrap_or(base.k),
        eta: raw.eta.unwrap_or(base.eta),
        optimizer,
        residual_tolerance: raw.residual_tolerance.unwrap_or(base.residual_tolerance),
    };
    if let Err(e) = config.validate() {
        issues.push(field, e.to_string());
    }
    config
}

fn resolve_attack(a: RawAttack, ov: &Overrides, erasure: &ErasureConfig, issues: &mut Issues) -> AttackConfig {
    let names = ov.arms.clone().or(a.arms);
    let arms: Vec<Arm> = match names {
        None => DEFAULT_ARMS.to_vec(),
        Some(names) => {
            let mut arms = Vec::new();
            for n in names {
                match n.parse::<Arm>() {
                    Ok(arm) if !arms.contains(&arm) => arms.push(arm),
                    Ok(_) => issues.push("attack.arms", format!("arm {n:?} listed twice")),
                    Err(_) => issues.push(
                        "attack.arms",
                        format!("unknown arm {n:?}; valid arms: {}", Arm::valid_names()),
                    ),
                }
            }
            arms
        }
    };
    if arms.is_empty() && !issues.0.iter().any(|i| i.field == "attack.arms") {
        issues.push("attack.arms", "must list at least one arm");
    }
    let tina = resolve_tina(&a.tina, TinaConfig::default(), "attack.tina", issues);
    let less_base = TinaConfig { k: 5, ..tina };
    let tina_less_k = resolve_tina(&a.tina_less_k, less_base, "attack.tina_less_k", issues);
    let guidance = a.guidance.unwrap_or(7.5);
    let target_guidance = a.target_guidance.unwrap_or(1.0);
    issues.finite_nonnegative("attack.guidance", guidance);
    issues.finite_nonnegative("attack.target_guidance", target_guidance);
    let target = a
        .target
        .or_else(|| erasure.concepts.first().cloned())
        .unwrap_or_else(|| "A".into());
    AttackConfig {
        arms,
        samples: ov.samples.or(a.samples).unwrap_or(100),
        target,
        guidance,
        target_guidance,
        targets_path: a.targets_path,
        tina,
        tina_less_k,
    }
}

/// Reads, parses and validates a config file. Relative paths inside it are
/// resolved against the file's directory and must exist.
pub fn load(path: impl AsRef<Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut config = parse_config_with(&text, overrides)?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve_paths(&mut config, base)?;
    Ok(config)
}

/// Anchors relative paths at `base` and checks that input files exist.
pub fn resolve_paths(config: &mut ExperimentConfig, base: &Path) -> Result<()> {
    let anchor = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    let mut issues = Issues(Vec::new());
    let mut check = |field: &str, p: &mut PathBuf| {
        anchor(p);
        if !p.is_file() {
            issues.push(field, format!("file not found: {}", p.display()));
        }
    };
    if let DataSource::File(p) = &mut config.model.data {
        check("model.data_path", p);
    }
    if let DenoiserSource::File(p) = &mut config.model.denoiser {
        check("model.path", p);
    }
    if let Some(p) = &mut config.attack.targets_path {
        check("attack.targets_path", p);
    }
    if let Some(p) = &mut config.output_dir {
        anchor(p);
    }
    if issues.0.is_empty() {
        Ok(())
    } else {
        Err(LabError::Config(ConfigErrors(issues.0)))
    }
}

impl ExperimentConfig {
    /// Canonical JSON used for the config hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Derives an independent seed for one pipeline stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    /// Validates concept names once the data mixture is known.
    pub fn check_against(&self, data: &tina_core::GaussianMixtureDenoiser) -> Result<()> {
        let mut issues = Issues(Vec::new());
        check_concepts(data, &self.erasure, &self.attack, &mut issues);
        if issues.0.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(ConfigErrors(issues.0)))
        }
    }
}
