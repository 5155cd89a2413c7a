use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tina_core::evaluation::bayes_classify;
use tina_core::inversion::{conditioned_inversion, standard_inversion, tina_inversion, TinaConfig};
use tina_core::io::{read_latents, write_latents};
use tina_core::sampler::ddim_sample;
use tina_core::{Condition, Denoiser};

use tina_lab::config::{self, ExperimentConfig, Overrides};
use tina_lab::error::{LabError, Result};
use tina_lab::export::{export_results, summary_table};
use tina_lab::manifest::{save_run, AttackManifest};
use tina_lab::pipeline::{self, draw_targets, gaussian, prepare_models, regenerate, stream_rng};

const OUTPUT_ENV: &str = "TINA_OUTPUT_DIR";
const DEFAULT_OUTPUT: &str = "tina-out";

#[derive(Parser)]
#[command(name = "tina", version, about = "Text-free inversion attacks on erased toy diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: config, then $TINA_OUTPUT_DIR, then ./tina-out].
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Builds (and if configured, trains) the original denoiser.
    Train(Common),
    /// Builds the erased denoiser.
    Erase(Common),
    /// Draws samples from the original or erased model.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Concept name, or `null`.
        #[arg(long, default_value = "null")]
        concept: String,
        /// Guidance scale for concept conditions.
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long, short = 'n', default_value_t = 100)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = Which::Erased)]
        model: Which,
    },
    /// Inverts latents on the erased model and regenerates them.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Mode::Tina)]
        mode: Mode,
        /// Inner iterations per step.
        #[arg(long)]
        k: Option<usize>,
        /// Inner step size.
        #[arg(long)]
        eta: Option<f64>,
        /// Latent file to invert; defaults to the configured targets.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Runs the full attack and exports its tables.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Comma-separated arms, e.g. `text,tina`.
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
        #[arg(long, short = 'n')]
        samples: Option<usize>,
    },
    /// Verifies a saved run and prints its summary.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run directory; defaults to the output directory.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Also scores concept separability of recovered noises.
        #[arg(long)]
        separability: bool,
    },
    /// Writes tables and plots for a saved run.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Which {
    Original,
    Erased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Tina,
    Standard,
    Conditioned,
}

fn load_config(common: &Common, mut overrides: Overrides) -> Result<ExperimentConfig> {
    overrides.seed = common.seed;
    overrides.workers = common.workers;
    match &common.config {
        Some(path) => config::load(path, &overrides),
        None => config::parse_config_with("", &overrides),
    }
}

fn output_dir(common: &Common, config: Option<&ExperimentConfig>) -> PathBuf {
    common
        .output
        .clone()
        .or_else(|| config.and_then(|c| c.output_dir.clone()))
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn write_loss_curves(dir: &Path, curves: &[tina_lab::manifest::LossCurve]) -> Result<()> {
    for c in curves {
        let mut w = csv::Writer::from_path(dir.join(format!("loss_{}.csv", c.name)))?;
        w.write_record(["epoch", "loss"])?;
        for p in &c.points {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| LabError::io(dir, e))?;
    }
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let config = load_config(common, Overrides::default())?;
    let out = output_dir(common, Some(&config));
    ensure_dir(&out)?;
    let schedule = config.schedule.build()?;
    let data = pipeline::load_data(&config)?;
    let (file, _, curves) = pipeline::original_model(&config, &data, &schedule)?;
    let path = out.join("model.json");
    file.save(&path)?;
    write_loss_curves(&out, &curves)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn erase_cmd(common: &Common) -> Result<()> {
    let config = load_config(common, Overrides::default())?;
    let out = output_dir(common, Some(&config));
    ensure_dir(&out)?;
    let models = prepare_models(&config)?;
    models.original_file.save(out.join("model.json"))?;
    let path = out.join("erased.json");
    models.erased_file.save(&path)?;
    write_loss_curves(&out, &models.loss_curves)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sample(common: &Common, concept: &str, guidance: Option<f64>, n: usize, which: Which) -> Result<()> {
    let config = load_config(common, Overrides::default())?;
    let out = output_dir(common, Some(&config));
    ensure_dir(&out)?;
    let models = prepare_models(&config)?;
    let schedule = config.schedule.build()?;
    let cond = match concept {
        "null" => Condition::Null,
        name => Condition::Concept(models.data.concepts().id(name)?),
    };
    let model = match which {
        Which::Original => models.original.as_ref(),
        Which::Erased => models.erased.as_ref(),
    };
    let seed = config.stage_seed("sample");
    let guidance = guidance.unwrap_or(config.attack.guidance);
    let mut latents = Vec::with_capacity(n);
    let mut counts = vec![0usize; models.data.concepts().len()];
    for i in 0..n {
        let noise = gaussian(models.data.dim(), &mut stream_rng(seed, i as u64));
        let z0 = ddim_sample(model, &noise, cond, &schedule, Some(guidance))?.clean().clone();
        counts[bayes_classify(&models.data, &z0)?.0 .0] += 1;
        latents.push(z0);
    }
    let path = out.join("samples.bin");
    write_latents(&path, &latents)?;
    for (name, c) in models.data.concepts().names().iter().zip(counts) {
        println!("{name}\t{c}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn invert(common: &Common, mode: Mode, k: Option<usize>, eta: Option<f64>, input: Option<&Path>) -> Result<()> {
    let config = load_config(common, Overrides::default())?;
    let out = output_dir(common, Some(&config));
    ensure_dir(&out)?;
    let models = prepare_models(&config)?;
    let schedule = config.schedule.build()?;
    let concept = models.data.concepts().id(&config.attack.target)?;
    let targets = match input {
        Some(p) => read_latents(p)?,
        None => draw_targets(&config, &models, &schedule, concept)?
            .into_iter()
            .collect::<std::result::Result<_, String>>()
            .map_err(|e| LabError::Core(tina_core::Error::Input(e)))?,
    };
    let tina = TinaConfig {
        k: k.unwrap_or(config.attack.tina.k),
        eta: eta.unwrap_or(config.attack.tina.eta),
        ..config.attack.tina
    };
    let erased = models.erased.as_ref();
    let (mut stars, mut regens) = (Vec::new(), Vec::new());
    let mut w = csv::Writer::from_path(out.join("residuals.csv"))?;
    w.write_record(["sample", "t", "init_residual", "final_residual", "iterations"])?;
    for (i, z0) in targets.iter().enumerate() {
        let report = match mode {
            Mode::Tina => tina_inversion(erased, z0, &schedule, &tina)?,
            Mode::Standard => standard_inversion(erased, z0, Condition::Null, &schedule)?,
            Mode::Conditioned => conditioned_inversion(erased, z0, Condition::Concept(concept), &schedule)?,
        };
        for s in &report.per_step {
            w.serialize((i, s.t, s.init_residual, s.final_residual, s.iterations))?;
        }
        regens.push(regenerate(erased, &report.z_t_star, &schedule)?);
        stars.push(report.z_t_star);
    }
    w.flush().map_err(|e| LabError::io(&out, e))?;
    write_latents(out.join("z_t_star.bin"), &stars)?;
    write_latents(out.join("regenerated.bin"), &regens)?;
    println!("inverted {} latents into {}", stars.len(), out.display());
    Ok(())
}

fn attack(common: &Common, arms: Option<Vec<String>>, samples: Option<usize>) -> Result<()> {
    let config = load_config(
        common,
        Overrides {
            arms,
            samples,
            ..Overrides::default()
        },
    )?;
    let out = output_dir(common, Some(&config));
    let run = pipeline::run_attack(&config)?;
    let manifest = save_run(&run, &out)?;
    let report = export_results(&manifest, &out, &out)?;
    print!("{}", summary_table(&report.summary));
    for (arm, check) in &report.residual_checks {
        if !check.passed() {
            eprintln!("warning: {arm}: {} of {} residual rows grew", check.violations, check.rows);
        }
    }
    println!("wrote {}", out.join(tina_lab::manifest::MANIFEST_FILE).display());
    Ok(())
}

fn eval(common: &Common, run: Option<&Path>, separability: bool) -> Result<()> {
    let config = if separability || common.config.is_some() || common.seed.is_some() {
        Some(load_config(common, Overrides::default())?)
    } else {
        None
    };
    let dir = run.map(Path::to_path_buf).unwrap_or_else(|| output_dir(common, config.as_ref()));
    let manifest = AttackManifest::load(&dir)?;
    manifest.verify(&dir)?;
    print!("{}", summary_table(&tina_lab::export::summarize(&manifest)));
    if let Some(config) = config.filter(|_| separability) {
        let models = prepare_models(&config)?;
        let s = pipeline::separability(&config, &models)?;
        println!("separability raw={:.4} layer{}={:.4}", s.raw, s.layer, s.features);
        let json = serde_json::json!({
            "raw": s.raw,
            "features": s.features,
            "layer": s.layer,
            "per_concept": s.per_concept,
        });
        let path = dir.join("separability.json");
        std::fs::write(&path, serde_json::to_string_pretty(&json)? + "\n").map_err(|e| LabError::io(&path, e))?;
    }
    Ok(())
}

fn export(common: &Common, run: Option<&Path>) -> Result<()> {
    let config = match (&common.config, common.seed) {
        (None, None) => None,
        _ => Some(load_config(common, Overrides::default())?),
    };
    let out = output_dir(common, config.as_ref());
    let dir = run.map(Path::to_path_buf).unwrap_or_else(|| out.clone());
    let manifest = AttackManifest::load(&dir)?;
    let report = export_results(&manifest, &dir, &out)?;
    println!("wrote {} files to {}", report.files.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => train(&c),
        Command::Erase(c) => erase_cmd(&c),
        Command::Sample {
            common,
            concept,
            guidance,
            samples,
            model,
        } => sample(&common, &concept, guidance, samples, model),
        Command::Invert {
            common,
            mode,
            k,
            eta,
            input,
        } => invert(&common, mode, k, eta, input.as_deref()),
        Command::Attack { common, arms, samples } => attack(&common, arms, samples),
        Command::Eval {
            common,
            run,
            separability,
        } => eval(&common, run.as_deref(), separability),
        Command::Export { common, run } => export(&common, run.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            match &e {
                LabError::Config(issues) => {
                    for issue in &issues.0 {
                        eprintln!("error[{}]: {issue}", class.tag());
                    }
                }
                other => eprintln!("error[{}]: {other}", class.tag()),
            }
            ExitCode::from(class.exit_code() as u8)
        }
    }
}
