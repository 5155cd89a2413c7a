//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so every line is printed, and exits non-zero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tina_core::evaluation::Arm;
use tina_core::inversion::{tina_inversion, tina_loss, InnerOptimizer, InversionReport, TinaConfig};
use tina_core::sampler::{ddim_sample, ddim_step, ddim_step_with_eps};
use tina_core::schedule::make_strided_schedule;
use tina_core::{Condition, Denoiser, GaussianMixtureDenoiser, Latent, NoiseSchedule};
use tina_lab::config::{parse_config, ExperimentConfig};
use tina_lab::export::export_results;
use tina_lab::manifest::save_run;
use tina_lab::pipeline::{gaussian, prepare_models, run_attack_with, separability, AttackRun, Models};
use tina_lab::presets;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

struct Board {
    failed: usize,
}

impl Board {
    fn check(&mut self, id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let v = f();
        let took = start.elapsed();
        let in_time = limit.is_none_or(|l| took <= l);
        let pass = v.pass && in_time;
        if !pass {
            self.failed += 1;
        }
        let budget = limit.map(|l| format!(" / limit {:.0}s", l.as_secs_f64())).unwrap_or_default();
        println!(
            "{} criterion {id:>2} {name}: {} [{:.1}s{budget}]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64()
        );
    }
}

fn schedule() -> NoiseSchedule {
    make_strided_schedule(1000, 50, 1e-4, 0.02).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn coefficients() -> Verdict {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a_prev: f64 = r.random_range(0.01..1.0);
        let a: f64 = r.random_range(1e-4..1.0) * a_prev;
        let s = NoiseSchedule::from_alphas(vec![1.0, a_prev, a]).unwrap();
        let c1 = (a / a_prev).sqrt();
        let c2 = (1.0 - a).sqrt() - (a * (1.0 - a_prev) / a_prev).sqrt();
        let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel(s.c1(2).unwrap(), c1)).max(rel(s.c2(2).unwrap(), c2));
    }
    verdict(worst < 1e-12, format!("max relative error {worst:.1e} (< 1e-12)"))
}

fn round_trip() -> Verdict {
    let m = presets::four_concept().unwrap();
    let s = schedule();
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = r.random_range(1..=s.num_steps());
        let z = gaussian(16, &mut r);
        let cond = if r.random_bool(0.5) { Condition::Null } else { Condition::concept(r.random_range(0..4)) };
        let eps = m.epsilon(&z, s.timestep(t).unwrap(), cond).unwrap();
        let prev = ddim_step_with_eps(&z, &eps, t, &s).unwrap();
        let back = Latent::combine(s.c1(t).unwrap(), &prev, s.c2(t).unwrap(), &eps);
        worst = worst.max(back.max_abs_diff(&z));
    }
    verdict(worst < 1e-10, format!("max error {worst:.1e} (< 1e-10)"))
}

fn single_gaussian() -> (GaussianMixtureDenoiser, Latent, f64) {
    let mut r = rng(3);
    let mu = gaussian(8, &mut r).scaled(0.5);
    let var = 0.04;
    let m = GaussianMixtureDenoiser::one_per_concept(&["X"], &[1.0], vec![mu.clone()], var).unwrap();
    (m, mu, var)
}

fn linear_config() -> TinaConfig {
    TinaConfig {
        k: 25,
        eta: 0.5,
        optimizer: InnerOptimizer::GradientDescent,
        residual_tolerance: 0.0,
    }
}

fn linear_oracle() -> Verdict {
    let (m, mu, var) = single_gaussian();
    let s = schedule();
    let mut r = rng(4);
    let (mut worst_fp, mut worst_rt) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let (z0, _) = m.sample_clean(Condition::Null, &mut r).unwrap();
        let rep = tina_inversion(&m, &z0, &s, &linear_config()).unwrap();
        for t in 1..=s.num_steps() {
            // eps(z) = a z + b per coordinate, so the fixed point is scalar
            let alpha = s.alpha(t).unwrap();
            let a = (1.0 - alpha).sqrt() / (alpha * var + 1.0 - alpha);
            let (c1, c2) = (s.c1(t).unwrap(), s.c2(t).unwrap());
            let prev = rep.path.at(t - 1).unwrap();
            let got = rep.path.at(t).unwrap();
            for i in 0..8 {
                let b = -a * alpha.sqrt() * mu[i];
                let want = (c1 * prev[i] + c2 * b) / (1.0 - c2 * a);
                worst_fp = worst_fp.max((got[i] - want).abs());
            }
        }
        let back = ddim_sample(&m, &rep.z_t_star, Condition::Null, &s, None).unwrap();
        worst_rt = worst_rt.max(back.clean().distance(&z0));
    }
    verdict(
        worst_fp < 1e-6 && worst_rt < 1e-5,
        format!("fixed-point error {worst_fp:.1e} (< 1e-6), regeneration error {worst_rt:.1e} (< 1e-5)"),
    )
}

fn gradient_check() -> Verdict {
    let mut r = rng(5);
    let m = GaussianMixtureDenoiser::one_per_concept(
        &["A", "B", "C"],
        &[0.2, 0.3, 0.5],
        (0..3).map(|_| gaussian(4, &mut r).scaled(0.8)).collect(),
        0.05,
    )
    .unwrap();
    let s = schedule();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = r.random_range(1..=s.num_steps());
        let z_prev = gaussian(4, &mut r);
        let z_t = gaussian(4, &mut r);
        let (_, grad) = tina_loss(&m, &z_t, &z_prev, t, &s).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..4)
            .map(|j| {
                let mut p = z_t.clone();
                p.as_mut_slice()[j] += h;
                let mut q = z_t.clone();
                q.as_mut_slice()[j] -= h;
                (tina_loss(&m, &p, &z_prev, t, &s).unwrap().0 - tina_loss(&m, &q, &z_prev, t, &s).unwrap().0) / (2.0 * h)
            })
            .collect();
        let fd = Latent::from_vec(fd);
        worst = worst.max(grad.distance(&fd) / fd.norm().max(1e-8));
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.1e} (< 1e-4)"))
}

/// Counts accepted steps below `1e-8` residual and the worst mismatch of
/// re-running the sampler step from them.
fn self_consistency<D: Denoiser + ?Sized>(model: &D, s: &NoiseSchedule, report: &InversionReport) -> (usize, f64) {
    let mut count = 0;
    let mut worst = 0.0f64;
    for rec in &report.per_step {
        if rec.final_residual < 1e-8 {
            let z_t = report.path.at(rec.t).unwrap();
            let z_prev = report.path.at(rec.t - 1).unwrap();
            let again = ddim_step(model, z_t, rec.t, Condition::Null, s).unwrap();
            worst = worst.max(again.max_abs_diff(z_prev));
            count += 1;
        }
    }
    (count, worst)
}

fn fixed_point_consistency(remap: &(ExperimentConfig, Models, AttackRun)) -> Verdict {
    let s = schedule();
    let (m, _, _) = single_gaussian();
    let mut r = rng(6);
    let (mut count, mut worst) = (0, 0.0f64);
    for _ in 0..5 {
        let (z0, _) = m.sample_clean(Condition::Null, &mut r).unwrap();
        let (c, w) = self_consistency(&m, &s, &tina_inversion(&m, &z0, &s, &linear_config()).unwrap());
        count += c;
        worst = worst.max(w);
    }
    let (config, models, run) = remap;
    for target in run.targets.iter().flatten() {
        let rep = tina_inversion(models.erased.as_ref(), target, &s, &config.attack.tina).unwrap();
        let (c, w) = self_consistency(models.erased.as_ref(), &s, &rep);
        count += c;
        worst = worst.max(w);
    }
    verdict(
        count > 0 && worst < 1e-4,
        format!("{count} accepted steps, max re-step error {worst:.1e} (< 1e-4)"),
    )
}

fn attack_config(extra_model: &str, erasure: &str) -> ExperimentConfig {
    parse_config(&format!(
        "seed = 0\n[model]\npreset = \"four-concept\"\n{extra_model}\n[erasure]\n{erasure}\n[attack]\nsamples = 100\narms = [\"text\", \"standard\", \"tina_less_k\", \"tina\", \"conditioned\"]\n"
    ))
    .unwrap()
}

fn asr(run: &AttackRun, arm: Arm) -> f64 {
    run.report(arm).unwrap().asr
}

fn recon(run: &AttackRun, arm: Arm) -> f64 {
    run.report(arm).unwrap().mean_recon_error()
}

fn attack_verdict(run: &AttackRun, tina_floor: f64) -> Verdict {
    let (text, tina) = (asr(run, Arm::TextGuided), asr(run, Arm::Tina));
    let (r_tina, r_std) = (recon(run, Arm::Tina), recon(run, Arm::StandardInvNull));
    verdict(
        text <= 0.10 && tina >= tina_floor && r_tina < r_std,
        format!(
            "ASR text {text:.2} (<= 0.10), tina {tina:.2} (>= {tina_floor:.2}); recon tina {r_tina:.4} < standard {r_std:.4}"
        ),
    )
}

fn ablation(run: &AttackRun) -> Verdict {
    let (std, less, full) = (asr(run, Arm::StandardInvNull), asr(run, Arm::TinaLessK), asr(run, Arm::Tina));
    verdict(
        std <= less && less <= full && full - std >= 0.2,
        format!("ASR standard {std:.2} <= K=5 {less:.2} <= K=25 {full:.2}, gap {:.2} (>= 0.20)", full - std),
    )
}

fn conditioned(run: &AttackRun) -> Verdict {
    let (cond, std) = (asr(run, Arm::Conditioned), asr(run, Arm::StandardInvNull));
    verdict(cond <= std, format!("ASR conditioned {cond:.2} <= standard {std:.2}"))
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism(first: &AttackRun) -> Verdict {
    let config = attack_config("", "method = \"remap\"");
    let models = prepare_models(&config).unwrap();
    let second = run_attack_with(&config, &models).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (run, dir) in [(first, a.path()), (&second, b.path())] {
        let m = save_run(run, dir).unwrap();
        export_results(&m, dir, dir).unwrap();
    }
    let (x, y) = (csv_bytes(a.path()), csv_bytes(b.path()));
    verdict(!x.is_empty() && x == y, format!("{} CSV files compared byte for byte", x.len()))
}

fn network_config() -> ExperimentConfig {
    attack_config(
        "denoiser = \"mlp\"\n[model.mlp]\nhidden = [128, 128]\nembed_dim = 8\nskip = true\nepochs = 400\nbatches_per_epoch = 100\nbatch_size = 256\nlr = 1e-3\nweight_decay = 0.0",
        "method = \"finetune\"\n[erasure.finetune]\nepochs = 30\nlr = 1e-3\nscope = \"condition_pathway\"",
    )
}

fn main() {
    let mut board = Board { failed: 0 };
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));

    board.check(1, "coefficients", Some(Duration::from_secs(1)), coefficients);
    board.check(2, "algebraic round trip", Some(Duration::from_secs(10)), round_trip);
    board.check(3, "linear-denoiser oracle", Some(Duration::from_secs(30)), linear_oracle);
    board.check(4, "loss gradient", Some(Duration::from_secs(30)), gradient_check);

    let mut remap = None;
    board.check(6, "attack reproduction (remap)", minutes(10), || {
        let config = attack_config("", "method = \"remap\"");
        let models = prepare_models(&config).unwrap();
        let run = run_attack_with(&config, &models).unwrap();
        let v = attack_verdict(&run, 0.80);
        remap = Some((config, models, run));
        v
    });
    let remap = remap.expect("criterion 6 ran");
    board.check(7, "ablation ordering", minutes(15), || ablation(&remap.2));
    board.check(8, "conditioned inversion", None, || conditioned(&remap.2));
    board.check(5, "fixed-point self-consistency", None, || fixed_point_consistency(&remap));
    board.check(10, "determinism", None, || determinism(&remap.2));

    let config = network_config();
    let mut network = None;
    board.check(9, "separability (trained network)", minutes(20), || {
        let models = prepare_models(&config).unwrap();
        let s = separability(&config, &models).unwrap();
        network = Some(models);
        verdict(
            s.features > s.raw && s.features > 0.3,
            format!("silhouette layer {} {:.3} > raw {:.3}, and > 0.3", s.layer, s.features, s.raw),
        )
    });
    let models = network.expect("criterion 9 ran");
    board.check(11, "attack reproduction (fine-tuned)", None, || {
        attack_verdict(&run_attack_with(&config, &models).unwrap(), 0.60)
    });

    if board.failed > 0 {
        println!("{} criteria failed", board.failed);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
