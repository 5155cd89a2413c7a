//! End-to-end checks of the `tina` binary.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 4\n[schedule]\nsteps = 10\ntrain_steps = 100\n[model]\npreset = \"two-concept\"\n[attack]\nsamples = 6\n";

fn tina(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tina"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TINA_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn demo_config() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/configs/demo.toml").to_string()
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[attack]\nsamples = 2\n");
    let o = tina(&["attack", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]: seed"), "{}", stderr(&o));
}

#[test]
fn seed_flag_satisfies_a_seedless_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("seed = 4\n", ""));
    let o = tina(&["attack", "--config", &cfg, "--seed", "4", "-o", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_arm_lists_every_valid_arm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = tina(&["attack", "--config", &cfg, "--arms", "text,guess"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("error[config]: attack.arms"), "{err}");
    assert!(err.contains("text, standard, tina_less_k, tina, conditioned"), "{err}");
}

#[test]
fn syntax_errors_carry_a_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n[attack\n");
    let o = tina(&["train", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn io_failures_have_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = tina(&["train", "--config", "absent.toml"], dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("error[io]:"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), SMALL);
    std::fs::write(dir.path().join("blocker"), b"").unwrap();
    let o = tina(&["attack", "--config", &cfg, "-o", "blocker/run"], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn numeric_failures_have_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut huge = tina_core::Latent::zeros(8);
    huge.as_mut_slice()[0] = 1e200;
    tina_core::io::write_latents(dir.path().join("t.bin"), &[huge]).unwrap();
    let cfg = write_config(
        dir.path(),
        &SMALL.replace("samples = 6\n", "samples = 1\narms = [\"standard\"]\ntargets_path = \"t.bin\"\n"),
    );
    let o = tina(&["attack", "--config", &cfg, "-o", "run"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[numeric]:"));
}

#[test]
fn zero_iterations_reproduce_standard_inversion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = tina(&["invert", "--config", &cfg, "--mode", "tina", "--k", "0", "-o", "k0"], dir.path());
    let b = tina(&["invert", "--config", &cfg, "--mode", "standard", "-o", "std"], dir.path());
    assert!(a.status.success() && b.status.success(), "{}{}", stderr(&a), stderr(&b));
    for f in ["z_t_star.bin", "regenerated.bin"] {
        let x = std::fs::read(dir.path().join("k0").join(f)).unwrap();
        let y = std::fs::read(dir.path().join("std").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

fn without_timestamp(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("created_unix");
    v
}

#[test]
fn repeated_attacks_are_identical_up_to_timestamps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for out in ["a", "b"] {
        let o = tina(&["attack", "--config", &cfg, "-o", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(without_timestamp(&a.join("manifest.json")), without_timestamp(&b.join("manifest.json")));
    for f in ["summary.csv", "tina.csv", "tina.z_t_star.bin", "residuals_tina.csv", "scatter_tina.svg"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn every_subcommand_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = |args: &[&str]| {
        let mut full = args.to_vec();
        full.extend(["--config", &cfg, "-o", "out"]);
        let o = tina(&full, dir.path());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["train"]);
    run(&["erase"]);
    assert!(dir.path().join("out/erased.json").is_file());
    let counts = run(&["sample", "--concept", "A", "-n", "5", "--model", "original"]);
    assert!(counts.contains("A\t"));
    run(&["attack", "--arms", "text,tina"]);
    let summary = run(&["eval"]);
    assert!(summary.starts_with("arm"));
    let o = tina(&["export", "--run", "out", "-o", "exported"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("exported/summary.txt").is_file());

    // the trained model file feeds back in as a denoiser
    let reuse = write_config(
        dir.path(),
        &SMALL.replace("[attack]", "path = \"out/model.json\"\n[attack]"),
    );
    let o = tina(&["attack", "--config", &reuse, "-o", "reuse"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(dir.path().join("reuse/tina.csv")).unwrap(),
        std::fs::read(dir.path().join("out/tina.csv")).unwrap()
    );
}

#[test]
fn output_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("samples = 6", "samples = 1"));
    let run = |extra: &[&str]| {
        let mut args = vec!["attack", "--config", cfg.as_str(), "--arms", "standard"];
        args.extend(extra);
        let o = Command::new(env!("CARGO_BIN_EXE_tina"))
            .args(&args)
            .current_dir(dir.path())
            .env("TINA_OUTPUT_DIR", "from-env")
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
    };
    run(&[]);
    assert!(dir.path().join("from-env/manifest.json").is_file());
    run(&["-o", "from-flag"]);
    assert!(dir.path().join("from-flag/manifest.json").is_file());
}

#[test]
fn demo_config_reproduces_the_two_arm_gap() {
    let dir = tempfile::tempdir().unwrap();
    let o = tina(&["attack", "--config", &demo_config(), "--arms", "text,tina", "-o", "demo"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(dir.path().join("demo/summary.csv")).unwrap();
    let asr: Vec<(String, f64)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[3].parse().unwrap())
        })
        .collect();
    assert_eq!(asr[0].0, "text");
    assert_eq!(asr[1].0, "tina");
    assert!(asr[0].1 <= 0.1 && asr[1].1 >= 0.8, "{asr:?}");
}
