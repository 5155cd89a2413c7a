//! Run manifests: what was run, and where every latent artifact lives.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tina_core::evaluation::Arm;
use tina_core::io::{decode_latents, encode_latents, write_latents};
use tina_core::Latent;

use crate::error::{LabError, Result};
use crate::pipeline::AttackRun;

/// Version of the manifest, CSV and SVG layouts.
pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TARGETS_FILE: &str = "targets.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub name: String,
    /// `(epoch, mean loss)`
    pub points: Vec<(usize, f64)>,
}

impl LossCurve {
    pub fn new(name: &str, points: Vec<(usize, f64)>) -> Self {
        Self {
            name: name.to_string(),
            points,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub arm: Arm,
    pub index: usize,
    pub target_path: String,
    pub target_row: usize,
    pub z_t_star_path: String,
    pub regenerated_path: String,
    /// Row of this sample in both per-arm latent files.
    pub row: usize,
    pub target: String,
    pub predicted: String,
    pub hit: bool,
    pub posterior: f64,
    pub recon_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub arm: Arm,
    pub index: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualTable {
    pub arm: Arm,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub created_unix: u64,
    pub seed: u64,
    pub concepts: Vec<String>,
    pub target: String,
    pub arms: Vec<Arm>,
    pub samples: usize,
    pub records: Vec<SampleRecord>,
    pub failures: Vec<FailureRecord>,
    pub residual_tables: Vec<ResidualTable>,
    pub loss_curves: Vec<LossCurve>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

/// Writes every latent and residual artifact of `run` into `dir` and
/// returns the manifest, which is also saved as `manifest.json`.
pub fn save_run(run: &AttackRun, dir: &Path) -> Result<AttackManifest> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let target_rows: Vec<Option<usize>> = {
        let mut next = 0;
        run.targets
            .iter()
            .map(|t| {
                t.as_ref().ok().map(|_| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let targets: Vec<Latent> = run.targets.iter().flatten().cloned().collect();
    write_latents(dir.join(TARGETS_FILE), &targets)?;

    let concept_name = |i: usize| run.concepts.get(i).cloned().unwrap_or_default();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut residual_tables = Vec::new();
    for arm_run in &run.arms {
        let arm = arm_run.arm;
        let z_path = format!("{arm}.z_t_star.bin");
        let regen_path = format!("{arm}.regenerated.bin");
        let mut z_rows = Vec::new();
        let mut regen_rows = Vec::new();
        let table = format!("residuals_{arm}.csv");
        let mut residuals = match arm {
            Arm::TextGuided => None,
            _ => {
                let mut w = csv::Writer::from_path(dir.join(&table))?;
                w.write_record(["sample", "t", "init_residual", "final_residual", "iterations"])?;
                Some(w)
            }
        };
        for (index, outcome) in arm_run.outcomes.iter().enumerate() {
            match outcome {
                Ok(o) => {
                    records.push(SampleRecord {
                        arm,
                        index,
                        target_path: TARGETS_FILE.into(),
                        target_row: target_rows[index].expect("successful arm implies a target"),
                        z_t_star_path: z_path.clone(),
                        regenerated_path: regen_path.clone(),
                        row: z_rows.len(),
                        target: concept_name(o.classified.target.0),
                        predicted: concept_name(o.classified.predicted.0),
                        hit: o.classified.predicted == o.classified.target,
                        posterior: o.classified.posterior,
                        recon_error: o.classified.recon_error,
                    });
                    z_rows.push(o.z_t_star.clone());
                    regen_rows.push(o.regenerated.clone());
                    if let Some(w) = residuals.as_mut() {
                        for s in &o.steps {
                            w.serialize((index, s.t, s.init_residual, s.final_residual, s.iterations))?;
                        }
                    }
                }
                Err(e) => failures.push(FailureRecord {
                    arm,
                    index,
                    error: e.clone(),
                }),
            }
        }
        if let Some(mut w) = residuals {
            w.flush().map_err(|e| LabError::io(dir.join(&table), e))?;
            residual_tables.push(ResidualTable { arm, path: table });
        }
        write_latents(dir.join(&z_path), &z_rows)?;
        write_latents(dir.join(&regen_path), &regen_rows)?;
    }

    let manifest = AttackManifest {
        format_version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: run.config_hash.clone(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        seed: run.seed,
        concepts: run.concepts.clone(),
        target: concept_name(run.target.0),
        arms: run.arms.iter().map(|a| a.arm).collect(),
        samples: run.targets.len(),
        records,
        failures,
        residual_tables,
        loss_curves: run.loss_curves.clone(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}

impl AttackManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_bytes(&path, self.to_json()?.as_bytes())?;
        Ok(path)
    }

    /// Loads `manifest.json` from a run directory, or a manifest file directly.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| LabError::io(&file, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(LabError::Manifest(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn records_for(&self, arm: Arm) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.arm == arm)
    }

    pub fn failures_for(&self, arm: Arm) -> usize {
        self.failures.iter().filter(|f| f.arm == arm).count()
    }

    /// Loads one latent file referenced by the manifest.
    pub fn read_artifact(dir: &Path, rel: &str) -> Result<Vec<Latent>> {
        let path = dir.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
        Ok(decode_latents(&bytes)?)
    }

    /// Checks that every referenced file loads, re-encodes to the same bytes
    /// and holds the referenced rows.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let mut files = BTreeSet::new();
        for r in &self.records {
            files.insert((r.target_path.as_str(), r.target_row));
            files.insert((r.z_t_star_path.as_str(), r.row));
            files.insert((r.regenerated_path.as_str(), r.row));
        }
        let mut rows: std::collections::BTreeMap<&str, usize> = Default::default();
        for (file, row) in files {
            let e = rows.entry(file).or_insert(0);
            *e = (*e).max(row + 1);
        }
        for (file, needed) in rows {
            let path = dir.join(file);
            let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
            let latents = decode_latents(&bytes)?;
            if encode_latents(&latents)? != bytes {
                return Err(LabError::Manifest(format!("{file} does not round-trip")));
            }
            if latents.len() < needed {
                return Err(LabError::Manifest(format!("{file} has {} rows, manifest needs {needed}", latents.len())));
            }
        }
        for t in &self.residual_tables {
            let path = dir.join(&t.path);
            let mut reader = csv::Reader::from_path(&path)?;
            for row in reader.deserialize::<(usize, usize, f64, f64, usize)>() {
                row?;
            }
        }
        Ok(())
    }
}
