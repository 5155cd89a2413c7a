//! Tables and plots derived from a saved run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tina_core::evaluation::{pca_2d, Arm};

use crate::error::{LabError, Result};
use crate::manifest::AttackManifest;
use crate::svg;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: Arm,
    pub samples: usize,
    pub hits: usize,
    pub asr: f64,
    pub mean_recon_error: f64,
    pub mean_posterior: f64,
    pub failures: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualCheck {
    pub rows: usize,
    /// Rows whose final residual exceeds the initial one.
    pub violations: usize,
}

impl ResidualCheck {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Clone, Debug)]
pub struct ExportReport {
    pub files: Vec<PathBuf>,
    pub summary: Vec<SummaryRow>,
    pub residual_checks: Vec<(Arm, ResidualCheck)>,
}

pub fn summarize(manifest: &AttackManifest) -> Vec<SummaryRow> {
    manifest
        .arms
        .iter()
        .filter_map(|&arm| {
            let recs: Vec<_> = manifest.records_for(arm).collect();
            let failures = manifest.failures_for(arm);
            if recs.is_empty() && failures == 0 {
                return None;
            }
            let n = recs.len();
            let hits = recs.iter().filter(|r| r.hit).count();
            let mean = |f: &dyn Fn(&&crate::manifest::SampleRecord) -> f64| {
                if n == 0 {
                    f64::NAN
                } else {
                    recs.iter().map(f).sum::<f64>() / n as f64
                }
            };
            Some(SummaryRow {
                arm,
                samples: n,
                hits,
                asr: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
                mean_recon_error: mean(&|r| r.recon_error),
                mean_posterior: mean(&|r| r.posterior),
                failures,
            })
        })
        .collect()
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>7} {:>5} {:>6} {:>12} {:>10} {:>8}",
        "arm", "samples", "hits", "asr", "recon_error", "posterior", "failures"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>5} {:>6.3} {:>12.6} {:>10.4} {:>8}",
            r.arm.name(),
            r.samples,
            r.hits,
            r.asr,
            r.mean_recon_error,
            r.mean_posterior,
            r.failures
        );
    }
    out
}

/// Reads back an exported residual table and counts rows where the inner
/// solver ended above its starting residual.
pub fn check_residual_table(path: &Path) -> Result<ResidualCheck> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut check = ResidualCheck { rows: 0, violations: 0 };
    for row in reader.deserialize::<(usize, usize, f64, f64, usize)>() {
        let (_, _, init, fin, _) = row?;
        check.rows += 1;
        if !(fin <= init) {
            check.violations += 1;
        }
    }
    Ok(check)
}

/// Mean final residual per timestep.
fn residual_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut by_t: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for row in reader.deserialize::<(usize, usize, f64, f64, usize)>() {
        let (_, t, _, fin, _) = row?;
        let e = by_t.entry(t).or_insert((0.0, 0));
        e.0 += fin;
        e.1 += 1;
    }
    Ok(by_t.into_iter().map(|(t, (s, n))| (t as f64, s / n as f64)).collect())
}

struct Out<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Out<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, body).map_err(|e| LabError::io(&p, e))
    }

    fn csv(&mut self, name: &str) -> Result<csv::Writer<std::fs::File>> {
        let p = self.path(name);
        csv::Writer::from_path(&p).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => LabError::io(&p, io),
            other => LabError::Usage(format!("{}: {other:?}", p.display())),
        })
    }
}

fn finish(mut w: csv::Writer<std::fs::File>, dir: &Path) -> Result<()> {
    w.flush().map_err(|e| LabError::io(dir, e))
}

/// Writes per-arm tables, the summary, loss curves and plots for the run in
/// `run_dir` into `out_dir`.
pub fn export_results(manifest: &AttackManifest, run_dir: &Path, out_dir: &Path) -> Result<ExportReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    let mut out = Out {
        dir: out_dir,
        files: Vec::new(),
    };

    for &arm in &manifest.arms {
        let mut w = out.csv(&format!("{arm}.csv"))?;
        w.write_record(["index", "target", "predicted", "hit", "posterior", "recon_error"])?;
        for r in manifest.records_for(arm) {
            w.serialize((r.index, &r.target, &r.predicted, r.hit, r.posterior, r.recon_error))?;
        }
        finish(w, out_dir)?;
    }

    let summary = summarize(manifest);
    let mut w = out.csv("summary.csv")?;
    w.write_record(["arm", "samples", "hits", "asr", "mean_recon_error", "mean_posterior", "failures"])?;
    for r in &summary {
        w.serialize((r.arm.name(), r.samples, r.hits, r.asr, r.mean_recon_error, r.mean_posterior, r.failures))?;
    }
    finish(w, out_dir)?;
    out.text("summary.txt", &summary_table(&summary))?;
    out.text("summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;

    for curve in &manifest.loss_curves {
        let mut w = out.csv(&format!("loss_{}.csv", curve.name))?;
        w.write_record(["epoch", "loss"])?;
        for p in &curve.points {
            w.serialize(p)?;
        }
        finish(w, out_dir)?;
    }
    if !manifest.loss_curves.is_empty() {
        let series: Vec<(String, Vec<(f64, f64)>)> = manifest
            .loss_curves
            .iter()
            .map(|c| (c.name.clone(), c.points.iter().map(|&(e, l)| (e as f64, l)).collect()))
            .collect();
        out.text("loss.svg", &svg::lines("Training loss", "epoch", "mean loss", &series, true))?;
    }

    for &arm in &manifest.arms {
        let recs: Vec<_> = manifest.records_for(arm).collect();
        if recs.len() < 2 {
            continue;
        }
        let latents = AttackManifest::read_artifact(run_dir, &recs[0].regenerated_path)?;
        let vectors: Vec<Vec<f64>> = recs
            .iter()
            .map(|r| {
                latents
                    .get(r.row)
                    .map(|l| l.as_slice().to_vec())
                    .ok_or_else(|| LabError::Manifest(format!("row {} missing in {}", r.row, r.regenerated_path)))
            })
            .collect::<Result<_>>()?;
        let points = pca_2d(&vectors)?;
        let classes: Vec<usize> = recs
            .iter()
            .map(|r| manifest.concepts.iter().position(|c| *c == r.predicted).unwrap_or(0))
            .collect();
        let mut w = out.csv(&format!("pca_{arm}.csv"))?;
        w.write_record(["index", "pc1", "pc2", "predicted"])?;
        for (r, p) in recs.iter().zip(&points) {
            w.serialize((r.index, p[0], p[1], &r.predicted))?;
        }
        finish(w, out_dir)?;
        let title = format!("Regenerated latents, {arm} arm");
        out.text(&format!("scatter_{arm}.svg"), &svg::scatter(&title, &points, &classes, &manifest.concepts))?;
    }

    let mut residual_checks = Vec::new();
    let mut series = Vec::new();
    for table in &manifest.residual_tables {
        let src = run_dir.join(&table.path);
        let copy = out.path(&table.path);
        if src != copy {
            std::fs::copy(&src, &copy).map_err(|e| LabError::io(&src, e))?;
        }
        residual_checks.push((table.arm, check_residual_table(&copy)?));
        series.push((table.arm.name().to_string(), residual_curve(&copy)?));
    }
    if !series.is_empty() {
        out.text(
            "residuals.svg",
            &svg::lines("Mean final residual per step", "t", "residual", &series, true),
        )?;
    }

    Ok(ExportReport {
        files: out.files,
        summary,
        residual_checks,
    })
}
