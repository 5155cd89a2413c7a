//! Experiment runner for text-free inversion attacks on erased toy models.
//!
//! A run draws targets from the original model, inverts each one on the
//! erased model under every configured arm, regenerates from the recovered
//! noise with the null condition, and scores the result with the Bayes
//! classifier of the data mixture.

pub mod config;
pub mod error;
pub mod export;
pub mod manifest;
pub mod pipeline;
pub mod presets;
pub mod svg;

pub use config::{load, parse_config, parse_config_with, ExperimentConfig, Overrides};
pub use error::{ErrorClass, LabError, Result};
pub use export::{export_results, ExportReport, SummaryRow};
pub use manifest::{save_run, AttackManifest};
pub use pipeline::{prepare_models, run_attack, run_attack_with, AttackRun, Models};
