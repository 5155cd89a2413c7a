//! JSON model files.
//!
//! Floats are written in shortest round-trip form, so save -> load -> save is
//! byte-identical.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::mlp::DenseLayer;
use super::{erase, Denoiser, GaussianMixtureDenoiser, MixtureComponent, MlpDenoiser, SkipPath};
use crate::error::{Error, Result};
use crate::latent::ConceptTable;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub model: ModelSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Mixture {
        concepts: Vec<String>,
        components: Vec<MixtureComponent>,
        concept_components: Vec<Vec<usize>>,
    },
    Mlp {
        concepts: Vec<String>,
        dim: usize,
        num_steps: usize,
        activation: String,
        layers: Vec<MatrixRecord>,
        embeddings: MatrixRecord,
        skip: Option<SkipRecord>,
    },
    Erased {
        erased: Vec<String>,
        base: Box<ModelSpec>,
    },
}

/// Dense matrix plus optional bias, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub variance: f64,
    pub coefficients: Vec<f64>,
}

const ACTIVATION: &str = "tanh";

impl MatrixRecord {
    fn from_array(a: &Array2<f64>, bias: Option<&Array1<f64>>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
            bias: bias.map(|b| b.to_vec()),
        }
    }

    fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::Format(format!("matrix shape {}x{}: {e}", self.rows, self.cols)))
    }
}

impl ModelFile {
    pub fn new(model: ModelSpec) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model,
        }
    }

    pub fn from_mixture(m: &GaussianMixtureDenoiser) -> Self {
        Self::new(ModelSpec::Mixture {
            concepts: m.concepts().names().to_vec(),
            components: m.components().to_vec(),
            concept_components: m.concept_components().to_vec(),
        })
    }

    pub fn from_mlp(m: &MlpDenoiser) -> Self {
        Self::new(ModelSpec::Mlp {
            concepts: m.concepts().names().to_vec(),
            dim: m.dim(),
            num_steps: m.num_steps(),
            activation: ACTIVATION.to_string(),
            layers: m
                .layers()
                .iter()
                .map(|l| MatrixRecord::from_array(&l.weights, Some(&l.bias)))
                .collect(),
            embeddings: MatrixRecord::from_array(m.embeddings(), None),
            skip: m.skip().map(|s| SkipRecord {
                variance: s.variance,
                coefficients: s.coefficients.clone(),
            }),
        })
    }

    /// A remap-erased wrapper around `base`.
    pub fn erased(base: ModelFile, names: &[&str]) -> Self {
        Self::new(ModelSpec::Erased {
            erased: names.iter().map(|s| s.to_string()).collect(),
            base: Box::new(base.model),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)?;
        if f.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {} (expected {FORMAT_VERSION})",
                f.format_version
            )));
        }
        Ok(f)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The mixture inside this file, looking through erasure wrappers.
    pub fn mixture(&self) -> Result<GaussianMixtureDenoiser> {
        match self.model.innermost() {
            ModelSpec::Mixture {
                concepts,
                components,
                concept_components,
            } => GaussianMixtureDenoiser::new(
                components.clone(),
                ConceptTable::new(concepts.iter().cloned())?,
                concept_components.clone(),
            ),
            _ => Err(Error::Format("model file does not hold a mixture".into())),
        }
    }

    /// The network inside this file, looking through erasure wrappers.
    pub fn mlp(&self) -> Result<MlpDenoiser> {
        match self.model.innermost() {
            ModelSpec::Mlp {
                concepts,
                dim,
                num_steps,
                activation,
                layers,
                embeddings,
                skip,
            } => {
                if activation != ACTIVATION {
                    return Err(Error::Format(format!("unsupported activation {activation:?}")));
                }
                let layers = layers
                    .iter()
                    .map(|r| {
                        let bias = r
                            .bias
                            .clone()
                            .ok_or_else(|| Error::Format("layer without bias".into()))?;
                        Ok(DenseLayer {
                            weights: r.to_array()?,
                            bias: Array1::from(bias),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                MlpDenoiser::from_parts(
                    *dim,
                    *num_steps,
                    layers,
                    embeddings.to_array()?,
                    skip.as_ref().map(|s| SkipPath {
                        variance: s.variance,
                        coefficients: s.coefficients.clone(),
                    }),
                    ConceptTable::new(concepts.iter().cloned())?,
                )
            }
            _ => Err(Error::Format("model file does not hold a network".into())),
        }
    }

    /// Builds the described denoiser, including any erasure wrappers.
    pub fn build(&self) -> Result<Box<dyn Denoiser>> {
        build_spec(self, &self.model)
    }
}

fn build_spec(file: &ModelFile, spec: &ModelSpec) -> Result<Box<dyn Denoiser>> {
    Ok(match spec {
        ModelSpec::Mixture { .. } => Box::new(file.mixture()?),
        ModelSpec::Mlp { .. } => Box::new(file.mlp()?),
        ModelSpec::Erased { erased, base } => {
            let names: Vec<&str> = erased.iter().map(String::as_str).collect();
            Box::new(erase(build_spec(file, base)?, &names)?)
        }
    })
}

impl ModelSpec {
    fn innermost(&self) -> &ModelSpec {
        match self {
            ModelSpec::Erased { base, .. } => base.innermost(),
            other => other,
        }
    }
}
