//! Bundled synthetic concept mixtures.

use tina_core::{GaussianMixtureDenoiser, Latent, Result};

pub const PRESETS: [&str; 2] = ["four-concept", "two-concept"];

/// Per-coordinate standard deviation shared by all preset components.
pub const PRESET_SIGMA: f64 = 0.05;

fn unit(dim: usize, i: usize) -> Latent {
    let mut v = Latent::zeros(dim);
    v.as_mut_slice()[i] = 1.0;
    v
}

/// Four concepts in 16 dimensions. `A` is rare and sits `6 sigma` from the
/// common concept `B`; every pair of means is at least that far apart.
pub fn four_concept() -> Result<GaussianMixtureDenoiser> {
    let d = 16;
    let mut a = unit(d, 0);
    a.as_mut_slice()[3] = 6.0 * PRESET_SIGMA;
    let common = 0.98 / 3.0;
    GaussianMixtureDenoiser::one_per_concept(
        &["A", "B", "C", "D"],
        &[0.02, common, common, common],
        vec![a, unit(d, 0), unit(d, 1), unit(d, 2)],
        PRESET_SIGMA * PRESET_SIGMA,
    )
}

/// Two equally likely, well separated concepts in 8 dimensions.
pub fn two_concept() -> Result<GaussianMixtureDenoiser> {
    GaussianMixtureDenoiser::one_per_concept(
        &["A", "B"],
        &[0.5, 0.5],
        vec![unit(8, 0), unit(8, 1)],
        PRESET_SIGMA * PRESET_SIGMA,
    )
}

pub fn by_name(name: &str) -> Option<Result<GaussianMixtureDenoiser>> {
    match name {
        "four-concept" => Some(four_concept()),
        "two-concept" => Some(two_concept()),
        _ => None,
    }
}
