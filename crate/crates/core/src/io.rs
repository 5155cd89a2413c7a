//! Latent dumps and trajectory tables.
//!
//! Binary layout, little endian:
//!
//! ```text
//! magic   8 bytes  "TINALAT\0"
//! version u32
//! rows    u64
//! dim     u64
//! values  rows * dim f64
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::sampler::Trajectory;

pub const LATENT_MAGIC: &[u8; 8] = b"TINALAT\0";
pub const LATENT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8;

pub fn encode_latents(latents: &[Latent]) -> Result<Vec<u8>> {
    let dim = latents.first().map_or(0, Latent::dim);
    if latents.iter().any(|l| l.dim() != dim) {
        return Err(Error::Input("latents in one dump must share a dimension".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * dim * latents.len());
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    out.extend_from_slice(&(latents.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for v in latents.iter().flat_map(|l| l.as_slice()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("eight bytes"))
}

pub fn decode_latents(bytes: &[u8]) -> Result<Vec<Latent>> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != LATENT_MAGIC {
        return Err(Error::Format("not a latent dump".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if version != LATENT_VERSION {
        return Err(Error::Format(format!("unsupported latent dump version {version}")));
    }
    let rows = read_u64(bytes, 12) as usize;
    let dim = read_u64(bytes, 20) as usize;
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(Error::Format(format!(
            "latent dump length {} does not match {rows} x {dim}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    if dim == 0 {
        return Ok(vec![Latent::zeros(0); rows]);
    }
    values.chunks(dim).map(|c| Latent::new(c.to_vec())).collect()
}

pub fn write_latents(path: impl AsRef<Path>, latents: &[Latent]) -> Result<()> {
    std::fs::write(path, encode_latents(latents)?)?;
    Ok(())
}

pub fn read_latents(path: impl AsRef<Path>) -> Result<Vec<Latent>> {
    decode_latents(&std::fs::read(path)?)
}

/// Writes `step,z0,z1,...` rows ordered as stored in the trajectory.
pub fn write_trajectory_csv<W: Write>(mut out: W, trajectory: &Trajectory) -> Result<()> {
    let dim = trajectory.latents.first().map_or(0, Latent::dim);
    let header: Vec<String> = std::iter::once("step".to_string())
        .chain((0..dim).map(|i| format!("z{i}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    let n = trajectory.num_steps();
    for (i, z) in trajectory.latents.iter().enumerate() {
        let step = match trajectory.direction {
            crate::sampler::Direction::Inversion => i,
            crate::sampler::Direction::Generation => n - i,
        };
        let row: Vec<String> = std::iter::once(step.to_string())
            .chain(z.as_slice().iter().map(|v| v.to_string()))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
