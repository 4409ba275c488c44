//! Checkpoints: `manifest.json`, one raw little-endian `f64` array per
//! tensor, and `scales.json` holding the frozen scale registry.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::optim::{Moments, Optimizer};
use crate::error::{Error, Result};
use crate::rescale::ScaleRegistry;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const SCALES: &str = "scales.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    id: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MomentEntry {
    id: String,
    first: ArrayEntry,
    second: ArrayEntry,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: u64,
    optimizer_step: u64,
    params: Vec<ArrayEntry>,
    moments: Vec<MomentEntry>,
    scales: String,
}

fn file_name(id: &str, suffix: &str) -> String {
    let clean: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect();
    format!("{clean}{suffix}.bin")
}

fn write_array(dir: &Path, id: &str, suffix: &str, t: &Tensor) -> Result<ArrayEntry> {
    let file = file_name(id, suffix);
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(&file), bytes)?;
    Ok(ArrayEntry { id: id.to_owned(), shape: t.shape().to_vec(), file })
}

fn read_array(dir: &Path, e: &ArrayEntry) -> Result<Tensor> {
    let bytes = fs::read(dir.join(&e.file))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Shape(format!("{}: truncated array", e.file)));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(e.shape.clone(), data)
}

/// Writes a checkpoint for `net` and `opt` taken after `step` training steps.
pub fn save(dir: &Path, net: &Network, opt: &Optimizer, step: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = net.params().map(|p| write_array(dir, &p.id, "", &p.w)).collect::<Result<Vec<_>>>()?;
    let moments = opt
        .moments
        .iter()
        .map(|(id, m)| {
            Ok(MomentEntry {
                id: id.clone(),
                first: write_array(dir, id, ".m1", &m.first)?,
                second: write_array(dir, id, ".m2", &m.second)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    net.registry().save(&dir.join(SCALES))?;
    let manifest =
        Manifest { format: "f64-le".into(), step, optimizer_step: opt.step, params, moments, scales: SCALES.into() };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Restores parameters, optimizer moments and scales into an identically
/// configured network; returns the saved step.
pub fn load(dir: &Path, net: &mut Network, opt: &mut Optimizer) -> Result<u64> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format != "f64-le" {
        return Err(Error::Config(format!("unsupported array format `{}`", manifest.format)));
    }
    let ids: Vec<String> = net.params().map(|p| p.id.clone()).collect();
    let saved: Vec<&str> = manifest.params.iter().map(|e| e.id.as_str()).collect();
    if ids != saved {
        return Err(Error::Config("checkpoint parameters do not match the network".into()));
    }
    let values = manifest.params.iter().map(|e| read_array(dir, e)).collect::<Result<Vec<_>>>()?;
    net.set_param_values(&values)?;
    let recipe = net.linears.first().map(|l| l.prune.rescale).unwrap_or_default();
    net.set_registry(Arc::new(ScaleRegistry::load(&dir.join(&manifest.scales), recipe)?));
    opt.step = manifest.optimizer_step;
    opt.moments = manifest
        .moments
        .iter()
        .map(|m| Ok((m.id.clone(), Moments { first: read_array(dir, &m.first)?, second: read_array(dir, &m.second)? })))
        .collect::<Result<_>>()?;
    Ok(manifest.step)
}
