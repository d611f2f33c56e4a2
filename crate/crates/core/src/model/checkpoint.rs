//! Checkpoint file: one JSON manifest line `{config, params: [{name, shape}]}`
//! followed by the raw little-endian `f32` values in manifest order. Adam
//! moments are stored as extra entries named `adam.m.<param>` and
//! `adam.v.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ManifestConfig {
    model: ModelConfig,
    /// Adam step count per parameter.
    adam_steps: BTreeMap<String, u64>,
    /// Caller-supplied context such as the vocabulary and class list.
    meta: Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ManifestConfig,
    params: Vec<Entry>,
}

/// A model together with the metadata saved next to it.
pub struct Checkpoint {
    pub model: Model,
    pub meta: Value,
}

pub fn write_checkpoint(model: &Model, meta: &Value) -> Result<Vec<u8>> {
    let mut params = Vec::new();
    let mut body: Vec<u8> = Vec::with_capacity(model.store.num_values() * 12);
    let mut adam_steps = BTreeMap::new();
    let mut push = |name: String, shape: &[usize], values: &[f32], body: &mut Vec<u8>| {
        params.push(Entry { name, shape: shape.to_vec() });
        for v in values {
            body.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in model.store.iter() {
        push(p.name.clone(), p.value.shape(), p.value.data(), &mut body);
    }
    for p in model.store.iter() {
        push(format!("adam.m.{}", p.name), p.value.shape(), &p.adam_m, &mut body);
        push(format!("adam.v.{}", p.name), p.value.shape(), &p.adam_v, &mut body);
        adam_steps.insert(p.name.clone(), p.step);
    }
    let manifest = Manifest { config: ManifestConfig { model: model.config.clone(), adam_steps, meta: meta.clone() }, params };
    let mut out = serde_json::to_vec(&manifest).map_err(|e| Error::Validation(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Load("checkpoint has no manifest line".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Load(format!("checkpoint manifest: {e}")))?;
    let mut model = Model::new(manifest.config.model)?;
    let mut body = &bytes[nl + 1..];
    let mut seen = 0usize;
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        if body.len() < 4 * n {
            return Err(Error::Load(format!("checkpoint truncated at {}", entry.name)));
        }
        let values: Vec<f32> =
            body[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        body = &body[4 * n..];
        let (base, slot) = if let Some(b) = entry.name.strip_prefix("adam.m.") {
            (b, 1)
        } else if let Some(b) = entry.name.strip_prefix("adam.v.") {
            (b, 2)
        } else {
            (entry.name.as_str(), 0)
        };
        let id = model.store.id(base).ok_or_else(|| Error::Load(format!("unknown parameter {}", entry.name)))?;
        let p = model.store.get_mut(id);
        if p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Load(format!("{}: shape {:?} does not match {:?}", entry.name, entry.shape, p.value.shape())));
        }
        match slot {
            0 => {
                p.value.data_mut().copy_from_slice(&values);
                seen += 1;
            }
            1 => p.adam_m = values,
            _ => p.adam_v = values,
        }
    }
    if seen != model.store.len() {
        return Err(Error::Load(format!("checkpoint holds {seen} of {} parameters", model.store.len())));
    }
    if !body.is_empty() {
        return Err(Error::Load(format!("{} trailing bytes after parameters", body.len())));
    }
    for (name, step) in &manifest.config.adam_steps {
        if let Some(id) = model.store.id(name) {
            model.store.get_mut(id).step = *step;
        }
    }
    Ok(Checkpoint { model, meta: manifest.config.meta })
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &Value) -> Result<()> {
    fs::write(path, write_checkpoint(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}
