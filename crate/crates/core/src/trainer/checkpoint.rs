//! Checkpoint directories: `manifest.json` plus one little-endian `f32`
//! blob per named array. Written to a sibling `.partial` directory and
//! renamed into place.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use bapgan_autograd::{AdamMoments, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{StepRecord, TrainConfig, TrainState};
use crate::model::{ModelParams, SpectralState};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    config: TrainConfig,
    step: u64,
    prior_rng: ChaCha8Rng,
    arrays: Vec<ArrayEntry>,
    history: Vec<StepRecord>,
}

fn err(dir: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", dir.display()))
}

fn blob_name(name: &str) -> String {
    format!("{}.f32", name.replace(['/', '\\'], "_"))
}

/// Save `state` (with the config that produced it) into `dir`, replacing
/// any previous checkpoint there.
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, dir: &Path) -> Result<()> {
    let mut partial = dir.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;

    let mut arrays = Vec::new();
    let mut write = |name: String, shape: Vec<usize>, data: &[f32]| -> Result<()> {
        let file = blob_name(&name);
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = partial.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        arrays.push(ArrayEntry {
            name,
            file,
            shape,
            len: data.len(),
        });
        Ok(())
    };
    for (name, t) in &state.params.tensors {
        write(format!("param.{name}"), t.shape().to_vec(), t.data())?;
    }
    for (name, m) in &state.moments {
        write(format!("adam_m.{name}"), vec![m.m.len()], &m.m)?;
        write(format!("adam_v.{name}"), vec![m.v.len()], &m.v)?;
    }
    for (name, s) in &state.params.spectral {
        write(format!("sn_u.{name}"), vec![s.u.len()], &s.u)?;
        write(format!("sn_v.{name}"), vec![s.v.len()], &s.v)?;
    }
    let mut config = config.clone();
    config.model = state.params.config.clone();
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config,
        step: state.step,
        prior_rng: state.prior_rng.clone(),
        arrays,
        history: state.history.iter().cloned().collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| err(dir, e))?;
    let mpath = partial.join(MANIFEST);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&partial, dir).map_err(|e| Error::io(dir, e))
}

/// Load a checkpoint and the training configuration stored with it.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, TrainConfig)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read(&mpath).map_err(|e| err(dir, format!("cannot read {MANIFEST}: {e}")))?;
    let version: serde_json::Value = serde_json::from_slice(&text).map_err(|e| err(dir, format!("corrupt {MANIFEST}: {e}")))?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(err(
                dir,
                format!("incompatible checkpoint format version {v} (this build reads version {CHECKPOINT_FORMAT_VERSION})"),
            ))
        }
        None => return Err(err(dir, "manifest has no format_version")),
    }
    let manifest: CheckpointManifest =
        serde_json::from_value(version).map_err(|e| err(dir, format!("corrupt {MANIFEST}: {e}")))?;

    let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for a in &manifest.arrays {
        let path = dir.join(&a.file);
        let bytes = fs::read(&path).map_err(|e| err(dir, format!("blob {} ({}): {e}", a.name, a.file)))?;
        if bytes.len() != a.len * 4 || a.shape.iter().product::<usize>() != a.len {
            return Err(err(
                dir,
                format!("blob {} ({}) holds {} bytes, manifest declares {} values", a.name, a.file, bytes.len(), a.len),
            ));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        arrays.insert(a.name.clone(), (a.shape.clone(), data));
    }
    let mut take = |name: String| arrays.remove(&name).ok_or_else(|| err(dir, format!("missing array {name}")));

    let config = manifest.config;
    let model = config.model.clone();
    let template = crate::model::init_params::<f32>(&model, 0)?;
    let mut tensors = BTreeMap::new();
    let mut moments = BTreeMap::new();
    for (name, t) in &template.tensors {
        let (shape, data) = take(format!("param.{name}"))?;
        if shape != t.shape() {
            return Err(err(dir, format!("array param.{name} has shape {shape:?}, model expects {:?}", t.shape())));
        }
        tensors.insert(name.clone(), Tensor::new(shape, data)?);
        let (_, m) = take(format!("adam_m.{name}"))?;
        let (_, v) = take(format!("adam_v.{name}"))?;
        if m.len() != t.len() || v.len() != t.len() {
            return Err(err(dir, format!("optimizer moments of {name} have the wrong length")));
        }
        moments.insert(name.clone(), AdamMoments { m, v });
    }
    let mut spectral = BTreeMap::new();
    for name in template.spectral.keys() {
        let (_, u) = take(format!("sn_u.{name}"))?;
        let (_, v) = take(format!("sn_v.{name}"))?;
        spectral.insert(name.clone(), SpectralState { u, v });
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(err(dir, format!("unexpected array {extra}")));
    }
    let state = TrainState {
        params: ModelParams {
            config: model,
            tensors,
            spectral,
        },
        moments,
        step: manifest.step,
        prior_rng: manifest.prior_rng,
        history: VecDeque::from(manifest.history),
    };
    Ok((state, config))
}
