//! Checkpoint persistence. A checkpoint directory holds:
//!
//!   manifest.json      model config, ablation flags, and the ordered
//!                      parameter table {name, shape, offset}
//!   weights.bin        parameter values, little-endian f64, in
//!                      registration order
//!   a_pre.bin          the predefined adjacency, same encoding
//!   optimizer.bin      Adam first moments then second moments (only
//!                      when a training session is saved)
//!   best_weights.bin   best-validation parameters (only when present)
//!   train_state.json   step counter, epoch cursor, early-stop state,
//!                      and the full history
//!
//! Everything numeric round-trips bit-exactly: binary blobs copy the
//! f64 bit patterns, and the JSON floats use shortest-round-trip
//! encoding.

use crate::error::{IbnError, Result};
use crate::model::{AblationFlags, ForecastModel, ModelConfig};
use crate::optim::AdamState;
use crate::params::ParamId;
use crate::tensor::Tensor;
use crate::train::{EpochRecord, TrainSession};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into weights.bin.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    ablation: AblationFlags,
    a_pre_shape: Vec<usize>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct TrainStateFile {
    adam_t: u64,
    next_epoch: usize,
    /// None encodes "no epoch finished yet" (JSON cannot carry infinity).
    best_val: Option<f64>,
    stale: usize,
    stopped: bool,
    has_best: bool,
    history: Vec<EpochRecord>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| IbnError::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| IbnError::io(path.display().to_string(), e))
}

fn tensors_to_bytes<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn tensor_from_bytes(path: &Path, bytes: &[u8], offset: usize, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let end = offset + numel * 8;
    if end > bytes.len() {
        return Err(IbnError::invalid(format!(
            "{} is truncated: need {end} bytes, have {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[offset..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks are 8 bytes")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Write the model (and optionally a training session) under `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &ForecastModel,
    session: Option<&TrainSession>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| IbnError::io(dir.display().to_string(), e))?;
    let mut params = Vec::with_capacity(model.store.len());
    let mut offset = 0u64;
    for (_, name, value) in model.store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset,
        });
        offset += (value.numel() * 8) as u64;
    }
    let manifest = Manifest {
        model: model.cfg,
        ablation: model.ablation,
        a_pre_shape: model.a_pre.shape().to_vec(),
        params,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| IbnError::invalid(format!("manifest serialization failed: {e}")))?;
    write_file(&dir.join("manifest.json"), manifest_json.as_bytes())?;
    write_file(
        &dir.join("weights.bin"),
        &tensors_to_bytes(model.store.iter().map(|(_, _, v)| v)),
    )?;
    write_file(
        &dir.join("a_pre.bin"),
        &tensors_to_bytes(std::iter::once(&model.a_pre)),
    )?;

    if let Some(s) = session {
        let moments = tensors_to_bytes(s.adam.m.iter().chain(s.adam.v.iter()));
        write_file(&dir.join("optimizer.bin"), &moments)?;
        if let Some(best) = &s.best_params {
            write_file(&dir.join("best_weights.bin"), &tensors_to_bytes(best.iter()))?;
        }
        let state = TrainStateFile {
            adam_t: s.adam.t,
            next_epoch: s.next_epoch,
            best_val: s.best_val,
            stale: s.stale,
            stopped: s.stopped,
            has_best: s.best_params.is_some(),
            history: s.history.clone(),
        };
        let state_json = serde_json::to_string_pretty(&state)
            .map_err(|e| IbnError::invalid(format!("train state serialization failed: {e}")))?;
        write_file(&dir.join("train_state.json"), state_json.as_bytes())?;
    }
    Ok(())
}

/// Rebuild the model (and the training session, when one was saved)
/// from `dir`.
pub fn load_checkpoint(dir: &Path) -> Result<(ForecastModel, Option<TrainSession>)> {
    let manifest_path = dir.join("manifest.json");
    let manifest_bytes = read_file(&manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes).map_err(|e| {
        IbnError::invalid(format!("{} is not a valid manifest: {e}", manifest_path.display()))
    })?;

    let a_pre_bytes = read_file(&dir.join("a_pre.bin"))?;
    let a_pre = tensor_from_bytes(&dir.join("a_pre.bin"), &a_pre_bytes, 0, &manifest.a_pre_shape)?;

    // seed 0 initializes throwaway values; every parameter is overwritten
    let mut model = ForecastModel::new(manifest.model, manifest.ablation, a_pre, 0)?;
    if model.store.len() != manifest.params.len() {
        return Err(IbnError::invalid(format!(
            "checkpoint lists {} parameters but the model registers {}",
            manifest.params.len(),
            model.store.len()
        )));
    }
    let weights_path = dir.join("weights.bin");
    let weights = read_file(&weights_path)?;
    for (i, entry) in manifest.params.iter().enumerate() {
        let id = ParamId(i);
        if model.store.name(id) != entry.name {
            return Err(IbnError::invalid(format!(
                "checkpoint parameter {i} is {:?} but the model registers {:?}",
                entry.name,
                model.store.name(id)
            )));
        }
        let value = tensor_from_bytes(&weights_path, &weights, entry.offset as usize, &entry.shape)?;
        model.store.set_value(id, value)?;
    }

    let state_path = dir.join("train_state.json");
    let session = if state_path.exists() {
        let state_bytes = read_file(&state_path)?;
        let state: TrainStateFile = serde_json::from_slice(&state_bytes).map_err(|e| {
            IbnError::invalid(format!("{} is not a valid train state: {e}", state_path.display()))
        })?;
        let opt_path = dir.join("optimizer.bin");
        let opt_bytes = read_file(&opt_path)?;
        let mut m = Vec::with_capacity(manifest.params.len());
        let mut v = Vec::with_capacity(manifest.params.len());
        let mut offset = 0usize;
        for entry in &manifest.params {
            m.push(tensor_from_bytes(&opt_path, &opt_bytes, offset, &entry.shape)?);
            offset += entry.shape.iter().product::<usize>() * 8;
        }
        for entry in &manifest.params {
            v.push(tensor_from_bytes(&opt_path, &opt_bytes, offset, &entry.shape)?);
            offset += entry.shape.iter().product::<usize>() * 8;
        }
        let best_params = if state.has_best {
            let best_path = dir.join("best_weights.bin");
            let best_bytes = read_file(&best_path)?;
            let mut best = Vec::with_capacity(manifest.params.len());
            let mut boff = 0usize;
            for entry in &manifest.params {
                best.push(tensor_from_bytes(&best_path, &best_bytes, boff, &entry.shape)?);
                boff += entry.shape.iter().product::<usize>() * 8;
            }
            Some(best)
        } else {
            None
        };
        Some(TrainSession {
            adam: AdamState {
                m,
                v,
                t: state.adam_t,
            },
            next_epoch: state.next_epoch,
            best_val: state.best_val,
            stale: state.stale,
            best_params,
            history: state.history,
            stopped: state.stopped,
        })
    } else {
        None
    };
    Ok((model, session))
}
