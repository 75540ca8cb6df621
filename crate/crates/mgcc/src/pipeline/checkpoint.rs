//! Checkpoints: a `manifest.json` naming every tensor (shape, dtype, byte
//! offset) plus one little-endian f32 blob holding parameters and Adam
//! moments. Round trips are bit-exact for f32 training parameters.

use super::adam::OptimizerState;
use super::params::TrainableParams;
use crate::config::ModelConfig;
use crate::error::{MgccError, Result};
use crate::Real;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub optimizer: OptimizerMeta,
    pub tensors: Vec<TensorRecord>,
}

fn write_tensor<F: Real>(blob: &mut Vec<u8>, t: &Array2<F>) {
    for &v in t.iter() {
        blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
}

/// Save parameters and optimizer state under `dir` (created if missing).
pub fn save_checkpoint<F: Real>(
    params: &TrainableParams<F>,
    opt: &OptimizerState<F>,
    model: &ModelConfig,
    dir: &Path,
) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::new();
    let mut blob: Vec<u8> = Vec::new();

    let mut push = |name: String, t: &Array2<F>, blob: &mut Vec<u8>| {
        records.push(TensorRecord {
            name,
            shape: [t.nrows(), t.ncols()],
            dtype: "f32".to_string(),
            offset: blob.len() as u64,
        });
        write_tensor(blob, t);
    };

    let tensors = params.tensors();
    for (name, t) in &tensors {
        push(name.clone(), t, &mut blob);
    }
    for ((name, _), m) in tensors.iter().zip(&opt.m) {
        push(format!("adam.m.{name}"), m, &mut blob);
    }
    for ((name, _), v) in tensors.iter().zip(&opt.v) {
        push(format!("adam.v.{name}"), v, &mut blob);
    }

    let manifest = CheckpointManifest {
        version: 1,
        dtype: "f32".to_string(),
        model: model.clone(),
        optimizer: OptimizerMeta {
            learning_rate: opt.learning_rate,
            beta1: opt.beta1,
            beta2: opt.beta2,
            epsilon: opt.epsilon,
            step: opt.step,
        },
        tensors: records,
    };

    let mut blob_file = std::fs::File::create(dir.join(BLOB_FILE))?;
    blob_file.write_all(&blob)?;
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest_json)?;
    Ok(manifest)
}

fn read_tensor<F: Real>(
    blob: &[u8],
    record: &TensorRecord,
    expected_shape: (usize, usize),
) -> Result<Array2<F>> {
    let name = &record.name;
    if record.dtype != "f32" {
        return Err(MgccError::Checkpoint(format!(
            "tensor {name}: unsupported dtype {:?}",
            record.dtype
        )));
    }
    let shape = (record.shape[0], record.shape[1]);
    if shape != expected_shape {
        return Err(MgccError::Checkpoint(format!(
            "tensor {name}: manifest shape {:?} does not match configured shape {:?}",
            shape, expected_shape
        )));
    }
    let start = record.offset as usize;
    let bytes = shape.0 * shape.1 * 4;
    let end = start + bytes;
    if end > blob.len() {
        return Err(MgccError::Checkpoint(format!(
            "tensor {name}: blob truncated (needs bytes {start}..{end}, blob has {})",
            blob.len()
        )));
    }
    let mut data = Vec::with_capacity(shape.0 * shape.1);
    for chunk in blob[start..end].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        data.push(F::from_f64(v as f64));
    }
    Ok(Array2::from_shape_vec(shape, data).expect("shape matches data"))
}

/// Load a checkpoint saved by [`save_checkpoint`]. Parameter shapes come
/// from the manifest's config snapshot; mismatches and truncation are
/// reported with the offending tensor's name.
pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<(TrainableParams<F>, OptimizerState<F>)> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| MgccError::Checkpoint(format!("reading manifest: {e}")))?;
    let manifest: CheckpointManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| MgccError::Checkpoint(format!("parsing manifest: {e}")))?;
    if manifest.version != 1 {
        return Err(MgccError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let mut blob = Vec::new();
    std::fs::File::open(dir.join(BLOB_FILE))
        .map_err(|e| MgccError::Checkpoint(format!("opening blob: {e}")))?
        .read_to_end(&mut blob)?;

    let by_name: std::collections::HashMap<&str, &TensorRecord> = manifest
        .tensors
        .iter()
        .map(|r| (r.name.as_str(), r))
        .collect();
    let lookup = |name: &str| -> Result<&TensorRecord> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| MgccError::Checkpoint(format!("tensor {name} missing from manifest")))
    };

    let mut params = TrainableParams::<F>::init(&manifest.model, 0);
    for (name, tensor) in params.tensors_mut() {
        let record = lookup(&name)?;
        *tensor = read_tensor(&blob, record, tensor.dim())?;
    }

    let train_cfg = crate::config::TrainConfig {
        learning_rate: manifest.optimizer.learning_rate,
        beta1: manifest.optimizer.beta1,
        beta2: manifest.optimizer.beta2,
        epsilon: manifest.optimizer.epsilon,
        ..Default::default()
    };
    let mut opt = OptimizerState::new(&params, &train_cfg);
    opt.step = manifest.optimizer.step;
    for (idx, (name, tensor)) in params.tensors().iter().enumerate() {
        let m_rec = lookup(&format!("adam.m.{name}"))?;
        opt.m[idx] = read_tensor(&blob, m_rec, tensor.dim())?;
        let v_rec = lookup(&format!("adam.v.{name}"))?;
        opt.v[idx] = read_tensor(&blob, v_rec, tensor.dim())?;
    }
    Ok((params, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{MgccConfig, TrainConfig};

    fn small_model() -> ModelConfig {
        let mut m = MgccConfig::default().model;
        m.e = 8;
        m.d = 4;
        m.mapper_width = 8;
        m.mapper_heads = 2;
        m.cmrm_layers = 2;
        m.cmrm_proj_width = 8;
        m.queries = 2;
        m.conditioning_width = 4;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = small_model();
        let params = TrainableParams::<f32>::init(&model, 77);
        let mut opt = OptimizerState::new(&params, &TrainConfig::default());
        opt.step = 42;
        // Dirty the moments so the round trip covers nonzero state.
        for m in &mut opt.m {
            m.fill(0.25);
        }
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, &opt, &model, dir.path()).unwrap();
        let (loaded_params, loaded_opt) = load_checkpoint::<f32>(dir.path()).unwrap();
        for ((na, a), (nb, b)) in params.tensors().iter().zip(loaded_params.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b, "{na} must round trip bit-exactly");
        }
        assert_eq!(loaded_opt.step, 42);
        assert_eq!(opt.m, loaded_opt.m);
        assert_eq!(opt.v, loaded_opt.v);
        assert_eq!(opt.learning_rate, loaded_opt.learning_rate);
    }

    #[test]
    fn manifest_counts_params_and_both_moment_sets() {
        let model = small_model();
        let params = TrainableParams::<f32>::init(&model, 77);
        let opt = OptimizerState::new(&params, &TrainConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_checkpoint(&params, &opt, &model, dir.path()).unwrap();
        assert_eq!(manifest.tensors.len(), params.tensor_count() * 3);
        // The five groups are all present by name.
        let names: Vec<&str> = manifest.tensors.iter().map(|r| r.name.as_str()).collect();
        for expected in ["h_cap", "emd", "cmrm.layer0.proj_q_I", "mapper.in_adapter.w", "queries"]
        {
            assert!(names.contains(&expected), "{expected} missing");
        }
    }

    #[test]
    fn truncated_blob_names_the_tensor() {
        let model = small_model();
        let params = TrainableParams::<f32>::init(&model, 77);
        let opt = OptimizerState::new(&params, &TrainConfig::default());
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, &opt, &model, dir.path()).unwrap();
        let blob_path = dir.path().join(BLOB_FILE);
        let blob = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &blob[..blob.len() / 2]).unwrap();
        match load_checkpoint::<f32>(dir.path()) {
            Err(MgccError::Checkpoint(msg)) => {
                assert!(msg.contains("truncated"), "got: {msg}");
                assert!(msg.contains("tensor "), "must name the tensor: {msg}");
            }
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_names_the_tensor() {
        let model = small_model();
        let params = TrainableParams::<f32>::init(&model, 77);
        let opt = OptimizerState::new(&params, &TrainConfig::default());
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&params, &opt, &model, dir.path()).unwrap();
        let manifest_path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        let mut manifest: CheckpointManifest = serde_json::from_str(&text).unwrap();
        manifest.tensors.retain(|r| r.name != "queries");
        std::fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
        match load_checkpoint::<f32>(dir.path()) {
            Err(MgccError::Checkpoint(msg)) => assert!(msg.contains("queries")),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }
}
