//! Binary checkpoint container.
//!
//! ```text
//! b"RDRECKPT" | u32 version | u64 manifest_len | manifest JSON | f32 LE payloads | u32 CRC32
//! ```
//!
//! The CRC covers every byte before it. Tensor offsets in the manifest are
//! relative to the start of the payload section and counted in floats.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::matrix::Matrix;
use super::transformer::Seq2Seq;
use super::ModelError;

pub const MAGIC: &[u8; 8] = b"RDRECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: u32,
    pub val_loss: f64,
    #[serde(default)]
    pub vocab_fingerprint: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, model: &Seq2Seq<f32>, meta: &CheckpointMeta) -> Result<(), ModelError> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (_, name, m) in model.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
            len: m.data().len(),
        });
        offset += m.data().len();
    }
    let manifest = Manifest {
        config: model.config().clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| ModelError::Checkpoint(e.to_string()))?;

    let mut buf = Vec::with_capacity(24 + json.len() + 4 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, m) in model.params().iter() {
        for x in m.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint. With `expected` set, a checkpoint for any other
/// architecture is rejected before tensors are materialised.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(Seq2Seq<f32>, CheckpointMeta), ModelError> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    if bytes.len() < 8 + 4 + 8 + 4 {
        return Err(ModelError::Checksum);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(ModelError::Checksum);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let json_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let json_end = 20usize
        .checked_add(json_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| ModelError::Checkpoint("manifest length out of range".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&body[20..json_end]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if let Some(cfg) = expected {
        if *cfg != manifest.config {
            return Err(ModelError::ConfigMismatch(format!(
                "file has {:?}, caller expects {:?}",
                manifest.config, cfg
            )));
        }
    }
    let payload = &body[json_end..];
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if payload.len() != 4 * total {
        return Err(ModelError::Checkpoint(format!(
            "payload holds {} bytes, manifest describes {}",
            payload.len(),
            4 * total
        )));
    }
    let mut tensors = std::collections::HashMap::new();
    for t in &manifest.tensors {
        if t.rows * t.cols != t.len || t.offset + t.len > total {
            return Err(ModelError::Checkpoint(format!("bad tensor entry {}", t.name)));
        }
        let data: Vec<f32> = payload[4 * t.offset..4 * (t.offset + t.len)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, data));
    }
    let n_tensors = tensors.len();
    let model = Seq2Seq::from_tensors(manifest.config, |name| tensors.remove(name))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if model.params().len() != n_tensors {
        return Err(ModelError::Checkpoint("checkpoint holds unknown tensors".into()));
    }
    Ok((model, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 8,
            vocab_size: 20,
            max_seq_len: 16,
            n_prompt_per_task: 3,
            n_tasks: 5,
            whole_word_capacity: 4,
            init_std: 0.5,
        }
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            step: 12,
            epoch: 3,
            val_loss: 1.25,
            vocab_fingerprint: Some("abc".into()),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Seq2Seq::<f32>::new(small(), 9).unwrap();
        save_checkpoint(&path, &model, &meta()).unwrap();
        let (back, m) = load_checkpoint(&path, Some(&small())).unwrap();
        assert_eq!(m, meta());
        for ((_, na, a), (_, nb, b)) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            let bits_a: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncation_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Seq2Seq::<f32>::new(small(), 9).unwrap();
        save_checkpoint(&path, &model, &meta()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 17]).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(ModelError::Checksum)));
    }

    #[test]
    fn other_config_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Seq2Seq::<f32>::new(small(), 9).unwrap();
        save_checkpoint(&path, &model, &meta()).unwrap();
        let mut b = small();
        b.d_ff = 16;
        assert!(matches!(load_checkpoint(&path, Some(&b)), Err(ModelError::ConfigMismatch(_))));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Seq2Seq::<f32>::new(small(), 9).unwrap();
        save_checkpoint(&path, &model, &meta()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(ModelError::VersionMismatch { found: 2, expected: 1 })
        ));
    }
}
