//! Parameter blobs with a JSON sidecar.
//!
//! Blob layout, little endian: magic `CARDCKPT`, `u32` version, `u32` tensor
//! count, then per tensor `u32` name length, UTF-8 name, `u64` rows, `u64`
//! cols and `rows·cols` `f64` values. The sidecar lives next to the blob with
//! `.json` appended to its file name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::config::ModelConfig;
use crate::error::{CardError, Result};
use crate::model::CardModel;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"CARDCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub n_items: usize,
    pub epoch: usize,
    pub val_hr: Option<f64>,
    pub val_ndcg: Option<f64>,
    pub seed: u64,
    pub variant: crate::model::Variant,
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut name = blob.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    blob.with_file_name(name)
}

pub fn encode_params(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, m) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CardError::Checkpoint("truncated parameter blob".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CardError::Checkpoint("not a parameter blob (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CardError::Checkpoint(format!("unsupported blob version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CardError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CardError::Checkpoint(format!("tensor {name} has absurd shape")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| CardError::Checkpoint("overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(name, Matrix::from_vec(rows, cols, data));
    }
    if r.pos != bytes.len() {
        return Err(CardError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(store)
}

pub fn save_checkpoint(model: &CardModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CardError::io(dir, e))?;
    }
    std::fs::write(path, encode_params(&model.params)).map_err(|e| CardError::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(&side, json).map_err(|e| CardError::io(&side, e))
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| CardError::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a model; when `vocab_hash` is given it must match the sidecar.
pub fn load_checkpoint(path: &Path, vocab_hash: Option<&str>) -> Result<(CardModel, CheckpointMeta)> {
    let meta = load_meta(path)?;
    if let Some(found) = vocab_hash {
        if found != meta.vocab_hash {
            return Err(CardError::VocabMismatch {
                expected: meta.vocab_hash.clone(),
                found: found.to_string(),
            });
        }
    }
    let bytes = std::fs::read(path).map_err(|e| CardError::io(path, e))?;
    let params = decode_params(&bytes)?;
    let model = CardModel::with_params(meta.config.clone(), meta.n_items, params)
        .ok_or_else(|| CardError::Checkpoint("parameter names or shapes do not match the config".into()))?;
    Ok((model, meta))
}
