//! Binary checkpoint container.
//!
//! ```text
//! magic   8 bytes  "STATTNCK"
//! version u32 LE
//! hlen    u64 LE   length of the JSON header
//! header  hlen bytes (train config, model config, epoch, validation AUC,
//!                     feature names, parameter count)
//! blocks  per parameter: u32 name length, name (UTF-8), u32 rank,
//!         u64 per dimension, then the f64 LE values
//! digest  32 bytes SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Checkpoint, Result, TrainConfig, TrainError};
use crate::layers::ModelConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STATTNCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    train_config: TrainConfig,
    model_config: ModelConfig,
    epoch: usize,
    val_auc: f64,
    feature_names: Vec<String>,
    param_count: usize,
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        train_config: ckpt.train_config.clone(),
        model_config: ckpt.model_config,
        epoch: ckpt.epoch,
        val_auc: ckpt.val_auc,
        feature_names: ckpt.feature_names.clone(),
        param_count: ckpt.params.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in &ckpt.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length does not fit in memory"))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 8 + DIGEST_LEN {
        return Err(corrupt(format!("file is truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch: file is truncated or corrupted"));
    }
    let mut c = Cursor { buf: body, pos: 12 };
    let hlen = c.len()?;
    let header: Header = serde_json::from_slice(c.take(hlen)?).map_err(|e| corrupt(format!("header: {e}")))?;
    let mut params = Vec::with_capacity(header.param_count);
    for _ in 0..header.param_count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| corrupt("parameter name is not UTF-8"))?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.len()?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| corrupt("parameter shape overflows"))?;
        let raw = c.take(count.checked_mul(8).ok_or_else(|| corrupt("parameter size overflows"))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let mut t = Tensor::new(shape, data).map_err(|e| corrupt(format!("parameter {name:?}: {e}")))?;
        t.set_requires_grad(true);
        params.push((name, t));
    }
    if c.pos != body.len() {
        return Err(corrupt("trailing bytes after the last parameter block"));
    }
    let ckpt = Checkpoint {
        train_config: header.train_config,
        model_config: header.model_config,
        epoch: header.epoch,
        val_auc: header.val_auc,
        feature_names: header.feature_names,
        params,
    };
    // Rebuilding checks every name and shape against the architecture.
    ckpt.model()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| corrupt(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}
