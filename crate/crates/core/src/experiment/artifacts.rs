//! On-disk adversarial batches: magic `GMMA`, version, a JSON provenance
//! header, then the rows as little-endian `f64`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::config::AttackSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GMMA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub attack: AttackSpec,
    pub attack_seed: u64,
    /// Key of the model the batch was crafted against.
    pub model_key: String,
    /// Rows of the test split that were attacked, in order.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub provenance: Provenance,
    pub inputs: Tensor,
}

pub fn encode_batch(batch: &AdversarialBatch) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&batch.provenance).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(24 + meta.len() + 8 * batch.inputs.len());
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(meta.len() as u32)?;
    out.extend_from_slice(&meta);
    out.write_u64::<LittleEndian>(batch.inputs.rows() as u64)?;
    out.write_u64::<LittleEndian>(batch.inputs.cols() as u64)?;
    for v in batch.inputs.data() {
        out.write_f64::<LittleEndian>(*v)?;
    }
    Ok(out)
}

pub fn decode_batch(bytes: &[u8]) -> Result<AdversarialBatch> {
    let bad = |m: &str| Error::Format(format!("adversarial batch: {m}"));
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    if r.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? != VERSION {
        return Err(bad("unsupported version"));
    }
    let len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
    let mut meta = vec![0u8; len];
    r.read_exact(&mut meta).map_err(|_| bad("truncated header"))?;
    let provenance: Provenance = serde_json::from_slice(&meta).map_err(|e| bad(&e.to_string()))?;
    let rows = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
    let cols = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
    let remaining = bytes.len() - r.position() as usize;
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(8)) != Some(remaining) {
        return Err(bad("payload size mismatch"));
    }
    let mut data = vec![0.0; rows * cols];
    r.read_f64_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated payload"))?;
    if provenance.indices.len() != rows {
        return Err(bad("index count differs from row count"));
    }
    Ok(AdversarialBatch { provenance, inputs: Tensor::matrix(rows, cols, data)? })
}

pub fn save_batch(batch: &AdversarialBatch, path: &Path) -> Result<()> {
    fs::write(path, encode_batch(batch)?)?;
    Ok(())
}

pub fn load_batch(path: &Path) -> Result<AdversarialBatch> {
    decode_batch(&fs::read(path)?)
}
