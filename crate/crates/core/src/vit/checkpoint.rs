//! Checkpoint container: a JSON manifest (config, optional strategy
//! descriptor, and a path → offset/shape table) followed by a flat
//! little-endian f64 payload. Loading validates every entry's shape and
//! bounds against the manifest before any tensor is materialized.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::ViTConfig;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"KADAPTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ViTConfig,
    /// Strategy descriptor for adapted checkpoints; absent for plain models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

pub struct Loaded {
    pub config: ViTConfig,
    pub strategy: Option<serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save(
    path: &Path,
    config: &ViTConfig,
    strategy: Option<serde_json::Value>,
    entries: &[(&str, &Tensor)],
) -> Result<()> {
    let mut tensors = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (p, t) in entries {
        tensors.push(TensorEntry {
            path: (*p).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.numel() * 8) as u64;
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: config.clone(),
        strategy,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u64::<LittleEndian>(json.len() as u64)?;
    w.write_all(&json)?;
    for (_, t) in entries {
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Loaded> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let json_len = r.read_u64::<LittleEndian>()? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let bytes = numel * 8;
        let start = entry.offset as usize;
        let end = start
            .checked_add(bytes)
            .ok_or_else(|| Error::Checkpoint(format!("offset overflow for {}", entry.path)))?;
        if end > payload.len() {
            return Err(Error::Truncated {
                needed: end,
                got: payload.len(),
            });
        }
        let mut data = Vec::with_capacity(numel);
        let mut cursor = &payload[start..end];
        for _ in 0..numel {
            data.push(cursor.read_f64::<LittleEndian>()?);
        }
        tensors.push((entry.path.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok(Loaded {
        config: manifest.config,
        strategy: manifest.strategy,
        tensors,
    })
}
