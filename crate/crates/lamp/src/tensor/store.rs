//! Checkpoint files: magic "LAMPCKPT", a u32 version, a JSON manifest with
//! parameter names/shapes plus free-form metadata, then the raw f32 blobs
//! little-endian in manifest order.

use super::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LAMPCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<ParamEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint(
    path: &Path,
    entries: &[(String, &Tensor)],
    meta: &serde_json::Value,
) -> Result<()> {
    let manifest = Manifest {
        params: entries
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {}", e)))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for (_, t) in entries {
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(Vec<(String, Tensor)>, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("checkpoint truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)
        .map_err(|_| Error::Format("checkpoint truncated in version".into()))?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            version
        )));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)
        .map_err(|_| Error::Format("checkpoint truncated in manifest length".into()))?;
    let mlen = u64::from_le_bytes(l8) as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes)
        .map_err(|_| Error::Format("checkpoint truncated in manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&mbytes)
        .map_err(|e| Error::Format(format!("manifest decode: {}", e)))?;
    let mut out = Vec::with_capacity(manifest.params.len());
    for entry in manifest.params {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(|_| {
            Error::Format(format!("checkpoint truncated in blob for {}", entry.name))
        })?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last blob",
            trailing.len()
        )));
    }
    Ok((out, manifest.meta))
}
