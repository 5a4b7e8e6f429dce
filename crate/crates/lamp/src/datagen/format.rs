//! Trajectory dataset files: magic "LMPD", version, JSON metadata,
//! then little-endian f32 field arrays in trajectory order.

use super::{uniform_grid, uniform_times, ForcingTerm, PdeParams, Trajectory};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LMPD";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrajMeta {
    seed: u64,
    params: PdeParams,
    forcing: ForcingTerm,
    length: f64,
    t_end: f64,
    n_x: usize,
    n_t: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    n_traj: usize,
    trajectories: Vec<TrajMeta>,
}

/// Writes the trajectories. Field values are stored as f32.
pub fn write_dataset(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let meta = DatasetMeta {
        n_traj: trajs.len(),
        trajectories: trajs
            .iter()
            .map(|t| TrajMeta {
                seed: t.seed,
                params: t.params,
                forcing: t.forcing.clone(),
                length: t.length,
                t_end: t.t_end,
                n_x: t.n_x,
                n_t: t.n_t,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    let mut buf = Vec::new();
    for t in trajs {
        buf.clear();
        buf.reserve(t.u.len() * 4);
        for &v in &t.u {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a dataset written by `write_dataset`. The f32 field values come
/// back upcast to f64, so a write/read/write cycle is byte-identical.
pub fn read_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Format(format!(
                "dataset truncated at byte {} (wanted {} more)",
                off, n
            )));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            version
        )));
    }
    let json_len = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let meta: DatasetMeta = serde_json::from_slice(take(&mut off, json_len)?)
        .map_err(|e| Error::Format(format!("dataset metadata: {}", e)))?;
    if meta.n_traj != meta.trajectories.len() {
        return Err(Error::Format(format!(
            "header claims {} trajectories but lists {}",
            meta.n_traj,
            meta.trajectories.len()
        )));
    }
    let mut out = Vec::with_capacity(meta.n_traj);
    for tm in meta.trajectories {
        let count = tm.n_t * tm.n_x;
        let body = take(&mut off, count * 4)?;
        let mut u = Vec::with_capacity(count);
        for c in body.chunks_exact(4) {
            u.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
        }
        out.push(Trajectory {
            seed: tm.seed,
            params: tm.params,
            forcing: tm.forcing,
            length: tm.length,
            t_end: tm.t_end,
            n_x: tm.n_x,
            n_t: tm.n_t,
            grid: uniform_grid(tm.n_x, tm.length),
            times: uniform_times(tm.n_t, tm.t_end),
            u,
        });
    }
    if off != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last trajectory",
            bytes.len() - off
        )));
    }
    Ok(out)
}
