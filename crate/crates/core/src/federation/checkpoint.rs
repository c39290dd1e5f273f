//! Round checkpoints: one JSON header line followed by the binary parameter payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::nn::ParamVector;

pub const CHECKPOINT_FORMAT: &str = "fedpath-ckpt-1";
pub const LATEST_FILE: &str = "latest";

/// Metadata snapshot stored in front of the global parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub round: usize,
    /// Hex FNV-1a hash of the canonical run config.
    pub config_hash: String,
    /// Samples contributed by each client this round; 0 for a dropped client.
    pub per_client_n: Vec<usize>,
    pub failed_clients: Vec<usize>,
    /// Seeds of the per-client generators used this round.
    pub client_seeds: Vec<u64>,
    pub train_loss_mean: Option<f64>,
    pub val: Option<MetricsReport>,
    pub best_round: usize,
    pub best_val_accuracy: f64,
    /// Cumulative training wall time. Not reproducible across runs.
    pub wall_time_s: f64,
}

pub fn checkpoint_name(round: usize) -> String {
    format!("ckpt_round_{round}.bin")
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("no file name in {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &ParamVector) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec(header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&params.to_bytes());
    Ok(bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ParamVector)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported format {}",
            header.format
        )));
    }
    let params = ParamVector::from_bytes(&bytes[split + 1..])?;
    Ok((header, params))
}

/// Writes `ckpt_round_<r>.bin` and then repoints `latest` at it.
pub fn write_checkpoint(
    dir: &Path,
    header: &CheckpointHeader,
    params: &ParamVector,
) -> Result<PathBuf> {
    let name = checkpoint_name(header.round);
    let path = dir.join(&name);
    atomic_write(&path, &encode_checkpoint(header, params)?)?;
    atomic_write(&dir.join(LATEST_FILE), format!("{name}\n").as_bytes())?;
    Ok(path)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamVector)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Path named by the `latest` marker, if the run has one.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let marker = dir.join(LATEST_FILE);
    if !marker.exists() {
        return Ok(None);
    }
    let name = fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
    let name = name.trim();
    if name.is_empty() || name.contains('/') {
        return Err(Error::Checkpoint(format!(
            "corrupt marker {}",
            marker.display()
        )));
    }
    Ok(Some(dir.join(name)))
}
