//! `CAACCKPT1` checkpoint files.
//!
//! ```text
//! "CAACCKPT1\n"                   magic line
//! {json header}\n                 model spec, ordered [{name, shape}], provenance
//! f32 LE payload                  each parameter's row-major values, in
//!                                 header order
//! ```
//!
//! Parameters live in `f64` during training and are stored as `f32`; a
//! reloaded model therefore differs from the in-memory one by at most one
//! `f32` rounding per value (relative 6e-8).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaacConfig, ParamSet};
use crate::baselines::MlpConfig;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"CAACCKPT1\n";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum ModelSpec {
    Caac(CaacConfig),
    Mlp(MlpConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub run_config_hash: String,
    pub train_dataset_sha256: String,
    pub train_seeds: Vec<u64>,
    pub angle_strategy: String,
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub params: ParamSet,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelSpec,
    params: Vec<ParamEntry>,
    provenance: Provenance,
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        model: ckpt.model,
        params: ckpt
            .params
            .names()
            .iter()
            .zip(ckpt.params.tensors())
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        provenance: ckpt.provenance.clone(),
    };
    let json =
        serde_json::to_string(&header).map_err(|e| Error::format("CAACCKPT1", e.to_string()))?;
    let mut buf =
        Vec::with_capacity(CHECKPOINT_MAGIC.len() + json.len() + 1 + 4 * ckpt.params.count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(json.as_bytes());
    buf.push(b'\n');
    for t in ckpt.params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::format("CAACCKPT1", format!("{}: {reason}", path.display()));
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(bad("missing magic".into()));
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("unterminated header".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| bad(e.to_string()))?;
    let payload = &rest[nl + 1..];
    let total: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if payload.len() != total * 4 {
        return Err(bad(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            total * 4
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut params = ParamSet::new();
    for entry in header.params {
        let n = entry.shape.iter().product();
        let t = Tensor::new(entry.shape, floats.by_ref().take(n).collect())
            .map_err(|e| bad(e.to_string()))?;
        params.push(entry.name, t);
    }
    Ok(Checkpoint {
        model: header.model,
        params,
        provenance: header.provenance,
    })
}
