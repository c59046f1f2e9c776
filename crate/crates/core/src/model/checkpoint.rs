//! Binary container: magic, version, a JSON header with the model config
//! and a tensor manifest, then raw little-endian f32 data.
//!
//! ```text
//! b"CCQGCKPT" | u32 version | u64 header_len | header JSON | f32 data...
//! ```
//!
//! Tensor names are `{group}.{tensor}`, e.g. `shared.h.0.attn.q.w`, so one
//! file can hold several parameter sets (two modules, or optimizer moments).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Layout, ModelConfig, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CCQGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub dev_loss: Option<f64>,
    /// Caller-defined settings stored alongside (chain config, seeds...).
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    /// Named parameter sets in file order.
    pub groups: Vec<(String, Params<f32>)>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Option<&Params<f32>> {
        self.groups.iter().find(|(g, _)| g == name).map(|(_, p)| p)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<ManifestEntry>,
}

/// Writes `groups` (all shaped by `config`) to `path`.
pub fn write_tensor_file(
    path: &Path,
    config: &ModelConfig,
    meta: &CheckpointMeta,
    groups: &[(&str, &Params<f32>)],
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (g, p) in groups {
        if &p.cfg != config {
            return Err(Error::Config(format!("group {g} does not match the checkpoint config")));
        }
        for t in &p.layout.tensors {
            tensors.push(ManifestEntry {
                name: format!("{g}.{}", t.name),
                shape: t.shape.clone(),
                offset,
            });
            offset += 4 * t.len() as u64;
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: config.clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::parse("checkpoint header", e))?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write to a sibling then rename, so a crash never leaves a torn file.
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(&tmp, e);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, p) in groups {
            for x in &p.data {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads any tensor container, validating the manifest against the layout
/// its own config implies.
pub fn read_tensor_file(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let bad = |m: &str| Error::parse(ctx.clone(), m);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..data_start]).map_err(|e| Error::parse(ctx.clone(), e))?;
    header.config.validate()?;
    let data = &bytes[data_start..];

    let layout = Arc::new(Layout::new(&header.config));
    let per_group = layout.tensors.len();
    if header.tensors.len() % per_group != 0 {
        return Err(bad("manifest does not hold whole parameter sets"));
    }
    let mut groups = Vec::new();
    for chunk in header.tensors.chunks(per_group) {
        let group = chunk[0]
            .name
            .split_once('.')
            .map(|(g, _)| g.to_string())
            .ok_or_else(|| bad("tensor name without group prefix"))?;
        let mut values = vec![0f32; layout.len];
        for (entry, info) in chunk.iter().zip(&layout.tensors) {
            if entry.name != format!("{group}.{}", info.name) || entry.shape != info.shape {
                return Err(bad(&format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
            }
            let start = entry.offset as usize;
            let end = start + 4 * info.len();
            let raw = data.get(start..end).ok_or_else(|| bad("tensor data out of range"))?;
            for (dst, b) in values[info.range()].iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
        }
        groups.push((
            group,
            Params {
                cfg: header.config.clone(),
                layout: Arc::clone(&layout),
                data: values,
            },
        ));
    }
    Ok(Checkpoint {
        config: header.config,
        meta: header.meta,
        groups,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let groups: Vec<(&str, &Params<f32>)> = ckpt.groups.iter().map(|(g, p)| (g.as_str(), p)).collect();
    write_tensor_file(path, &ckpt.config, &ckpt.meta, &groups)
}

/// Loads a checkpoint; when `expected` is given its config must match.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let ckpt = read_tensor_file(path)?;
    if let Some(cfg) = expected {
        // Dropout does not shape the weights; everything else must agree.
        let mut stored = ckpt.config.clone();
        stored.dropout = cfg.dropout;
        if &stored != cfg {
            return Err(Error::Config(format!(
                "checkpoint {} was saved with config {:?}, runtime config is {:?}",
                path.display(),
                ckpt.config,
                cfg
            )));
        }
    }
    Ok(ckpt)
}
