//! Single-file model checkpoints.
//!
//! Layout:
//!
//! ```text
//! "GNRC" | version: u32 LE (=1) | header_len: u32 LE | header (JSON, header_len bytes) | payload
//! ```
//!
//! The JSON header carries the config, sizes, flags and an array manifest
//! `[{name, len}]`; the payload is those arrays back to back as
//! little-endian `f32`, in manifest order:
//! `means, cov_params, [embeddings], [grid_tables], color_mlp, [mask_mlp]`.
//! Header keys are emitted in a fixed order, so save ∘ load ∘ save is
//! byte-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::HashGrid;
use crate::field::{FieldError, Model};
use crate::net::{param_count, Mlp};
use crate::types::{Coord, GaussianSet, ModelConfig};

pub const MAGIC: &[u8; 4] = b"GNRC";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("version mismatch: file is v{found}, expected v{VERSION}")]
    VersionMismatch { found: u32 },
    #[error("truncation: need {needed} bytes, file has {available}")]
    Truncated { needed: usize, available: usize },
    #[error("header is not valid: {0}")]
    Header(String),
    #[error("manifest/byte-length disagreement: {0}")]
    Manifest(String),
    #[error("checkpoint describes an invalid model: {0}")]
    Model(#[from] FieldError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    width: usize,
    height: usize,
    n: usize,
    d: usize,
    baked: bool,
    channels: String,
    arrays: Vec<ArrayEntry>,
}

fn expected_arrays(
    cfg: &crate::types::ValidConfig,
    n: usize,
    baked: bool,
    rgba: bool,
) -> Vec<ArrayEntry> {
    let d = cfg.embedding_dim();
    let mut v = vec![
        ArrayEntry { name: "means".into(), len: 2 * n },
        ArrayEntry { name: "cov_params".into(), len: 3 * n },
    ];
    if baked {
        v.push(ArrayEntry { name: "embeddings".into(), len: n * d });
    } else {
        let t = 1usize << cfg.hash_table_log2;
        v.push(ArrayEntry {
            name: "grid_tables".into(),
            len: cfg.grid_levels * t * cfg.features_per_level,
        });
    }
    v.push(ArrayEntry { name: "color_mlp".into(), len: param_count(&cfg.mlp_widths(3)) });
    if rgba {
        v.push(ArrayEntry { name: "mask_mlp".into(), len: param_count(&cfg.mlp_widths(1)) });
    }
    v
}

fn push_f32(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes `model`. Parameters are stored as `f32`.
pub fn to_bytes(model: &Model) -> Vec<u8> {
    let cfg = model.config();
    let n = model.len();
    let (w, h) = model.native_size();
    let header = Header {
        config: cfg.config().clone(),
        width: w,
        height: h,
        n,
        d: cfg.embedding_dim(),
        baked: model.is_baked(),
        channels: if model.has_mask() { "rgba" } else { "rgb" }.into(),
        arrays: expected_arrays(cfg, n, model.is_baked(), model.has_mask()),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let payload_len: usize = expected_arrays(cfg, n, model.is_baked(), model.has_mask())
        .iter()
        .map(|a| a.len * 4)
        .sum();
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    push_f32(&mut out, model.means().iter().flat_map(|m| [m.x, m.y]));
    push_f32(&mut out, model.cov_params().iter().flatten().copied());
    match (&model.gaussians().embeddings, model.grid()) {
        (Some(e), _) => push_f32(&mut out, e.iter().copied()),
        (None, Some(g)) => push_f32(&mut out, g.tables().iter().copied()),
        (None, None) => unreachable!("model holds neither embeddings nor a grid"),
    }
    push_f32(&mut out, model.color_mlp().params().iter().copied());
    if let Some(m) = model.mask_mlp() {
        push_f32(&mut out, m.params().iter().copied());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let head = bytes.len().min(4);
    if bytes[..head] != MAGIC[..head] {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated { needed: PREAMBLE, available: bytes.len() });
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let header_len = read_u32(bytes, 8) as usize;
    let header_end = PREAMBLE + header_len;
    if bytes.len() < header_end {
        return Err(CheckpointError::Truncated { needed: header_end, available: bytes.len() });
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let cfg = header
        .config
        .clone()
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let rgba = match header.channels.as_str() {
        "rgb" => false,
        "rgba" => true,
        other => return Err(CheckpointError::Header(format!("unknown channel mode {other:?}"))),
    };
    if header.d != cfg.embedding_dim() {
        return Err(CheckpointError::Manifest(format!(
            "d = {} but config implies {}",
            header.d,
            cfg.embedding_dim()
        )));
    }
    let expected = expected_arrays(&cfg, header.n, header.baked, rgba);
    if header.arrays != expected {
        return Err(CheckpointError::Manifest(format!(
            "array manifest {:?} does not match the described model {:?}",
            header.arrays, expected
        )));
    }
    let payload_len: usize = expected.iter().map(|a| a.len * 4).sum();
    let needed = header_end + payload_len;
    if bytes.len() < needed {
        return Err(CheckpointError::Truncated { needed, available: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(CheckpointError::Manifest(format!(
            "{} trailing bytes after the last array",
            bytes.len() - needed
        )));
    }

    let mut at = header_end;
    let mut arrays = expected.iter().map(|a| {
        let vals: Vec<f64> = bytes[at..at + a.len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        at += a.len * 4;
        vals
    });
    let mut next = || arrays.next().expect("manifest checked");
    let means: Vec<Coord> = next().chunks_exact(2).map(|c| Coord::new(c[0], c[1])).collect();
    let cov_params = next().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let (embeddings, grid) = if header.baked {
        (Some(next()), None)
    } else {
        (None, Some(HashGrid::from_tables(&cfg, next()).map_err(FieldError::from)?))
    };
    let color = Mlp::from_params(&cfg.mlp_widths(3), next()).map_err(FieldError::from)?;
    let mask = if rgba {
        Some(Mlp::from_params(&cfg.mlp_widths(1), next()).map_err(FieldError::from)?)
    } else {
        None
    };
    let gaussians = GaussianSet { means, cov_params, embeddings, dim: header.d };
    Ok(Model::from_parts(cfg, header.width, header.height, gaussians, grid, color, mask)?)
}

/// The model exactly as a save/load cycle would return it: parameters
/// rounded to `f32`, training history dropped.
pub fn reload(model: &Model) -> Model {
    from_bytes(&to_bytes(model)).expect("a serialized model always deserializes")
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model))
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}
