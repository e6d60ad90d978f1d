//! Animation manifests: `{"n": N, "frames": ["f0.pos", ...]}`.
//!
//! Each frame file holds `N` positions as raw little-endian `f32` pairs
//! `(x, y)`. Frame paths are relative to the manifest's directory. Files
//! must exist when the manifest is parsed; their length is checked when a
//! frame is read.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::types::Coord;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("frame {index} ({path}) does not exist")]
    MissingFrame { index: usize, path: String },
    #[error("frame {index} ({path}) has {got} bytes, expected {expected} (2 x {n} f32)")]
    FrameLength { index: usize, path: String, got: usize, expected: usize, n: usize },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    n: usize,
    frames: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnimationManifest {
    pub n: usize,
    pub frames: Vec<PathBuf>,
}

impl AnimationManifest {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn read_frame(&self, index: usize) -> Result<Vec<Coord>, ManifestError> {
        let path = &self.frames[index];
        let bytes = std::fs::read(path)
            .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
        let expected = self.n * 8;
        if bytes.len() != expected {
            return Err(ManifestError::FrameLength {
                index,
                path: path.display().to_string(),
                got: bytes.len(),
                expected,
                n: self.n,
            });
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| {
                let x = f32::from_le_bytes(c[0..4].try_into().expect("4 bytes"));
                let y = f32::from_le_bytes(c[4..8].try_into().expect("4 bytes"));
                Coord::new(x as f64, y as f64)
            })
            .collect())
    }
}

/// Parses manifest text; `base` is the directory frame paths resolve against.
pub fn parse_manifest_str(text: &str, base: &Path) -> Result<AnimationManifest, ManifestError> {
    let raw: RawManifest = serde_json::from_str(text).map_err(|e| ManifestError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let frames = raw
        .frames
        .iter()
        .enumerate()
        .map(|(index, f)| {
            let p = base.join(f);
            if p.is_file() {
                Ok(p)
            } else {
                Err(ManifestError::MissingFrame { index, path: p.display().to_string() })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AnimationManifest { n: raw.n, frames })
}

pub fn parse_animation_manifest(path: impl AsRef<Path>) -> Result<AnimationManifest, ManifestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
    parse_manifest_str(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes one frame file.
pub fn write_frame(path: impl AsRef<Path>, positions: &[Coord]) -> Result<(), ManifestError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(positions.len() * 8);
    for p in positions {
        bytes.extend_from_slice(&(p.x as f32).to_le_bytes());
        bytes.extend_from_slice(&(p.y as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)
        .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })
}
