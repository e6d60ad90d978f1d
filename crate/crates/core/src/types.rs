//! Domain types shared across the crate: coordinates, Gaussian components,
//! model configuration and image buffers.
//!
//! Coordinates live in a single normalized domain. The longest image side
//! spans `[0, 1]` and pixels are sampled at their centers, so a radius of
//! `0.1` means the same thing at every resolution.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point in the normalized image domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Coord {
    pub x: f64,
    pub y: f64,
}

impl Coord {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn sq_dist(self, other: Coord) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    /// Rotates `self` about `center` by `angle` radians (counter-clockwise).
    pub fn rotated_about(self, center: Coord, angle: f64) -> Coord {
        let (s, c) = angle.sin_cos();
        let dx = self.x - center.x;
        let dy = self.y - center.y;
        Coord::new(center.x + c * dx - s * dy, center.y + s * dx + c * dy)
    }
}

impl std::ops::Add for Coord {
    type Output = Coord;
    fn add(self, rhs: Coord) -> Coord {
        Coord::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Coord {
    type Output = Coord;
    fn sub(self, rhs: Coord) -> Coord {
        Coord::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl From<[f64; 2]> for Coord {
    fn from([x, y]: [f64; 2]) -> Self {
        Coord::new(x, y)
    }
}

impl From<Coord> for [f64; 2] {
    fn from(c: Coord) -> Self {
        [c.x, c.y]
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("pixel (row {row}, col {col}) is outside a {width}x{height} image")]
pub struct DomainError {
    pub row: usize,
    pub col: usize,
    pub width: usize,
    pub height: usize,
}

/// Maps the center of pixel `(row, col)` into the normalized domain.
pub fn normalize_coords(
    row: usize,
    col: usize,
    width: usize,
    height: usize,
) -> Result<Coord, DomainError> {
    if row >= height || col >= width {
        return Err(DomainError { row, col, width, height });
    }
    let span = width.max(height) as f64;
    Ok(Coord::new((col as f64 + 0.5) / span, (row as f64 + 0.5) / span))
}

/// Inverse of [`normalize_coords`]: continuous pixel position `(row, col)`
/// whose integer part is the pixel containing `c`.
pub fn denormalize_coords(c: Coord, width: usize, height: usize) -> (f64, f64) {
    let span = width.max(height) as f64;
    (c.y * span - 0.5, c.x * span - 0.5)
}

/// Extent of the domain box for an image: `(1, h/w)` for landscape images,
/// `(w/h, 1)` for portrait ones.
pub fn domain_extent(width: usize, height: usize) -> Coord {
    let span = width.max(height) as f64;
    Coord::new(width as f64 / span, height as f64 / span)
}

/// Covariance parameters `(log_s1, log_s2, theta)`.
///
/// `Σ = R(θ) diag(s1², s2²) R(θ)ᵀ` with `s = exp(log_s)`, which is symmetric
/// positive-definite for every finite parameter triple.
pub type CovParams = [f64; 3];

/// Full 2×2 covariance matrix for a parameter triple.
pub fn covariance(p: &CovParams) -> [[f64; 2]; 2] {
    let (s, c) = p[2].sin_cos();
    let v1 = (2.0 * p[0]).exp();
    let v2 = (2.0 * p[1]).exp();
    let a = c * c * v1 + s * s * v2;
    let b = c * s * (v1 - v2);
    let d = s * s * v1 + c * c * v2;
    [[a, b], [b, d]]
}

/// Squared Mahalanobis distance `dᵀ Σ⁻¹ d` for offset `(dx, dy)`.
#[inline]
pub fn mahalanobis_sq(p: &CovParams, dx: f64, dy: f64) -> f64 {
    let (s, c) = p[2].sin_cos();
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u * u * (-2.0 * p[0]).exp() + v * v * (-2.0 * p[1]).exp()
}

/// The Gaussian components of a model.
///
/// Embeddings are stored flat (`N × dim`) and only exist once the model has
/// been baked; before that they are produced by the hash grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<Coord>,
    pub cov_params: Vec<CovParams>,
    pub embeddings: Option<Vec<f64>>,
    pub dim: usize,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn is_baked(&self) -> bool {
        self.embeddings.is_some()
    }

    pub fn embedding(&self, i: usize) -> Option<&[f64]> {
        self.embeddings
            .as_deref()
            .map(|e| &e[i * self.dim..(i + 1) * self.dim])
    }
}

/// Model hyper-parameters. Field names are the on-disk config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_gaussians: usize,
    pub knn_k: usize,
    pub knn_radius: f64,
    pub grid_levels: usize,
    pub features_per_level: usize,
    pub min_res: u32,
    pub max_res: u32,
    pub hash_table_log2: u32,
    pub mlp_hidden_layers: usize,
    pub mlp_hidden_width: usize,
    pub smooth_l1_beta: f64,
    pub lr_grid: f64,
    pub lr_mlp: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_gaussians: 5_000,
            knn_k: 16,
            knn_radius: 0.1,
            grid_levels: 8,
            features_per_level: 2,
            min_res: 16,
            max_res: 8192,
            hash_table_log2: 15,
            mlp_hidden_layers: 3,
            mlp_hidden_width: 64,
            smooth_l1_beta: 1.0,
            lr_grid: 1e-2,
            lr_mlp: 1e-3,
            batch_size: 4096,
            iterations: 2_000,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldViolation {
    pub field: &'static str,
    pub reason: String,
}

/// All invariant violations found in a config.
#[derive(Debug, Error, Clone, PartialEq)]
pub struct ConfigError {
    pub violations: Vec<FieldViolation>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config: ")?;
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{}: {}", v.field, v.reason)?;
        }
        Ok(())
    }
}

impl ConfigError {
    pub fn mentions(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field == field)
    }
}

impl ModelConfig {
    pub fn validate(self) -> Result<ValidConfig, ConfigError> {
        let mut violations = Vec::new();
        let mut check = |ok: bool, field: &'static str, reason: &str| {
            if !ok {
                violations.push(FieldViolation { field, reason: reason.to_string() });
            }
        };
        check(self.n_gaussians >= 1, "n_gaussians", "must be >= 1");
        check(self.knn_k >= 1, "knn_k", "must be >= 1");
        check(
            self.knn_radius.is_finite() && self.knn_radius > 0.0,
            "knn_radius",
            "must be finite and > 0",
        );
        check(self.grid_levels >= 1, "grid_levels", "must be >= 1");
        check(self.features_per_level >= 1, "features_per_level", "must be >= 1");
        check(self.min_res >= 2, "min_res", "must be >= 2");
        check(self.max_res >= self.min_res, "max_res", "must be >= min_res");
        check(
            (1..=30).contains(&self.hash_table_log2),
            "hash_table_log2",
            "must be in 1..=30",
        );
        check(self.mlp_hidden_width >= 1, "mlp_hidden_width", "must be >= 1");
        check(
            self.smooth_l1_beta.is_finite() && self.smooth_l1_beta > 0.0,
            "smooth_l1_beta",
            "must be finite and > 0",
        );
        check(
            self.lr_grid.is_finite() && self.lr_grid >= 0.0,
            "lr_grid",
            "must be finite and >= 0",
        );
        check(
            self.lr_mlp.is_finite() && self.lr_mlp >= 0.0,
            "lr_mlp",
            "must be finite and >= 0",
        );
        check(self.batch_size >= 1, "batch_size", "must be >= 1");
        if violations.is_empty() {
            let dim = self.grid_levels * self.features_per_level;
            Ok(ValidConfig { cfg: self, dim })
        } else {
            Err(ConfigError { violations })
        }
    }
}

/// A [`ModelConfig`] whose invariants have been checked, together with the
/// derived embedding width `d = L·F`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidConfig {
    cfg: ModelConfig,
    dim: usize,
}

impl ValidConfig {
    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn into_inner(self) -> ModelConfig {
        self.cfg
    }

    /// Layer widths of the decoder producing `out` channels.
    pub fn mlp_widths(&self, out: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.cfg.mlp_hidden_layers + 2);
        w.push(self.dim);
        w.extend(std::iter::repeat_n(self.cfg.mlp_hidden_width, self.cfg.mlp_hidden_layers));
        w.push(out);
        w
    }
}

impl Deref for ValidConfig {
    type Target = ModelConfig;
    fn deref(&self) -> &ModelConfig {
        &self.cfg
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageBufferError {
    #[error("unsupported channel count {0} (expected 3 or 4)")]
    Channels(usize),
    #[error("data length {got} does not match {width}x{height}x{channels}")]
    Length { got: usize, width: usize, height: usize, channels: usize },
    #[error("image has zero area")]
    Empty,
    #[error("value {value} at offset {offset} is outside [0, 1]")]
    OutOfRange { offset: usize, value: f64 },
}

/// Row-major RGB or RGBA image with unit-interval samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, ImageBufferError> {
        if channels != 3 && channels != 4 {
            return Err(ImageBufferError::Channels(channels));
        }
        if width == 0 || height == 0 {
            return Err(ImageBufferError::Empty);
        }
        if data.len() != width * height * channels {
            return Err(ImageBufferError::Length { got: data.len(), width, height, channels });
        }
        if let Some((offset, &value)) =
            data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageBufferError::OutOfRange { offset, value });
        }
        Ok(Self { width, height, channels, data })
    }

    /// Builds an image by evaluating `f(row, col)` for every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> Vec<f64>,
    ) -> Result<Self, ImageBufferError> {
        let mut data = Vec::with_capacity(width * height * channels);
        for row in 0..height {
            for col in 0..width {
                let px = f(row, col);
                if px.len() != channels {
                    return Err(ImageBufferError::Channels(px.len()));
                }
                data.extend_from_slice(&px);
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn has_alpha(&self) -> bool {
        self.channels == 4
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn rgb(&self, row: usize, col: usize) -> [f64; 3] {
        let p = self.pixel(row, col);
        [p[0], p[1], p[2]]
    }

    /// Alpha of a pixel; 1 for RGB images.
    pub fn alpha(&self, row: usize, col: usize) -> f64 {
        if self.channels == 4 {
            self.pixel(row, col)[3]
        } else {
            1.0
        }
    }

    /// Copies out the rectangle `[x0, x1) × [y0, y1)` (columns × rows).
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Option<ImageBuffer> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return None;
        }
        let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0) * self.channels);
        for row in y0..y1 {
            let start = (row * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + (x1 - x0) * self.channels]);
        }
        Some(ImageBuffer { width: x1 - x0, height: y1 - y0, channels: self.channels, data })
    }
}
