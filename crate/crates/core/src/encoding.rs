//! Multi-resolution 2D hash-grid encoder with analytic table gradients.
//!
//! Each level is a lattice of `N_l × N_l` cells over the unit square. Vertex
//! features live in a table of `T` slots per level: indexed directly while
//! the lattice fits, spatially hashed otherwise. A query bilinearly
//! interpolates its four surrounding vertices on every level and the
//! per-level features are concatenated in level order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::{Coord, ValidConfig};

/// Multiplier applied to the y lattice coordinate before hashing.
pub const HASH_PRIME: u64 = 2_654_435_761;

const INIT_RANGE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("table payload has {got} values, expected {expected}")]
    TableLength { got: usize, expected: usize },
}

/// Table slot of lattice vertex `(vx, vy)` on a level of resolution `res`.
#[inline]
pub fn vertex_slot(res: u32, vx: u32, vy: u32, table_size: usize) -> usize {
    let side = res as u64 + 1;
    if side * side <= table_size as u64 {
        (vy as u64 * side + vx as u64) as usize
    } else {
        ((vx as u64 ^ (vy as u64).wrapping_mul(HASH_PRIME)) & (table_size as u64 - 1)) as usize
    }
}

/// Per-level resolutions `floor(N_min · b^l)` and the growth factor `b`.
///
/// A small epsilon absorbs rounding in `b^l` so the top level lands exactly
/// on `N_max` (`16 · 512^(7/7)` evaluates to `8191.999…` in floating point).
pub fn level_resolutions(min_res: u32, max_res: u32, levels: usize) -> (Vec<u32>, f64) {
    let growth = if levels <= 1 {
        1.0
    } else {
        (((max_res as f64).ln() - (min_res as f64).ln()) / (levels as f64 - 1.0)).exp()
    };
    let res = (0..levels)
        .map(|l| (min_res as f64 * growth.powi(l as i32) + 1e-6).floor() as u32)
        .collect();
    (res, growth)
}

/// Bilinear footprint of one query on one level: four `(slot, weight)`
/// pairs in the order (x0,y0), (x1,y0), (x0,y1), (x1,y1).
pub type LevelFootprint = [(u32, f64); 4];

#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    features: usize,
    table_size: usize,
    resolutions: Vec<u32>,
    growth: f64,
    /// `L × T × F`, level-major.
    tables: Vec<f64>,
}

impl HashGrid {
    /// Fresh grid with tables drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn new(cfg: &ValidConfig, seed: u64) -> Self {
        let mut grid = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut grid.tables {
            *v = rng.random_range(-INIT_RANGE..=INIT_RANGE);
        }
        grid
    }

    pub fn zeros(cfg: &ValidConfig) -> Self {
        let (resolutions, growth) =
            level_resolutions(cfg.min_res, cfg.max_res, cfg.grid_levels);
        let table_size = 1usize << cfg.hash_table_log2;
        let tables = vec![0.0; cfg.grid_levels * table_size * cfg.features_per_level];
        Self { features: cfg.features_per_level, table_size, resolutions, growth, tables }
    }

    /// Grid with the given table payload (as stored in a checkpoint).
    pub fn from_tables(cfg: &ValidConfig, tables: Vec<f64>) -> Result<Self, EncodingError> {
        let mut grid = Self::zeros(cfg);
        if tables.len() != grid.tables.len() {
            return Err(EncodingError::TableLength {
                got: tables.len(),
                expected: grid.tables.len(),
            });
        }
        grid.tables = tables;
        Ok(grid)
    }

    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn table_size(&self) -> usize {
        self.table_size
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn growth(&self) -> f64 {
        self.growth
    }

    pub fn output_dim(&self) -> usize {
        self.levels() * self.features
    }

    pub fn tables(&self) -> &[f64] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [f64] {
        &mut self.tables
    }

    /// Flat index of feature `f` in `slot` of `level`.
    #[inline]
    pub fn table_index(&self, level: usize, slot: usize, f: usize) -> usize {
        (level * self.table_size + slot) * self.features + f
    }

    #[inline]
    pub fn level_footprint(&self, level: usize, x: Coord) -> LevelFootprint {
        let res = self.resolutions[level];
        let n = res as f64;
        let px = x.x.clamp(0.0, 1.0) * n;
        let py = x.y.clamp(0.0, 1.0) * n;
        let cx = (px.floor() as u32).min(res - 1);
        let cy = (py.floor() as u32).min(res - 1);
        let fx = px - cx as f64;
        let fy = py - cy as f64;
        let t = self.table_size;
        [
            (vertex_slot(res, cx, cy, t) as u32, (1.0 - fx) * (1.0 - fy)),
            (vertex_slot(res, cx + 1, cy, t) as u32, fx * (1.0 - fy)),
            (vertex_slot(res, cx, cy + 1, t) as u32, (1.0 - fx) * fy),
            (vertex_slot(res, cx + 1, cy + 1, t) as u32, fx * fy),
        ]
    }

    /// Writes the `L·F` features of `x` into `out`.
    pub fn encode_into(&self, x: Coord, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.output_dim());
        let f = self.features;
        for level in 0..self.levels() {
            let fp = self.level_footprint(level, x);
            let dst = &mut out[level * f..(level + 1) * f];
            dst.fill(0.0);
            for &(slot, w) in &fp {
                let base = self.table_index(level, slot as usize, 0);
                for (d, v) in dst.iter_mut().zip(&self.tables[base..base + f]) {
                    *d += w * v;
                }
            }
        }
    }

    pub fn encode(&self, x: Coord) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(x, &mut out);
        out
    }

    /// Gradient of `upstream · encode(x)` with respect to the tables, as
    /// sparse `(table index, value)` entries. Entries may repeat when hashed
    /// corners collide; they are meant to be summed.
    pub fn encode_backward(&self, x: Coord, upstream: &[f64]) -> Vec<(usize, f64)> {
        let f = self.features;
        let mut out = Vec::with_capacity(4 * self.levels() * f);
        for level in 0..self.levels() {
            let up = &upstream[level * f..(level + 1) * f];
            for &(slot, w) in &self.level_footprint(level, x) {
                let base = self.table_index(level, slot as usize, 0);
                for (k, &u) in up.iter().enumerate() {
                    if u != 0.0 && w != 0.0 {
                        out.push((base + k, w * u));
                    }
                }
            }
        }
        out
    }

    /// Adds the table gradient of `upstream · encode(x)` into a dense buffer
    /// shaped like [`tables`](Self::tables).
    pub fn accumulate_backward(&self, x: Coord, upstream: &[f64], grad: &mut [f64]) {
        let f = self.features;
        for level in 0..self.levels() {
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            for &(slot, w) in &self.level_footprint(level, x) {
                let base = self.table_index(level, slot as usize, 0);
                for (g, &u) in grad[base..base + f].iter_mut().zip(up) {
                    *g += w * u;
                }
            }
        }
    }
}
