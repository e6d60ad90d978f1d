//! The image field model: Gaussian components whose embeddings are blended
//! by a radius-limited KNN kernel average and decoded by small MLPs.
//!
//! Query path: `x → KNN(x) → Gaussian-weighted mean of e_i → MLP → rgb[a]`.
//! The decoder never sees `x` itself, only the blended embedding, which is
//! what makes moving the means an edit of the image.

mod metrics;
mod render;
mod train;

pub use metrics::{psnr, psnr_from_mse};
pub use render::PixelRect;
pub use train::{
    loss_and_grads, sample_batch, train, BatchSampler, ModelGrads, StepStats, TrainBatch,
    TrainOptions, TrainRecord, Trainer, TrainingStats,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoding::{EncodingError, HashGrid};
use crate::net::{Mlp, MlpCache, NetError};
use crate::spatial::{GridIndex, NeighborList, QueryScratch, SpatialError};
use crate::types::{
    domain_extent, mahalanobis_sq, ConfigError, Coord, CovParams, GaussianSet, ImageBuffer,
    ImageBufferError, ModelConfig, ValidConfig,
};

/// Below this total kernel weight the aggregation falls back to
/// inverse-squared-distance weights.
pub const WEIGHT_UNDERFLOW: f64 = 1e-30;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Image(#[from] ImageBufferError),
    #[error("empty support: the alpha channel is zero everywhere")]
    EmptySupport,
    #[error("model is baked; training needs the hash grid")]
    Baked,
    #[error("model is not baked")]
    NotBaked,
    #[error("model is already baked")]
    AlreadyBaked,
    #[error("render region has zero area")]
    EmptyRegion,
    #[error("render region {0:?} exceeds the {1}x{2} frame")]
    RegionOutOfBounds(PixelRect, usize, usize),
    #[error("image dimensions differ: {0}x{1}x{2} vs {3}x{4}x{5}")]
    DimensionMismatch(usize, usize, usize, usize, usize, usize),
    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
}

/// Where per-Gaussian embeddings come from during aggregation.
#[derive(Clone, Copy)]
pub(crate) enum Embeddings<'a> {
    /// Flat `N × d` table (baked, or precomputed from the grid).
    Table(&'a [f64]),
    /// Encode `μ_i` on demand.
    Grid(&'a HashGrid, &'a [Coord]),
}

/// Reusable buffers for allocation-free aggregation.
#[derive(Default)]
pub(crate) struct AggScratch {
    pub query: QueryScratch,
    pub neighbors: NeighborList,
    /// Unnormalized kernel weights (or inverse-distance weights on fallback).
    pub raw: Vec<f64>,
    /// Weights divided by their sum.
    pub weights: Vec<f64>,
    pub emb: Vec<f64>,
    pub total: f64,
    pub fallback: bool,
}

/// Aggregation result with the intermediate quantities exposed.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregation {
    pub embedding: Vec<f64>,
    pub neighbors: NeighborList,
    /// Normalized weights, parallel to `neighbors`; they sum to 1 whenever
    /// there is at least one neighbor.
    pub weights: Vec<f64>,
    pub coverage_miss: bool,
    /// Kernel weights underflowed and inverse-squared distances were used.
    pub fallback: bool,
}

/// Decoded sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub rgb: [f64; 3],
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ValidConfig,
    width: usize,
    height: usize,
    gaussians: GaussianSet,
    grid: Option<HashGrid>,
    color_mlp: Mlp,
    mask_mlp: Option<Mlp>,
    index: GridIndex,
    stats: TrainingStats,
}

/// Jittered-grid means over the domain box, `n` of them.
fn jittered_means(n: usize, extent: Coord, rng: &mut ChaCha8Rng) -> Vec<Coord> {
    let aspect = extent.x / extent.y;
    let nx = ((n as f64 * aspect).sqrt().round() as usize).max(1);
    let ny = n.div_ceil(nx);
    let (sx, sy) = (extent.x / nx as f64, extent.y / ny as f64);
    let mut cells: Vec<usize> = (0..nx * ny).collect();
    // Keep a random subset of exactly n cells, then restore scan order.
    let (kept, _) = cells.partial_shuffle(rng, n);
    let mut kept = kept.to_vec();
    kept.sort_unstable();
    kept.into_iter()
        .map(|c| {
            let (cx, cy) = ((c % nx) as f64, (c / nx) as f64);
            Coord::new(
                (cx + rng.random_range(0.0..1.0)) * sx,
                (cy + rng.random_range(0.0..1.0)) * sy,
            )
        })
        .collect()
}

impl Model {
    /// Fresh, untrained model for `image`.
    ///
    /// For RGBA images, Gaussians whose mean falls on a fully transparent
    /// pixel are dropped and a mask decoder is added.
    pub fn init(image: &ImageBuffer, cfg: ModelConfig, seed: u64) -> Result<Self, FieldError> {
        let config = cfg.validate()?;
        let (w, h) = (image.width(), image.height());
        if image.has_alpha() && image.data().chunks_exact(4).all(|p| p[3] == 0.0) {
            return Err(FieldError::EmptySupport);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = w.max(h) as f64;
        let mut means = jittered_means(config.n_gaussians, domain_extent(w, h), &mut rng);
        if image.has_alpha() {
            means.retain(|m| {
                let col = ((m.x * span) as usize).min(w - 1);
                let row = ((m.y * span) as usize).min(h - 1);
                image.alpha(row, col) > 0.0
            });
            if means.is_empty() {
                return Err(FieldError::EmptySupport);
            }
        }
        let log_s = (1.0 / (config.n_gaussians as f64).sqrt()).ln();
        let cov_params = vec![[log_s, log_s, 0.0]; means.len()];
        let grid = HashGrid::new(&config, rng.random());
        let color_mlp = Mlp::new(&config.mlp_widths(3), &mut rng)?;
        let mask_mlp = if image.has_alpha() {
            Some(Mlp::new(&config.mlp_widths(1), &mut rng)?)
        } else {
            None
        };
        let index = GridIndex::build(&means, config.knn_radius)?;
        let dim = config.embedding_dim();
        Ok(Self {
            config,
            width: w,
            height: h,
            gaussians: GaussianSet { means, cov_params, embeddings: None, dim },
            grid: Some(grid),
            color_mlp,
            mask_mlp,
            index,
            stats: TrainingStats::default(),
        })
    }

    /// Assembles a model from stored parts, checking every shape.
    pub fn from_parts(
        config: ValidConfig,
        width: usize,
        height: usize,
        gaussians: GaussianSet,
        grid: Option<HashGrid>,
        color_mlp: Mlp,
        mask_mlp: Option<Mlp>,
    ) -> Result<Self, FieldError> {
        let n = gaussians.means.len();
        let dim = config.embedding_dim();
        let shape = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(FieldError::Shape { what, expected, got })
            }
        };
        shape("embedding dim", dim, gaussians.dim)?;
        shape("covariance count", n, gaussians.cov_params.len())?;
        match (&gaussians.embeddings, &grid) {
            (Some(e), None) => shape("embedding values", n * dim, e.len())?,
            (None, Some(g)) => shape("grid output dim", dim, g.output_dim())?,
            (Some(_), Some(_)) => return Err(FieldError::AlreadyBaked),
            (None, None) => return Err(FieldError::NotBaked),
        }
        shape("color decoder input", dim, color_mlp.input_dim())?;
        shape("color decoder output", 3, color_mlp.output_dim())?;
        if let Some(m) = &mask_mlp {
            shape("mask decoder input", dim, m.input_dim())?;
            shape("mask decoder output", 1, m.output_dim())?;
        }
        let index = GridIndex::build(&gaussians.means, config.knn_radius)?;
        Ok(Self {
            config,
            width,
            height,
            gaussians,
            grid,
            color_mlp,
            mask_mlp,
            index,
            stats: TrainingStats::default(),
        })
    }

    pub fn config(&self) -> &ValidConfig {
        &self.config
    }

    /// Resolution of the image the model was fitted to.
    pub fn native_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn gaussians(&self) -> &GaussianSet {
        &self.gaussians
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn means(&self) -> &[Coord] {
        &self.gaussians.means
    }

    pub fn cov_params(&self) -> &[CovParams] {
        &self.gaussians.cov_params
    }

    pub fn cov_params_mut(&mut self) -> &mut [CovParams] {
        &mut self.gaussians.cov_params
    }

    pub fn grid(&self) -> Option<&HashGrid> {
        self.grid.as_ref()
    }

    pub fn grid_mut(&mut self) -> Option<&mut HashGrid> {
        self.grid.as_mut()
    }

    pub fn color_mlp(&self) -> &Mlp {
        &self.color_mlp
    }

    pub fn color_mlp_mut(&mut self) -> &mut Mlp {
        &mut self.color_mlp
    }

    pub fn mask_mlp(&self) -> Option<&Mlp> {
        self.mask_mlp.as_ref()
    }

    pub fn mask_mlp_mut(&mut self) -> Option<&mut Mlp> {
        self.mask_mlp.as_mut()
    }

    pub fn has_mask(&self) -> bool {
        self.mask_mlp.is_some()
    }

    pub fn is_baked(&self) -> bool {
        self.gaussians.is_baked()
    }

    pub fn index(&self) -> &GridIndex {
        &self.index
    }

    pub fn training_stats(&self) -> &TrainingStats {
        &self.stats
    }

    pub(crate) fn training_stats_mut(&mut self) -> &mut TrainingStats {
        &mut self.stats
    }

    /// Replaces all means and rebuilds the spatial index. Embeddings and
    /// decoder weights are untouched.
    pub fn set_means(&mut self, means: Vec<Coord>) -> Result<(), FieldError> {
        if means.len() != self.gaussians.len() {
            return Err(FieldError::Shape {
                what: "mean count",
                expected: self.gaussians.len(),
                got: means.len(),
            });
        }
        self.index = self.index.rebuild(&means)?;
        self.gaussians.means = means;
        Ok(())
    }

    pub(crate) fn embeddings(&self) -> Embeddings<'_> {
        match (&self.gaussians.embeddings, &self.grid) {
            (Some(table), _) => Embeddings::Table(table),
            (None, Some(grid)) => Embeddings::Grid(grid, &self.gaussians.means),
            (None, None) => unreachable!("model holds neither embeddings nor a grid"),
        }
    }

    /// All `N × d` embeddings, computed from the grid if not baked.
    pub fn embedding_table(&self) -> Vec<f64> {
        match &self.gaussians.embeddings {
            Some(e) => e.clone(),
            None => {
                let grid = self.grid.as_ref().expect("unbaked model has a grid");
                let d = self.gaussians.dim;
                let mut out = vec![0.0; self.len() * d];
                for (m, row) in self.gaussians.means.iter().zip(out.chunks_exact_mut(d)) {
                    grid.encode_into(*m, row);
                }
                out
            }
        }
    }

    /// Blends neighbor embeddings at `x` into `out`, leaving neighbor ids
    /// and weights in `scratch`.
    pub(crate) fn aggregate_into(
        &self,
        x: Coord,
        src: Embeddings<'_>,
        scratch: &mut AggScratch,
        out: &mut [f64],
    ) {
        let cfg = &self.config;
        self.index
            .query_into(x, cfg.knn_radius, cfg.knn_k, &mut scratch.query, &mut scratch.neighbors);
        out.fill(0.0);
        scratch.raw.clear();
        scratch.weights.clear();
        scratch.fallback = false;
        scratch.total = 0.0;
        if scratch.neighbors.is_empty() {
            return;
        }
        let means = &self.gaussians.means;
        let covs = &self.gaussians.cov_params;
        for &i in &scratch.neighbors.indices {
            let m = means[i as usize];
            let q = mahalanobis_sq(&covs[i as usize], x.x - m.x, x.y - m.y);
            scratch.raw.push((-0.5 * q).exp());
        }
        let mut total: f64 = scratch.raw.iter().sum();
        if total < WEIGHT_UNDERFLOW {
            scratch.fallback = true;
            scratch.raw.clear();
            scratch.raw.extend(scratch.neighbors.sq_dists.iter().map(|&d2| 1.0 / d2));
            total = scratch.raw.iter().sum();
        }
        scratch.total = total;
        scratch.weights.extend(scratch.raw.iter().map(|w| w / total));

        let d = out.len();
        for (k, &i) in scratch.neighbors.indices.iter().enumerate() {
            let w = scratch.weights[k];
            let e: &[f64] = match src {
                Embeddings::Table(t) => &t[i as usize * d..(i as usize + 1) * d],
                Embeddings::Grid(grid, means) => {
                    scratch.emb.resize(d, 0.0);
                    grid.encode_into(means[i as usize], &mut scratch.emb);
                    &scratch.emb
                }
            };
            for (o, v) in out.iter_mut().zip(e) {
                *o += w * v;
            }
        }
    }

    /// Aggregated embedding at `x` with its neighbors and weights.
    pub fn aggregate(&self, x: Coord) -> Aggregation {
        let mut scratch = AggScratch::default();
        let mut embedding = vec![0.0; self.gaussians.dim];
        self.aggregate_into(x, self.embeddings(), &mut scratch, &mut embedding);
        Aggregation {
            embedding,
            coverage_miss: scratch.neighbors.is_empty(),
            fallback: scratch.fallback,
            neighbors: scratch.neighbors,
            weights: scratch.weights,
        }
    }

    /// Runs the decoders on an already aggregated embedding.
    pub fn decode_embedding(&self, embedding: &[f64]) -> Result<Decoded, FieldError> {
        let mut cache = MlpCache::default();
        self.decode_with(embedding, &mut cache)
    }

    pub(crate) fn decode_with(
        &self,
        embedding: &[f64],
        cache: &mut MlpCache,
    ) -> Result<Decoded, FieldError> {
        self.color_mlp.forward(embedding, cache)?;
        let c = cache.output();
        let rgb = [c[0], c[1], c[2]];
        let alpha = match &self.mask_mlp {
            Some(m) => {
                m.forward(embedding, cache)?;
                Some(cache.output()[0])
            }
            None => None,
        };
        Ok(Decoded { rgb, alpha })
    }

    /// Color (and alpha, when a mask head exists) at `x`.
    pub fn decode(&self, x: Coord) -> Decoded {
        let agg = self.aggregate(x);
        self.decode_embedding(&agg.embedding)
            .expect("embedding width matches decoder input by construction")
    }

    /// Precomputes `e_i = H(μ_i)` for every Gaussian and drops the grid.
    pub fn bake(mut self) -> Result<Self, FieldError> {
        if self.is_baked() {
            return Err(FieldError::AlreadyBaked);
        }
        let table = self.embedding_table();
        self.gaussians.embeddings = Some(table);
        self.grid = None;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            n_gaussians: 200,
            knn_k: 8,
            knn_radius: 0.15,
            grid_levels: 3,
            features_per_level: 2,
            min_res: 4,
            max_res: 32,
            hash_table_log2: 8,
            mlp_hidden_layers: 1,
            mlp_hidden_width: 8,
            batch_size: 64,
            iterations: 10,
            ..Default::default()
        }
    }

    fn flat(w: usize, h: usize, rgb: [f64; 3]) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 3, |_, _| rgb.to_vec()).unwrap()
    }

    #[test]
    fn rgb_keeps_every_gaussian() {
        let m = Model::init(&flat(16, 16, [0.2, 0.4, 0.6]), toy_config(), 1).unwrap();
        assert_eq!(m.len(), 200);
        assert!(!m.has_mask());
        assert!(m.index().is_current(m.means()));
        let ext = domain_extent(16, 16);
        assert!(m.means().iter().all(|c| c.x >= 0.0 && c.x <= ext.x && c.y >= 0.0 && c.y <= ext.y));
    }

    #[test]
    fn wide_images_keep_means_in_box() {
        let m = Model::init(&flat(32, 8, [0.5; 3]), toy_config(), 2).unwrap();
        assert_eq!(m.len(), 200);
        assert!(m.means().iter().all(|c| c.y <= 0.25 && c.x <= 1.0));
    }

    #[test]
    fn alpha_prunes_transparent_means() {
        let img = ImageBuffer::from_fn(20, 20, 4, |_, col| {
            vec![0.5, 0.5, 0.5, if col < 10 { 1.0 } else { 0.0 }]
        })
        .unwrap();
        let m = Model::init(&img, toy_config(), 3).unwrap();
        assert!(m.len() < 200 && m.len() > 50);
        assert!(m.has_mask());
        for c in m.means() {
            let col = (c.x * 20.0) as usize;
            assert!(img.alpha((c.y * 20.0) as usize, col) > 0.0);
            assert!(c.x <= 0.5);
        }
    }

    #[test]
    fn all_transparent_is_error() {
        let img = ImageBuffer::from_fn(8, 8, 4, |_, _| vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(matches!(Model::init(&img, toy_config(), 0), Err(FieldError::EmptySupport)));
    }

    #[test]
    fn zero_decoder_gives_half_gray() {
        let mut m = Model::init(&flat(8, 8, [0.1; 3]), toy_config(), 4).unwrap();
        m.color_mlp_mut().params_mut().fill(0.0);
        let d = m.decode(Coord::new(0.3, 0.4));
        assert_eq!(d.rgb, [0.5; 3]);
    }

    #[test]
    fn single_neighbor_returns_its_embedding() {
        let mut cfg = toy_config();
        cfg.n_gaussians = 4;
        cfg.knn_radius = 0.05;
        let m = Model::init(&flat(8, 8, [0.1; 3]), cfg, 5).unwrap().bake().unwrap();
        let mu = m.means()[2];
        let agg = m.aggregate(mu);
        assert_eq!(agg.neighbors.indices, vec![2]);
        assert_eq!(agg.embedding, m.gaussians().embedding(2).unwrap());
    }

    #[test]
    fn zero_coverage_uses_zero_embedding() {
        let mut cfg = toy_config();
        cfg.knn_radius = 0.01;
        cfg.n_gaussians = 4;
        let m = Model::init(&flat(8, 8, [0.1; 3]), cfg, 6).unwrap();
        let agg = m.aggregate(Coord::new(5.0, 5.0));
        assert!(agg.coverage_miss);
        assert!(agg.embedding.iter().all(|&v| v == 0.0));
        let expected = m.decode_embedding(&agg.embedding).unwrap();
        assert_eq!(m.decode(Coord::new(5.0, 5.0)), expected);
    }

    #[test]
    fn underflow_falls_back_to_inverse_distance() {
        let mut m = Model::init(&flat(8, 8, [0.1; 3]), toy_config(), 7).unwrap();
        for p in m.cov_params_mut() {
            *p = [-20.0, -20.0, 0.0];
        }
        let x = Coord::new(0.51, 0.49);
        let agg = m.aggregate(x);
        assert!(agg.fallback);
        assert!(agg.embedding.iter().all(|v| v.is_finite()));
        let s: f64 = agg.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        // Closest neighbor has the largest weight.
        assert!(agg.weights.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn bake_is_exact_and_once() {
        let m = Model::init(&flat(8, 8, [0.1; 3]), toy_config(), 8).unwrap();
        let xs: Vec<Coord> =
            (0..50).map(|i| Coord::new((i as f64 * 0.37) % 1.0, (i as f64 * 0.61) % 1.0)).collect();
        let before: Vec<Decoded> = xs.iter().map(|&x| m.decode(x)).collect();
        let baked = m.bake().unwrap();
        assert!(baked.grid().is_none());
        let after: Vec<Decoded> = xs.iter().map(|&x| baked.decode(x)).collect();
        assert_eq!(before, after);
        assert!(matches!(baked.bake(), Err(FieldError::AlreadyBaked)));
    }
}
