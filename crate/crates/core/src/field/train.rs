//! Batch sampling, full-pipeline gradients and the optimization loop.
//!
//! Optimized parameters are the hash-grid tables, the covariance parameters
//! and both decoders. Means stay where initialization put them.
//!
//! Gradients are computed in fixed-size chunks of the batch (in parallel)
//! and merged sequentially in chunk order, so results do not depend on the
//! thread count.

use std::ops::ControlFlow;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{AggScratch, Embeddings, FieldError, Model};
use crate::field::metrics::psnr_from_mse;
use crate::net::{adam_step, smooth_l1_grad_into, smooth_l1_sum, AdamState, Mlp, MlpCache};
use crate::types::{normalize_coords, Coord, CovParams, ImageBuffer, ModelConfig};

const CHUNK: usize = 256;

/// One optimization batch. Color samples come from pixels with nonzero
/// alpha; mask samples (RGBA only) from every pixel.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainBatch {
    pub coords: Vec<Coord>,
    pub targets: Vec<[f64; 3]>,
    pub mask_coords: Vec<Coord>,
    pub alpha_targets: Vec<f64>,
}

/// Uniform pixel sampler over a fixed image.
pub struct BatchSampler<'a> {
    image: &'a ImageBuffer,
    /// Pixels eligible for the color loss (alpha > 0), row-major ids.
    color_pixels: Vec<u32>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(image: &'a ImageBuffer) -> Result<Self, FieldError> {
        let n = image.width() * image.height();
        let color_pixels: Vec<u32> = (0..n as u32)
            .filter(|&p| {
                let p = p as usize;
                image.alpha(p / image.width(), p % image.width()) > 0.0
            })
            .collect();
        if color_pixels.is_empty() {
            return Err(FieldError::EmptySupport);
        }
        Ok(Self { image, color_pixels })
    }

    pub fn color_pixels(&self) -> &[u32] {
        &self.color_pixels
    }

    fn coord(&self, pixel: usize) -> Coord {
        let w = self.image.width();
        normalize_coords(pixel / w, pixel % w, w, self.image.height())
            .expect("pixel id within image")
    }

    /// Draws `m` color samples (and `m` mask samples for RGBA), with
    /// replacement.
    pub fn sample(&self, m: usize, rng: &mut impl Rng) -> TrainBatch {
        let w = self.image.width();
        let mut batch = TrainBatch::default();
        for _ in 0..m {
            let p = self.color_pixels[rng.random_range(0..self.color_pixels.len())] as usize;
            batch.coords.push(self.coord(p));
            batch.targets.push(self.image.rgb(p / w, p % w));
        }
        if self.image.has_alpha() {
            let n = self.image.width() * self.image.height();
            for _ in 0..m {
                let p = rng.random_range(0..n);
                batch.mask_coords.push(self.coord(p));
                batch.alpha_targets.push(self.image.alpha(p / w, p % w));
            }
        }
        batch
    }
}

/// Convenience wrapper building a sampler for a single batch.
pub fn sample_batch(
    image: &ImageBuffer,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<TrainBatch, FieldError> {
    Ok(BatchSampler::new(image)?.sample(cfg.batch_size, rng))
}

/// Loss gradients for every trainable parameter class.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub tables: Vec<f64>,
    pub cov: Vec<CovParams>,
    pub color_mlp: Vec<f64>,
    pub mask_mlp: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Mean squared RGB error of the color samples.
    pub color_mse: f64,
}

struct Contrib {
    gaussian: u32,
    weight: f64,
    cov: [f64; 3],
}

struct ChunkOut {
    loss: f64,
    sq_err: f64,
    mlp_grad: Vec<f64>,
    /// Loss gradient w.r.t. the aggregated embedding, per sample.
    upstream: Vec<f64>,
    spans: Vec<(u32, u32)>,
    contribs: Vec<Contrib>,
}

struct SampleSet<'a> {
    coords: &'a [Coord],
    targets: &'a [f64],
    mlp: &'a Mlp,
    outputs: usize,
}

fn run_chunk(model: &Model, table: &[f64], set: &SampleSet<'_>, start: usize, end: usize, scale: f64) -> ChunkOut {
    let d = model.gaussians.dim;
    let beta = model.config.smooth_l1_beta;
    let n = end - start;
    let mut out = ChunkOut {
        loss: 0.0,
        sq_err: 0.0,
        mlp_grad: vec![0.0; set.mlp.params().len()],
        upstream: vec![0.0; n * d],
        spans: Vec::with_capacity(n),
        contribs: Vec::with_capacity(n * model.config.knn_k),
    };
    let mut scratch = AggScratch::default();
    let mut cache = MlpCache::default();
    let mut e = vec![0.0; d];
    let mut up = vec![0.0; set.outputs];
    let means = &model.gaussians.means;
    let covs = &model.gaussians.cov_params;

    for (s, j) in (start..end).enumerate() {
        let x = set.coords[j];
        let target = &set.targets[j * set.outputs..(j + 1) * set.outputs];
        model.aggregate_into(x, Embeddings::Table(table), &mut scratch, &mut e);
        set.mlp.forward(&e, &mut cache).expect("decoder input width");
        let pred = cache.output();
        out.loss += smooth_l1_sum(pred, target, beta);
        out.sq_err += pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        smooth_l1_grad_into(pred, target, beta, scale, &mut up);
        let g = &mut out.upstream[s * d..(s + 1) * d];
        set.mlp.backward(&cache, &up, &mut out.mlp_grad, g).expect("shapes match");

        let first = out.contribs.len() as u32;
        for (k, &i) in scratch.neighbors.indices.iter().enumerate() {
            let mut cov = [0.0; 3];
            if !scratch.fallback {
                // dL/dw_k = g · (e_i − e) / W for the unnormalized weight.
                let ei = &table[i as usize * d..(i as usize + 1) * d];
                let dl_dw: f64 =
                    g.iter().zip(ei).zip(&e).map(|((g, a), b)| g * (a - b)).sum::<f64>()
                        / scratch.total;
                let w = scratch.raw[k];
                let p = &covs[i as usize];
                let m = means[i as usize];
                let (dx, dy) = (x.x - m.x, x.y - m.y);
                let (sn, cs) = p[2].sin_cos();
                let u = cs * dx + sn * dy;
                let v = -sn * dx + cs * dy;
                let ia = (-2.0 * p[0]).exp();
                let ib = (-2.0 * p[1]).exp();
                // w = exp(-q/2), q = u²·ia + v²·ib.
                cov = [
                    dl_dw * w * u * u * ia,
                    dl_dw * w * v * v * ib,
                    -dl_dw * w * u * v * (ia - ib),
                ];
            }
            out.contribs.push(Contrib { gaussian: i, weight: scratch.weights[k], cov });
        }
        out.spans.push((first, out.contribs.len() as u32));
    }
    out
}

/// Loss and exact gradients for one batch on an unbaked model.
pub fn loss_and_grads(model: &Model, batch: &TrainBatch) -> Result<(StepStats, ModelGrads), FieldError> {
    let grid = model.grid.as_ref().ok_or(FieldError::Baked)?;
    if batch.coords.len() != batch.targets.len() {
        return Err(FieldError::Shape {
            what: "color targets",
            expected: batch.coords.len(),
            got: batch.targets.len(),
        });
    }
    if batch.mask_coords.len() != batch.alpha_targets.len() {
        return Err(FieldError::Shape {
            what: "alpha targets",
            expected: batch.mask_coords.len(),
            got: batch.alpha_targets.len(),
        });
    }
    let n = model.len();
    let d = model.gaussians.dim;
    let table = model.embedding_table();
    let color_targets: Vec<f64> = batch.targets.iter().flatten().copied().collect();

    let mut emb_grad = vec![0.0; n * d];
    let mut cov_grad = vec![[0.0; 3]; n];
    let mut color_grad = vec![0.0; model.color_mlp.params().len()];
    let mut mask_grad = model.mask_mlp.as_ref().map(|m| vec![0.0; m.params().len()]);

    let mut merge = |set: &SampleSet<'_>, mlp_grad: &mut [f64]| -> (f64, f64) {
        let m = set.coords.len();
        if m == 0 {
            return (0.0, 0.0);
        }
        let scale = 1.0 / (m * set.outputs) as f64;
        let chunks: Vec<ChunkOut> = (0..m.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| run_chunk(model, &table, set, c * CHUNK, ((c + 1) * CHUNK).min(m), scale))
            .collect();
        let (mut loss, mut sq) = (0.0, 0.0);
        for ch in chunks {
            loss += ch.loss;
            sq += ch.sq_err;
            for (a, b) in mlp_grad.iter_mut().zip(&ch.mlp_grad) {
                *a += b;
            }
            for (s, &(a, b)) in ch.spans.iter().enumerate() {
                let g = &ch.upstream[s * d..(s + 1) * d];
                for c in &ch.contribs[a as usize..b as usize] {
                    let i = c.gaussian as usize;
                    for (eg, gv) in emb_grad[i * d..(i + 1) * d].iter_mut().zip(g) {
                        *eg += c.weight * gv;
                    }
                    for (cg, v) in cov_grad[i].iter_mut().zip(&c.cov) {
                        *cg += v;
                    }
                }
            }
        }
        (loss * scale, sq / (m * set.outputs) as f64)
    };

    let color_set = SampleSet {
        coords: &batch.coords,
        targets: &color_targets,
        mlp: &model.color_mlp,
        outputs: 3,
    };
    let (color_loss, color_mse) = merge(&color_set, &mut color_grad);
    let mut mask_loss = 0.0;
    if let (Some(mlp), Some(grad)) = (&model.mask_mlp, mask_grad.as_mut()) {
        let set = SampleSet {
            coords: &batch.mask_coords,
            targets: &batch.alpha_targets,
            mlp,
            outputs: 1,
        };
        mask_loss = merge(&set, grad).0;
    }

    let mut tables = vec![0.0; grid.tables().len()];
    for (m, g) in model.gaussians.means.iter().zip(emb_grad.chunks_exact(d)) {
        if g.iter().any(|&v| v != 0.0) {
            grid.accumulate_backward(*m, g, &mut tables);
        }
    }
    Ok((
        StepStats { loss: color_loss + mask_loss, color_mse },
        ModelGrads { tables, cov: cov_grad, color_mlp: color_grad, mask_mlp: mask_grad },
    ))
}

/// Adam state for every parameter class of a model under training.
pub struct Trainer {
    model: Model,
    tables: AdamState,
    cov: AdamState,
    color: AdamState,
    mask: Option<AdamState>,
    iteration: usize,
}

impl Trainer {
    pub fn new(model: Model) -> Result<Self, FieldError> {
        let grid = model.grid.as_ref().ok_or(FieldError::Baked)?;
        let cfg = &model.config;
        Ok(Self {
            tables: AdamState::new(grid.tables().len(), cfg.lr_grid),
            cov: AdamState::new(model.len() * 3, cfg.lr_grid),
            color: AdamState::new(model.color_mlp.params().len(), cfg.lr_mlp),
            mask: model.mask_mlp.as_ref().map(|m| AdamState::new(m.params().len(), cfg.lr_mlp)),
            iteration: 0,
            model,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Cosine decay from 1 to 0.1 over the configured iteration count.
    pub fn lr_factor(&self) -> f64 {
        let total = self.model.config.iterations;
        if total == 0 {
            return 1.0;
        }
        let t = (self.iteration as f64 / total as f64).min(1.0);
        0.1 + 0.45 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<StepStats, FieldError> {
        let (stats, grads) = loss_and_grads(&self.model, batch)?;
        let f = self.lr_factor();
        let cfg = self.model.config.clone();
        self.tables.lr = cfg.lr_grid * f;
        self.cov.lr = cfg.lr_grid * f;
        self.color.lr = cfg.lr_mlp * f;
        let grid = self.model.grid.as_mut().ok_or(FieldError::Baked)?;
        adam_step(grid.tables_mut(), &grads.tables, &mut self.tables)?;
        adam_step(
            self.model.gaussians.cov_params.as_flattened_mut(),
            grads.cov.as_flattened(),
            &mut self.cov,
        )?;
        adam_step(self.model.color_mlp.params_mut(), &grads.color_mlp, &mut self.color)?;
        if let (Some(mlp), Some(state), Some(g)) =
            (self.model.mask_mlp.as_mut(), self.mask.as_mut(), grads.mask_mlp.as_ref())
        {
            state.lr = cfg.lr_mlp * f;
            adam_step(mlp.params_mut(), g, state)?;
        }
        self.iteration += 1;
        Ok(stats)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Validation PSNR is recorded every this many iterations (and at the end).
    pub log_every: usize,
    /// Size of the fixed validation subsample.
    pub validation_pixels: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { log_every: 100, validation_pixels: 4096 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub loss: f64,
    pub psnr: f64,
}

/// Training history: periodic validation records plus per-step batch
/// statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingStats {
    pub records: Vec<TrainRecord>,
    pub step_loss: Vec<f64>,
    /// Batch PSNR of every step, from the color MSE.
    pub step_psnr: Vec<f64>,
}

fn validation_psnr(model: &Model, image: &ImageBuffer, pixels: &[u32]) -> f64 {
    let table = model.embedding_table();
    let (w, h) = (image.width(), image.height());
    let d = model.gaussians.dim;
    let sq: f64 = pixels
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut scratch = AggScratch::default();
            let mut cache = MlpCache::default();
            let mut e = vec![0.0; d];
            let mut acc = 0.0;
            for &p in chunk {
                let (row, col) = (p as usize / w, p as usize % w);
                let x = normalize_coords(row, col, w, h).expect("pixel in range");
                model.aggregate_into(x, Embeddings::Table(&table), &mut scratch, &mut e);
                model.color_mlp.forward(&e, &mut cache).expect("decoder input width");
                let t = image.rgb(row, col);
                acc += cache.output().iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            acc
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    psnr_from_mse(sq / (3 * pixels.len()) as f64)
}

/// Runs `config.iterations` steps on `image`, recording validation PSNR
/// every `opts.log_every` iterations and after the last one. `progress`
/// sees each record and may stop training early by returning `Break`.
pub fn train(
    model: Model,
    image: &ImageBuffer,
    opts: &TrainOptions,
    mut progress: impl FnMut(&TrainRecord) -> ControlFlow<()>,
) -> Result<Model, FieldError> {
    let iterations = model.config.iterations;
    if iterations == 0 {
        return Ok(model);
    }
    let (w, h) = model.native_size();
    if (image.width(), image.height()) != (w, h) {
        return Err(FieldError::DimensionMismatch(
            w, h, 3, image.width(), image.height(), image.channels(),
        ));
    }
    let sampler = BatchSampler::new(image)?;
    let seed = model.config.rng_seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_6865_7321);
    let val_pixels: Vec<u32> = {
        let pool = sampler.color_pixels();
        let mut vrng = ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c69_6461_7465);
        let k = opts.validation_pixels.min(pool.len()).max(1);
        let mut picked: Vec<u32> =
            sample_indices(&mut vrng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
        picked.sort_unstable();
        picked
    };
    let batch_size = model.config.batch_size;
    let log_every = opts.log_every.max(1);
    let mut trainer = Trainer::new(model)?;
    let mut stats = std::mem::take(trainer.model.training_stats_mut());
    for it in 1..=iterations {
        let batch = sampler.sample(batch_size, &mut rng);
        let step = trainer.train_step(&batch)?;
        stats.step_loss.push(step.loss);
        stats.step_psnr.push(psnr_from_mse(step.color_mse));
        if it % log_every == 0 || it == iterations {
            let record = TrainRecord {
                iter: it,
                loss: step.loss,
                psnr: validation_psnr(&trainer.model, image, &val_pixels),
            };
            stats.records.push(record);
            if progress(&record).is_break() {
                break;
            }
        }
    }
    *trainer.model.training_stats_mut() = stats;
    Ok(trainer.into_model())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::tests::toy_config;

    fn rgba_half() -> ImageBuffer {
        ImageBuffer::from_fn(10, 10, 4, |row, col| {
            let a = if row < 2 && col < 5 { 1.0 } else { 0.0 };
            vec![0.3, 0.6, 0.9, a]
        })
        .unwrap()
    }

    #[test]
    fn rgb_batch_hits_pixel_centers() {
        let img = ImageBuffer::from_fn(2, 2, 3, |r, c| vec![r as f64, c as f64, 0.5]).unwrap();
        let cfg = ModelConfig { batch_size: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&img, &cfg, &mut rng).unwrap();
        assert_eq!(b.coords.len(), 4);
        assert!(b.mask_coords.is_empty());
        for (c, t) in b.coords.iter().zip(&b.targets) {
            assert!([0.25, 0.75].contains(&c.x) && [0.25, 0.75].contains(&c.y));
            assert_eq!(t[0], if c.y < 0.5 { 0.0 } else { 1.0 });
            assert_eq!(t[1], if c.x < 0.5 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn rgba_color_batch_stays_on_opaque_pixels() {
        let img = rgba_half();
        let sampler = BatchSampler::new(&img).unwrap();
        assert_eq!(sampler.color_pixels().len(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sampler.sample(1000, &mut rng);
        for c in &b.coords {
            let (row, col) = ((c.y * 10.0) as usize, (c.x * 10.0) as usize);
            assert!(row < 2 && col < 5);
        }
        assert_eq!(b.alpha_targets.len(), 1000);
        assert!(b.alpha_targets.iter().all(|&a| a == 0.0 || a == 1.0));
        assert!(b.alpha_targets.iter().any(|&a| a == 0.0));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let img = ImageBuffer::from_fn(12, 12, 3, |r, c| vec![r as f64 / 12.0, c as f64 / 12.0, 0.5]).unwrap();
        let cfg = ModelConfig { lr_grid: 0.0, lr_mlp: 0.0, ..toy_config() };
        let model = Model::init(&img, cfg.clone(), 3).unwrap();
        let before = model.clone();
        let mut trainer = Trainer::new(model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = sample_batch(&img, &cfg, &mut rng).unwrap();
        trainer.train_step(&batch).unwrap();
        let after = trainer.into_model();
        assert_eq!(before.grid().unwrap().tables(), after.grid().unwrap().tables());
        assert_eq!(before.cov_params(), after.cov_params());
        assert_eq!(before.color_mlp().params(), after.color_mlp().params());
    }

    #[test]
    fn baked_model_cannot_train() {
        let img = ImageBuffer::from_fn(8, 8, 3, |_, _| vec![0.5; 3]).unwrap();
        let m = Model::init(&img, toy_config(), 5).unwrap().bake().unwrap();
        assert!(matches!(Trainer::new(m.clone()), Err(FieldError::Baked)));
        assert!(matches!(loss_and_grads(&m, &TrainBatch::default()), Err(FieldError::Baked)));
    }

    #[test]
    fn zero_iterations_is_identity() {
        let img = ImageBuffer::from_fn(8, 8, 3, |_, _| vec![0.5; 3]).unwrap();
        let cfg = ModelConfig { iterations: 0, ..toy_config() };
        let m = Model::init(&img, cfg, 6).unwrap();
        let before = m.clone();
        let after = train(m, &img, &TrainOptions::default(), |_| ControlFlow::Continue(())).unwrap();
        assert_eq!(before.grid().unwrap().tables(), after.grid().unwrap().tables());
        assert!(after.training_stats().records.is_empty());
    }

    #[test]
    fn gradients_are_thread_count_independent() {
        let img = ImageBuffer::from_fn(16, 16, 3, |r, c| vec![r as f64 / 16.0, c as f64 / 16.0, 0.2]).unwrap();
        let cfg = ModelConfig { batch_size: 700, ..toy_config() };
        let m = Model::init(&img, cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = sample_batch(&img, &cfg, &mut rng).unwrap();
        let a = loss_and_grads(&m, &batch).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| loss_and_grads(&m, &batch).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn constant_image_loss_decreases() {
        let img = ImageBuffer::from_fn(16, 16, 3, |_, _| vec![0.8, 0.3, 0.1]).unwrap();
        let cfg = ModelConfig { iterations: 50, batch_size: 256, ..toy_config() };
        let m = Model::init(&img, cfg, 9).unwrap();
        let opts = TrainOptions { log_every: 10, validation_pixels: 64 };
        let m = train(m, &img, &opts, |_| ControlFlow::Continue(())).unwrap();
        let losses = &m.training_stats().step_loss;
        assert_eq!(losses.len(), 50);
        let smooth: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{smooth:?}");
        assert_eq!(m.training_stats().records.len(), 5);
    }

    #[test]
    fn progress_can_stop_training() {
        let img = ImageBuffer::from_fn(8, 8, 3, |_, _| vec![0.5; 3]).unwrap();
        let cfg = ModelConfig { iterations: 100, ..toy_config() };
        let m = Model::init(&img, cfg, 10).unwrap();
        let opts = TrainOptions { log_every: 10, validation_pixels: 16 };
        let m = train(m, &img, &opts, |r| {
            if r.iter >= 30 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) }
        })
        .unwrap();
        assert_eq!(m.training_stats().step_loss.len(), 30);
    }
}
