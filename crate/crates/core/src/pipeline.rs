//! End-to-end fitting: init, train, bake, and evaluate the result as it
//! will be stored.

use std::ops::ControlFlow;

use crate::field::{psnr, train, FieldError, Model, TrainOptions, TrainRecord, TrainingStats};
use crate::io::{quantize_image, reload};
use crate::types::{ImageBuffer, ModelConfig};

#[derive(Clone, Debug)]
pub struct Fitted {
    /// Baked model with `f32`-rounded parameters, identical to what loading
    /// its checkpoint yields.
    pub model: Model,
    /// PSNR of the full native render, quantized to 8 bits as it would be
    /// saved, against the training image.
    pub psnr: f64,
    /// Validation records and per-step statistics of the run.
    pub stats: TrainingStats,
}

/// Initializes from `cfg.rng_seed`, trains, bakes and reloads.
pub fn fit(
    image: &ImageBuffer,
    cfg: ModelConfig,
    opts: &TrainOptions,
    progress: impl FnMut(&TrainRecord) -> ControlFlow<()>,
) -> Result<Fitted, FieldError> {
    let seed = cfg.rng_seed;
    let model = Model::init(image, cfg, seed)?;
    let model = train(model, image, opts, progress)?;
    let stats = model.training_stats().clone();
    let model = reload(&model.bake()?);
    let psnr = psnr(&quantize_image(&model.render_native()?), image)?;
    Ok(Fitted { model, psnr, stats })
}
