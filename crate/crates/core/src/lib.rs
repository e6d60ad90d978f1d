//! Neural image fields anchored on 2D Gaussian components.
//!
//! An image is represented by a set of Gaussians with learnable
//! covariances and per-Gaussian embeddings. A query point gathers its
//! radius-limited nearest Gaussians, blends their embeddings with the
//! Gaussian kernel weights and decodes the blend with a small MLP. During
//! training the embeddings come from a multi-resolution hash grid sampled
//! at each mean; baking freezes them into a plain table, after which the
//! means can be moved to edit or animate the image.
//!
//! ```no_run
//! use gaussfield::{io, Model, ModelConfig};
//!
//! let image = io::load_image("input.png")?;
//! let model = Model::init(&image, ModelConfig::default(), 0)?;
//! let model = gaussfield::train(model, &image, &Default::default(), |_| std::ops::ControlFlow::Continue(()))?;
//! let model = model.bake()?;
//! io::save_image(&model.render_native()?, "out.png")?;
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod edit;
pub mod encoding;
pub mod field;
pub mod io;
pub mod net;
pub mod pipeline;
pub mod spatial;
pub mod types;

pub use edit::{
    apply_ops, apply_transform, composite_over, replay_animation, select, EditError, EditOp,
    Selection, Transform,
};
pub use field::{
    psnr, train, Aggregation, Decoded, FieldError, Model, PixelRect, TrainOptions, TrainRecord,
};
pub use pipeline::{fit, Fitted};
pub use types::{Coord, ImageBuffer, ModelConfig, ValidConfig};
