//! File formats: PNG images, checkpoints, edit scripts and animation
//! manifests. All binary data is little-endian `f32`.

pub mod checkpoint;
pub mod image;
pub mod manifest;
pub mod script;

pub use checkpoint::{load_checkpoint, reload, save_checkpoint, CheckpointError};
pub use image::{decode_png, encode_png, load_image, quantize_image, save_image, ImageIoError};
pub use manifest::{parse_animation_manifest, write_frame, AnimationManifest, ManifestError};
pub use script::{parse_edit_script, ScriptError};
