//! Geometry edits on baked models: selections over Gaussian means, rigid
//! and axis-aligned transforms, animation replay and alpha compositing.
//!
//! Edits move means (and re-orient covariances for rotations and scales);
//! embeddings and decoder weights are never touched.

use thiserror::Error;

use crate::field::{FieldError, Model};
use crate::io::manifest::{AnimationManifest, ManifestError};
use crate::types::{Coord, ImageBuffer, ImageBufferError};

#[derive(Debug, Error)]
pub enum EditError {
    #[error("edits need a baked model")]
    NotBaked,
    #[error("gaussian index {index} out of range (N = {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("polygon needs at least 3 vertices, got {0}")]
    DegeneratePolygon(usize),
    #[error("rect min must not exceed max component-wise")]
    InvalidRect,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("scale factors must be nonzero")]
    ZeroScale,
    #[error("displacement has {got} offsets for {expected} selected gaussians")]
    DisplaceLength { expected: usize, got: usize },
    #[error("manifest describes {manifest} gaussians but the model has {model}")]
    CountMismatch { manifest: usize, model: usize },
    #[error("foreground must be RGBA")]
    ForegroundNotRgba,
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Image(#[from] ImageBufferError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    All,
    Indices(Vec<usize>),
    /// Inclusive axis-aligned box.
    Rect { min: Coord, max: Coord },
    /// Even-odd rule.
    Polygon(Vec<Coord>),
}

impl Selection {
    pub fn validate(&self) -> Result<(), EditError> {
        match self {
            Selection::All | Selection::Indices(_) => Ok(()),
            Selection::Rect { min, max } => {
                if !min.is_finite() || !max.is_finite() {
                    Err(EditError::NonFinite("rect corner"))
                } else if min.x > max.x || min.y > max.y {
                    Err(EditError::InvalidRect)
                } else {
                    Ok(())
                }
            }
            Selection::Polygon(v) => {
                if v.len() < 3 {
                    Err(EditError::DegeneratePolygon(v.len()))
                } else if v.iter().any(|c| !c.is_finite()) {
                    Err(EditError::NonFinite("polygon vertex"))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn contains(&self, p: Coord) -> bool {
        match self {
            Selection::All => true,
            Selection::Indices(_) => false,
            Selection::Rect { min, max } => {
                p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y
            }
            Selection::Polygon(v) => point_in_polygon(p, v),
        }
    }
}

/// Even-odd crossing test.
pub fn point_in_polygon(p: Coord, vertices: &[Coord]) -> bool {
    let mut inside = false;
    let mut j = vertices.len() - 1;
    for i in 0..vertices.len() {
        let (a, b) = (vertices[i], vertices[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Indices of the means inside `sel`, ascending.
pub fn select(means: &[Coord], sel: &Selection) -> Result<Vec<usize>, EditError> {
    sel.validate()?;
    match sel {
        Selection::Indices(ix) => {
            let mut ix = ix.clone();
            if let Some(&bad) = ix.iter().find(|&&i| i >= means.len()) {
                return Err(EditError::IndexOutOfRange { index: bad, len: means.len() });
            }
            ix.sort_unstable();
            ix.dedup();
            Ok(ix)
        }
        _ => Ok((0..means.len()).filter(|&i| sel.contains(means[i])).collect()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    Translate(Coord),
    /// Counter-clockwise rotation by `angle` radians.
    Rotate { center: Coord, angle: f64 },
    /// Axis-aligned scale about `center`.
    Scale { center: Coord, sx: f64, sy: f64 },
    /// Per-selected-Gaussian offsets, in selection order.
    Displace(Vec<Coord>),
}

impl Transform {
    pub fn validate(&self) -> Result<(), EditError> {
        let finite = match self {
            Transform::Translate(v) => v.is_finite(),
            Transform::Rotate { center, angle } => center.is_finite() && angle.is_finite(),
            Transform::Scale { center, sx, sy } => {
                if *sx == 0.0 || *sy == 0.0 {
                    return Err(EditError::ZeroScale);
                }
                center.is_finite() && sx.is_finite() && sy.is_finite()
            }
            Transform::Displace(off) => off.iter().all(|c| c.is_finite()),
        };
        if finite {
            Ok(())
        } else {
            Err(EditError::NonFinite("transform parameter"))
        }
    }

    /// Inverse transform; `None` for displacements.
    pub fn inverse(&self) -> Option<Transform> {
        Some(match self {
            Transform::Translate(v) => Transform::Translate(Coord::new(-v.x, -v.y)),
            Transform::Rotate { center, angle } => Transform::Rotate { center: *center, angle: -angle },
            Transform::Scale { center, sx, sy } => {
                Transform::Scale { center: *center, sx: 1.0 / sx, sy: 1.0 / sy }
            }
            Transform::Displace(_) => return None,
        })
    }
}

/// One step of an edit script.
#[derive(Clone, Debug, PartialEq)]
pub struct EditOp {
    pub select: Selection,
    pub transform: Transform,
}

/// Applies `t` to the Gaussians at `indices` and rebuilds the index.
pub fn apply_transform(model: &mut Model, indices: &[usize], t: &Transform) -> Result<(), EditError> {
    if !model.is_baked() {
        return Err(EditError::NotBaked);
    }
    t.validate()?;
    let n = model.len();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(EditError::IndexOutOfRange { index: bad, len: n });
    }
    if let Transform::Displace(off) = t {
        if off.len() != indices.len() {
            return Err(EditError::DisplaceLength { expected: indices.len(), got: off.len() });
        }
    }
    let mut means = model.means().to_vec();
    let covs = model.cov_params_mut();
    for (k, &i) in indices.iter().enumerate() {
        match t {
            Transform::Translate(v) => means[i] = means[i] + *v,
            Transform::Rotate { center, angle } => {
                means[i] = means[i].rotated_about(*center, *angle);
                covs[i][2] += angle;
            }
            Transform::Scale { center, sx, sy } => {
                let d = means[i] - *center;
                means[i] = Coord::new(center.x + sx * d.x, center.y + sy * d.y);
                covs[i][0] += sx.abs().ln();
                covs[i][1] += sy.abs().ln();
                // A reflection across one axis mirrors the orientation.
                if (*sx < 0.0) != (*sy < 0.0) {
                    covs[i][2] = -covs[i][2];
                }
            }
            Transform::Displace(off) => means[i] = means[i] + off[k],
        }
    }
    model.set_means(means)?;
    Ok(())
}

/// Resolves each op's selection against the current means and applies it.
pub fn apply_ops(model: &mut Model, ops: &[EditOp]) -> Result<(), EditError> {
    for op in ops {
        let ix = select(model.means(), &op.select)?;
        apply_transform(model, &ix, &op.transform)?;
    }
    Ok(())
}

/// Frame-by-frame replay of an animation manifest. Each item is the render
/// of one frame at the model's native resolution; the rest pose is
/// restored when the iterator finishes or is dropped.
pub struct AnimationReplay<'a> {
    model: &'a mut Model,
    manifest: &'a AnimationManifest,
    rest: Vec<Coord>,
    next: usize,
}

pub fn replay_animation<'a>(
    model: &'a mut Model,
    manifest: &'a AnimationManifest,
) -> Result<AnimationReplay<'a>, EditError> {
    if !model.is_baked() {
        return Err(EditError::NotBaked);
    }
    if manifest.n != model.len() {
        return Err(EditError::CountMismatch { manifest: manifest.n, model: model.len() });
    }
    let rest = model.means().to_vec();
    Ok(AnimationReplay { model, manifest, rest, next: 0 })
}

impl AnimationReplay<'_> {
    fn restore(&mut self) {
        if self.model.means() != self.rest.as_slice() {
            self.model
                .set_means(self.rest.clone())
                .expect("rest pose was a valid mean set");
        }
    }

    fn render_frame(&mut self, k: usize) -> Result<ImageBuffer, EditError> {
        // Frames are absolute snapshots; assigning them directly avoids the
        // rounding of a rest-relative displacement.
        let positions = self.manifest.read_frame(k)?;
        if positions.iter().any(|p| !p.is_finite()) {
            return Err(EditError::NonFinite("frame position"));
        }
        self.model.set_means(positions)?;
        Ok(self.model.render_native()?)
    }
}

impl Iterator for AnimationReplay<'_> {
    type Item = Result<ImageBuffer, EditError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.manifest.frames.len() {
            self.restore();
            return None;
        }
        let k = self.next;
        self.next += 1;
        let out = self.render_frame(k);
        if out.is_err() {
            self.next = self.manifest.frames.len();
            self.restore();
        }
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.manifest.frames.len() - self.next.min(self.manifest.frames.len());
        (left, Some(left))
    }
}

impl Drop for AnimationReplay<'_> {
    fn drop(&mut self) {
        self.restore();
    }
}

/// Straight-alpha "over": `α·fg + (1−α)·bg`, producing RGB.
pub fn composite_over(fg: &ImageBuffer, bg: &ImageBuffer) -> Result<ImageBuffer, EditError> {
    if fg.channels() != 4 {
        return Err(EditError::ForegroundNotRgba);
    }
    if fg.width() != bg.width() || fg.height() != bg.height() {
        return Err(EditError::SizeMismatch(fg.width(), fg.height(), bg.width(), bg.height()));
    }
    let data = fg
        .data()
        .chunks_exact(4)
        .zip(bg.data().chunks_exact(bg.channels()))
        .flat_map(|(f, b)| {
            let a = f[3];
            [0, 1, 2].map(|k| (a * f[k] + (1.0 - a) * b[k]).clamp(0.0, 1.0))
        })
        .collect();
    Ok(ImageBuffer::new(fg.width(), fg.height(), 3, data)?)
}
