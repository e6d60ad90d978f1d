use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AggScratch, Embeddings, FieldError, Model};
use crate::net::MlpCache;
use crate::types::{normalize_coords, ImageBuffer};

/// Pixel rectangle `[x0, x1) × [y0, y1)` (columns × rows) of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn full(width: usize, height: usize) -> Self {
        Self { x0: 0, y0: 0, x1: width, y1: height }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }
}

impl Model {
    /// Decodes every pixel center of `region` within a `width × height`
    /// frame. Output is RGBA when the model has a mask decoder.
    pub fn render(
        &self,
        width: usize,
        height: usize,
        region: Option<PixelRect>,
    ) -> Result<ImageBuffer, FieldError> {
        let rect = region.unwrap_or(PixelRect::full(width, height));
        if rect.width() == 0 || rect.height() == 0 {
            return Err(FieldError::EmptyRegion);
        }
        if rect.x1 > width || rect.y1 > height {
            return Err(FieldError::RegionOutOfBounds(rect, width, height));
        }
        let table;
        let src = match self.embeddings() {
            Embeddings::Grid(..) => {
                table = self.embedding_table();
                Embeddings::Table(&table)
            }
            baked => baked,
        };
        let channels = if self.has_mask() { 4 } else { 3 };
        let d = self.gaussians.dim;
        let row_len = rect.width() * channels;
        let mut data = vec![0.0; row_len * rect.height()];
        data.par_chunks_mut(row_len).enumerate().for_each_init(
            || (AggScratch::default(), MlpCache::default(), vec![0.0; d]),
            |(scratch, cache, e), (r, out)| {
                let row = rect.y0 + r;
                for (c, px) in out.chunks_exact_mut(channels).enumerate() {
                    let x = normalize_coords(row, rect.x0 + c, width, height)
                        .expect("region checked against frame");
                    self.aggregate_into(x, src, scratch, e);
                    let dec = self.decode_with(e, cache).expect("decoder input width");
                    px[..3].copy_from_slice(&dec.rgb);
                    if let Some(a) = dec.alpha {
                        px[3] = a;
                    }
                }
            },
        );
        Ok(ImageBuffer::new(rect.width(), rect.height(), channels, data)?)
    }

    /// Render at the resolution of the training image.
    pub fn render_native(&self) -> Result<ImageBuffer, FieldError> {
        self.render(self.width, self.height, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::tests::toy_config;

    fn model(channels: usize) -> Model {
        let img = ImageBuffer::from_fn(12, 10, channels, |r, c| {
            let mut p = vec![r as f64 / 10.0, c as f64 / 12.0, 0.5];
            if channels == 4 {
                p.push(if c < 8 { 1.0 } else { 0.0 });
            }
            p
        })
        .unwrap();
        Model::init(&img, toy_config(), 11).unwrap()
    }

    #[test]
    fn region_is_crop_of_full() {
        for m in [model(3), model(4)] {
            let full = m.render(12, 10, None).unwrap();
            let rect = PixelRect { x0: 3, y0: 2, x1: 9, y1: 7 };
            let part = m.render(12, 10, Some(rect)).unwrap();
            assert_eq!(part, full.crop(3, 2, 9, 7).unwrap());
            assert_eq!(full.channels(), if m.has_mask() { 4 } else { 3 });
        }
    }

    #[test]
    fn baked_and_unbaked_render_identically() {
        let m = model(3);
        let a = m.render_native().unwrap();
        let b = m.bake().unwrap().render_native().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn upsampled_render_is_finite_and_in_range() {
        let m = model(4);
        let img = m.render(24, 20, None).unwrap();
        assert!(img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn bad_regions() {
        let m = model(3);
        let empty = PixelRect { x0: 2, y0: 2, x1: 2, y1: 5 };
        assert!(matches!(m.render(12, 10, Some(empty)), Err(FieldError::EmptyRegion)));
        let big = PixelRect { x0: 0, y0: 0, x1: 13, y1: 5 };
        assert!(matches!(m.render(12, 10, Some(big)), Err(FieldError::RegionOutOfBounds(..))));
    }
}
