use super::FieldError;
use crate::types::ImageBuffer;

/// PSNR in dB for unit-peak data; `+inf` when `mse` is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR over the RGB channels of two equally sized images. Alpha channels,
/// if present, are ignored.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, FieldError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(FieldError::DimensionMismatch(
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels(),
        ));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let sq: f64 = a
        .data()
        .chunks_exact(ca)
        .zip(b.data().chunks_exact(cb))
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]) * (p[k] - q[k])).sum::<f64>())
        .sum();
    Ok(psnr_from_mse(sq / (3 * a.width() * a.height()) as f64))
}
