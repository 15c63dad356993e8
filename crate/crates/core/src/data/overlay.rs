use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelClass {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

fn plane(t: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [_, h, w] | [h, w] => Ok((h, w)),
        ref s => Err(Error::shape(what, s, &[1, 0, 0])),
    }
}

/// Grayscale base with true positives tinted green, false positives red and
/// false negatives blue; the tinted channel is lifted by half the range.
pub fn overlay(pred: &Tensor, gt: &Tensor, image: &Tensor) -> Result<RgbImage> {
    let (h, w) = plane(image, "overlay image")?;
    for m in [pred, gt] {
        if plane(m, "overlay mask")? != (h, w) || m.len() != h * w {
            return Err(Error::shape("overlay", m.shape(), image.shape()));
        }
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for (k, px) in out.pixels_mut().enumerate() {
        let v = (image.data()[k].clamp(0.0, 1.0) * 255.0).round() as u8;
        let half = v / 2;
        let lift = half + 128;
        *px = match (pred.data()[k] >= 0.5, gt.data()[k] >= 0.5) {
            (true, true) => Rgb([half, lift, half]),
            (true, false) => Rgb([lift, half, half]),
            (false, true) => Rgb([half, half, lift]),
            (false, false) => Rgb([v, v, v]),
        };
    }
    Ok(out)
}

/// Inverse of the overlay palette.
pub fn pixel_class(px: &Rgb<u8>) -> PixelClass {
    let [r, g, b] = px.0;
    if g > r && g > b {
        PixelClass::TruePositive
    } else if r > g && r > b {
        PixelClass::FalsePositive
    } else if b > r && b > g {
        PixelClass::FalseNegative
    } else {
        PixelClass::TrueNegative
    }
}
