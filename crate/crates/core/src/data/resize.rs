use serde::{Deserialize, Serialize};

use crate::autograd::interp::{nearest_index, ResizePlan};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    /// Half-pixel centres, edge clamped.
    Bilinear,
    Nearest,
}

/// Resizes every plane of a `[C, H, W]` tensor.
pub fn resize(img: &Tensor, h: usize, w: usize, mode: ResizeMode) -> Result<Tensor> {
    let &[c, ih, iw] = img.shape() else {
        return Err(Error::shape("resize", img.shape(), &[0, h, w]));
    };
    if h == 0 || w == 0 || ih == 0 || iw == 0 {
        return Err(Error::Config(format!("cannot resize {ih}x{iw} to {h}x{w}")));
    }
    let mut out = vec![0.0; c * h * w];
    match mode {
        ResizeMode::Bilinear => {
            let plan = ResizePlan::bilinear(ih, iw, h, w);
            for (src, dst) in img.data().chunks(ih * iw).zip(out.chunks_mut(h * w)) {
                plan.apply(src, dst);
            }
        }
        ResizeMode::Nearest => {
            let (rows, cols) = (nearest_index(ih, h), nearest_index(iw, w));
            for (src, dst) in img.data().chunks(ih * iw).zip(out.chunks_mut(h * w)) {
                for (i, &r) in rows.iter().enumerate() {
                    for (j, &q) in cols.iter().enumerate() {
                        dst[i * w + j] = src[r * iw + q];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}
