//! Samples, dataset layouts on disk, the synthetic generator, resizing and
//! prediction overlays.

mod layout;
mod overlay;
mod resize;
mod synth;

pub use layout::{
    load_dataset, load_manifest, read_mask, scan_manifest, write_busi_layout, write_mask_png, write_rgb_png,
    DatasetManifest, ManifestEntry,
};
pub use overlay::{overlay, pixel_class, PixelClass};
pub use resize::{resize, ResizeMode};
pub use synth::{synth_dataset, SynthOptions};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malignant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]` with values in `{0, 1}`.
    pub mask: Tensor,
    pub label: Option<Label>,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor, label: Option<Label>) -> Result<Self> {
        let (is, ms) = (image.shape(), mask.shape());
        if is.len() != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
            return Err(Error::shape("sample", is, ms));
        }
        if let Some(&v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinary(v));
        }
        Ok(SegmentationSample {
            id: id.into(),
            image,
            mask,
            label,
        })
    }
}

/// Seeded permutation of `0..n`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Seeded disjoint train/test selection of exactly the requested sizes.
pub fn fixed_test_split<T: Clone>(items: &[T], train: usize, test: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if train + test > items.len() {
        return Err(Error::Config(format!(
            "split of {train} + {test} needs more than the {} samples available",
            items.len()
        )));
    }
    let perm = seeded_permutation(items.len(), seed);
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&perm[..train]), pick(&perm[train..train + test])))
}

/// Splits `"benign (12)_mask"` into text and number runs so that numbered
/// files sort numerically.
pub(crate) fn natural_key(s: &str) -> Vec<(String, u64)> {
    let mut out = Vec::new();
    let mut text = String::new();
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        if c.is_ascii_digit() {
            let mut num = c.to_digit(10).unwrap() as u64;
            while let Some(d) = chars.peek().and_then(|d| d.to_digit(10)) {
                num = num.saturating_mul(10).saturating_add(d as u64);
                chars.next();
            }
            out.push((std::mem::take(&mut text), num));
        } else {
            text.push(c);
        }
    }
    out.push((text, u64::MAX));
    out
}
