use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{Label, SegmentationSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub size: usize,
    /// Image side must be a multiple of this (the model's downsampling factor).
    pub multiple_of: usize,
    pub min_fraction: f64,
    pub max_fraction: f64,
    pub min_contrast: f64,
    /// Gamma shape of the multiplicative speckle (mean 1, variance 1/shape).
    pub speckle_shape: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            size: 64,
            multiple_of: 32,
            min_fraction: 0.02,
            max_fraction: 0.4,
            min_contrast: 0.15,
            speckle_shape: 4.0,
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, s: f64) -> Self {
        let ry = rng.gen_range(0.08..0.24) * s;
        let rx = rng.gen_range(0.08..0.24) * s;
        let margin = ry.max(rx) + 1.0;
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        Ellipse {
            cy: rng.gen_range(margin.min(s / 2.0)..(s - margin).max(s / 2.0 + 1e-9)),
            cx: rng.gen_range(margin.min(s / 2.0)..(s - margin).max(s / 2.0 + 1e-9)),
            ry,
            rx,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Normalized radius; `<= 1` inside. Pixel centres sit at `+0.5`.
    fn radius(&self, i: usize, j: usize) -> f64 {
        let (dy, dx) = (i as f64 + 0.5 - self.cy, j as f64 + 0.5 - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

fn box_blur(src: &[f64], s: usize) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            let (mut acc, mut n) = (0.0, 0.0);
            for di in i.saturating_sub(1)..(i + 2).min(s) {
                for dj in j.saturating_sub(1)..(j + 2).min(s) {
                    acc += src[di * s + dj];
                    n += 1.0;
                }
            }
            out[i * s + j] = acc / n;
        }
    }
    out
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn generate(rng: &mut ChaCha8Rng, opts: &SynthOptions, speckle: &Gamma<f64>) -> (Vec<f64>, Vec<f64>, usize) {
    let s = opts.size;
    loop {
        let count = rng.gen_range(1..=2);
        let lesions: Vec<Ellipse> = (0..count).map(|_| Ellipse::random(rng, s as f64)).collect();
        let bright = rng.gen_bool(0.3);
        let background = rng.gen_range(0.3..0.45);
        let lesion = if bright {
            background + rng.gen_range(0.3..0.4)
        } else {
            background - rng.gen_range(0.22..0.28)
        };
        let edge = rng.gen_range(0.08..0.2);
        let mut mask = vec![0.0; s * s];
        let mut level = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                let r = lesions.iter().map(|e| e.radius(i, j)).fold(f64::INFINITY, f64::min);
                if r <= 1.0 {
                    mask[i * s + j] = 1.0;
                }
                let alpha = ((1.0 - r) / edge + 0.5).clamp(0.0, 1.0);
                let depth = 1.0 - 0.25 * i as f64 / s as f64;
                level[i * s + j] = depth * (background * (1.0 - alpha) + lesion * alpha);
            }
        }
        let noise: Vec<f64> = (0..s * s).map(|_| speckle.sample(rng)).collect();
        let noise = box_blur(&noise, s);
        let image: Vec<f64> = level.iter().zip(&noise).map(|(l, n)| quantize(l * n)).collect();
        let area = mask.iter().sum::<f64>();
        let fraction = area / (s * s) as f64;
        if !(opts.min_fraction..=opts.max_fraction).contains(&fraction) {
            continue;
        }
        let inside = image.iter().zip(&mask).filter(|(_, m)| **m == 1.0).map(|(v, _)| v).sum::<f64>() / area;
        let outside = image.iter().zip(&mask).filter(|(_, m)| **m == 0.0).map(|(v, _)| v).sum::<f64>()
            / ((s * s) as f64 - area);
        if (inside - outside).abs() >= opts.min_contrast {
            return (image, mask, count);
        }
    }
}

/// Speckled ultrasound-like images with one or two elliptical lesions.
/// Sample `k` depends only on `(seed, k)`. Two-lesion samples are labelled
/// malignant, single-lesion ones benign.
pub fn synth_dataset(n: usize, seed: u64, opts: &SynthOptions) -> Result<Vec<SegmentationSample>> {
    let s = opts.size;
    if n == 0 || s < 8 || opts.multiple_of == 0 || s % opts.multiple_of != 0 {
        return Err(Error::Config(format!(
            "synthetic set needs n >= 1 and a size >= 8 divisible by {}, got n={n}, size={s}",
            opts.multiple_of
        )));
    }
    if !(opts.min_fraction > 0.0 && opts.min_fraction < opts.max_fraction && opts.max_fraction < 1.0) {
        return Err(Error::Config("mask fraction bounds must satisfy 0 < min < max < 1".into()));
    }
    let speckle = Gamma::new(opts.speckle_shape, 1.0 / opts.speckle_shape)
        .map_err(|e| Error::Config(format!("speckle shape: {e}")))?;
    (0..n)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let (image, mask, count) = generate(&mut rng, opts, &speckle);
            let label = if count == 1 { Label::Benign } else { Label::Malignant };
            SegmentationSample::new(
                format!("synth_{k:04}"),
                Tensor::from_vec(&[1, s, s], image)?,
                Tensor::from_vec(&[1, s, s], mask)?,
                Some(label),
            )
        })
        .collect()
}
