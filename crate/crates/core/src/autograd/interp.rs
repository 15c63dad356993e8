//! Half-pixel (align_corners = false) interpolation tables shared by the
//! differentiable upsampler and the dataset resizer.

/// Source taps for one output coordinate: `(1 - frac) * src[lo] + frac * src[hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Nearest source index with half-pixel centers; identity when sizes agree.
pub fn nearest_index(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| (((o as f64 + 0.5) * scale).floor() as usize).min(in_len - 1))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    rows: Vec<Tap>,
    cols: Vec<Tap>,
}

impl ResizePlan {
    pub fn bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: linear_taps(in_h, out_h),
            cols: linear_taps(in_w, out_w),
        }
    }

    /// Resamples one `in_h x in_w` plane into `out`.
    pub fn apply(&self, src: &[f64], out: &mut [f64]) {
        for (oi, r) in self.rows.iter().enumerate() {
            let row0 = &src[r.lo * self.in_w..(r.lo + 1) * self.in_w];
            let row1 = &src[r.hi * self.in_w..(r.hi + 1) * self.in_w];
            let dst = &mut out[oi * self.out_w..(oi + 1) * self.out_w];
            for (d, c) in dst.iter_mut().zip(&self.cols) {
                let top = (1.0 - c.frac) * row0[c.lo] + c.frac * row0[c.hi];
                let bot = (1.0 - c.frac) * row1[c.lo] + c.frac * row1[c.hi];
                *d = (1.0 - r.frac) * top + r.frac * bot;
            }
        }
    }

    /// Transpose of [`apply`](Self::apply): scatters `grad_out` back onto `grad_in`.
    pub fn apply_transpose(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (oi, r) in self.rows.iter().enumerate() {
            let g_row = &grad_out[oi * self.out_w..(oi + 1) * self.out_w];
            for (&g, c) in g_row.iter().zip(&self.cols) {
                let wr = [(r.lo, 1.0 - r.frac), (r.hi, r.frac)];
                let wc = [(c.lo, 1.0 - c.frac), (c.hi, c.frac)];
                for &(ri, rw) in &wr {
                    for &(ci, cw) in &wc {
                        grad_in[ri * self.in_w + ci] += g * rw * cw;
                    }
                }
            }
        }
    }
}
