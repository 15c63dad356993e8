//! Bottleneck attention: channel self-attention over position-augmented
//! features, spatial attention over positions, and a 1x1 fuse of both with
//! the input.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d};
use crate::params::{Ctx, Module, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TamConfig {
    /// Channel-attention heads; channels are split evenly between them.
    pub heads: usize,
    /// Scale spatial-attention logits by `1/sqrt(c/2)`.
    pub gsa_scale: bool,
    /// Feed the spatial branch the position-augmented tensor instead of raw F.
    pub gsa_use_pe: bool,
}

impl Default for TamConfig {
    fn default() -> Self {
        TamConfig {
            heads: 1,
            gsa_scale: true,
            gsa_use_pe: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TamWeights {
    /// Learnable `[1, c, h, w]`, zero at initialization.
    pub position_embedding: ParamId,
    pub w_q: Conv2d,
    pub w_k: Conv2d,
    pub w_v: Conv2d,
    /// Value path of the spatial branch, c -> c.
    pub gsa_embed_c: Conv2d,
    /// The two c -> c/2 embeddings whose product gives the spatial logits.
    pub gsa_embed_cc1: Conv2d,
    pub gsa_embed_cc2: Conv2d,
    pub fuse: Conv2d,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub cfg: TamConfig,
}

/// Output together with the row-stochastic attention matrix that built it.
pub struct Attended {
    pub out: Var,
    /// `[N * heads, c/heads, c/heads]` for channel attention,
    /// `[N, hw, hw]` for spatial attention.
    pub attention: Var,
}

impl TamWeights {
    pub fn new(b: &mut Builder, name: &str, channels: usize, height: usize, width: usize, cfg: TamConfig) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::Config(format!("attention needs an even channel count, got {channels}")));
        }
        if cfg.heads == 0 || channels % cfg.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide {channels} channels", cfg.heads)));
        }
        if height == 0 || width == 0 {
            return Err(Error::Config("attention needs a non-empty map".into()));
        }
        let c = channels;
        let gsa_in = if cfg.gsa_use_pe { 2 * c } else { c };
        let proj = |b: &mut Builder, n: &str, cin, cout, bias| Conv2d::new(b, &format!("{name}.{n}"), cin, cout, 1, 1, 0, bias);
        Ok(TamWeights {
            position_embedding: b.constant(&format!("{name}.pos_embed"), &[1, c, height, width], 0.0),
            w_q: proj(b, "w_q", 2 * c, c, false),
            w_k: proj(b, "w_k", 2 * c, c, false),
            w_v: proj(b, "w_v", 2 * c, c, false),
            gsa_embed_c: proj(b, "gsa_c", gsa_in, c, true),
            gsa_embed_cc1: proj(b, "gsa_cc1", gsa_in, c / 2, true),
            gsa_embed_cc2: proj(b, "gsa_cc2", gsa_in, c / 2, true),
            fuse: proj(b, "fuse", 3 * c, c, true),
            channels,
            height,
            width,
            cfg,
        })
    }

    fn check(&self, cx: &Ctx, f: Var) -> Result<usize> {
        match *cx.tape.shape(f) {
            [n, c, h, w] if c == self.channels && h == self.height && w == self.width => Ok(n),
            ref s => Err(Error::shape(
                "attention input",
                s,
                &[0, self.channels, self.height, self.width],
            )),
        }
    }

    pub fn augment(&self, cx: &mut Ctx, f: Var) -> Result<Var> {
        let pe = cx.param(self.position_embedding);
        add_position_encoding(cx, f, pe)
    }

    /// Channel attention `softmax(Q K^T / sqrt(hw)) V` per head.
    pub fn tsa(&self, cx: &mut Ctx, f: Var) -> Result<Attended> {
        let n = self.check(cx, f)?;
        let x = self.augment(cx, f)?;
        let (c, hw, heads) = (self.channels, self.height * self.width, self.cfg.heads);
        let split = [n * heads, c / heads, hw];
        let q = self.w_q.forward(cx, x)?;
        let q = cx.tape.reshape(q, &split)?;
        let k = self.w_k.forward(cx, x)?;
        let k = cx.tape.reshape(k, &split)?;
        let v = self.w_v.forward(cx, x)?;
        let v = cx.tape.reshape(v, &split)?;
        let kt = cx.tape.transpose_last2(k)?;
        let logits = cx.tape.matmul(q, kt)?;
        let logits = cx.tape.scale(logits, 1.0 / (hw as f64).sqrt());
        let attention = cx.tape.softmax(logits, 2)?;
        let out = cx.tape.matmul(attention, v)?;
        let out = cx.tape.reshape(out, &[n, c, self.height, self.width])?;
        Ok(Attended { out, attention })
    }

    /// Spatial attention: `softmax(F1 F2)` over positions applied to the
    /// c-channel value embedding.
    pub fn gsa(&self, cx: &mut Ctx, f: Var) -> Result<Attended> {
        let n = self.check(cx, f)?;
        let g = if self.cfg.gsa_use_pe { self.augment(cx, f)? } else { f };
        let c = self.channels;
        let value = self.gsa_embed_c.forward(cx, g)?;
        let value = flat_spatial(cx, value)?;
        let value = cx.tape.transpose_last2(value)?;
        let f1 = self.gsa_embed_cc1.forward(cx, g)?;
        let f1 = flat_spatial(cx, f1)?;
        let f1 = cx.tape.transpose_last2(f1)?;
        let f2 = self.gsa_embed_cc2.forward(cx, g)?;
        let f2 = flat_spatial(cx, f2)?;
        let mut logits = cx.tape.matmul(f1, f2)?;
        if self.cfg.gsa_scale {
            logits = cx.tape.scale(logits, 1.0 / ((c / 2) as f64).sqrt());
        }
        let attention = cx.tape.softmax(logits, 2)?;
        let out = cx.tape.matmul(attention, value)?;
        let out = cx.tape.transpose_last2(out)?;
        let out = cx.tape.reshape(out, &[n, c, self.height, self.width])?;
        Ok(Attended { out, attention })
    }

    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Result<Var> {
        let tsa = self.tsa(cx, f)?.out;
        let gsa = self.gsa(cx, f)?.out;
        let cat = cx.tape.concat_channels(&[tsa, gsa, f])?;
        self.fuse.forward(cx, cat)
    }

    /// Closed-form count of trainable scalars.
    pub fn analytic_param_count(channels: usize, height: usize, width: usize, cfg: &TamConfig) -> usize {
        let c = channels;
        let gsa_in = if cfg.gsa_use_pe { 2 * c } else { c };
        let pe = c * height * width;
        let qkv = 3 * (2 * c * c);
        let gsa = (gsa_in * c + c) + 2 * (gsa_in * (c / 2) + c / 2);
        let fuse = 3 * c * c + c;
        pe + qkv + gsa + fuse
    }
}

impl Module for TamWeights {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.push(self.position_embedding);
        for conv in [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.gsa_embed_c,
            &self.gsa_embed_cc1,
            &self.gsa_embed_cc2,
            &self.fuse,
        ] {
            conv.collect_params(out);
        }
    }
}

/// Concatenates `f` with the batch-broadcast embedding `pe` (`[1, c, h, w]`).
pub fn add_position_encoding(cx: &mut Ctx, f: Var, pe: Var) -> Result<Var> {
    let fs = cx.tape.shape(f).to_vec();
    let ps = cx.tape.shape(pe).to_vec();
    if fs.len() != 4 || ps.len() != 4 || ps[0] != 1 || fs[2..] != ps[2..] {
        return Err(Error::shape("position encoding", &fs, &ps));
    }
    let target = [fs[0], ps[1], fs[2], fs[3]];
    let pe = cx.tape.broadcast_to(pe, &target)?;
    cx.tape.concat_channels(&[f, pe])
}

fn flat_spatial(cx: &mut Ctx, x: Var) -> Result<Var> {
    let s = cx.tape.shape(x).to_vec();
    cx.tape.reshape(x, &[s[0], s[1], s[2] * s[3]])
}
