//! Spatial features enhancement block for skip connections: a channel gate
//! built from pooled statistics, added back onto the input.

use crate::autograd::{Reduce, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Builder, Conv2d};
use crate::params::{Ctx, Module, ParamId};

#[derive(Clone, Debug)]
pub struct SfebWeights {
    /// 3x3, channel preserving.
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    /// Acts on the 1x1 pooled map, so only a 3x3 kernel's centre tap could
    /// ever touch data; stored as the equivalent 1x1 conv, 2C -> C.
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    /// 1x1 with bias over the global average of the input.
    pub gate: Conv2d,
    pub gate_bn: BatchNorm2d,
    pub channels: usize,
}

impl SfebWeights {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        let c = channels;
        SfebWeights {
            conv1: Conv2d::new(b, &format!("{name}.conv1"), c, c, 3, 1, 1, false),
            bn1: BatchNorm2d::new(b, &format!("{name}.bn1"), c),
            conv2: Conv2d::new(b, &format!("{name}.conv2"), 2 * c, c, 1, 1, 0, false),
            bn2: BatchNorm2d::new(b, &format!("{name}.bn2"), c),
            gate: Conv2d::new(b, &format!("{name}.gate"), c, c, 1, 1, 0, true),
            gate_bn: BatchNorm2d::new(b, &format!("{name}.gate_bn"), c),
            channels,
        }
    }

    fn check(&self, cx: &Ctx, x: Var) -> Result<()> {
        match *cx.tape.shape(x) {
            [_, c, h, w] if c == self.channels && h > 0 && w > 0 => Ok(()),
            ref s => Err(Error::shape("sfeb input", s, &[0, self.channels, 0, 0])),
        }
    }

    /// `F_cc = sigmoid(BN(conv1x1(GAP(I))))`, shape `[N, C, 1, 1]`.
    pub fn attention_coefficients(&self, cx: &mut Ctx, input: Var) -> Result<Var> {
        self.check(cx, input)?;
        let g = cx.tape.global_reduce(input, Reduce::Avg)?;
        let g = self.gate.forward(cx, g)?;
        let g = self.gate_bn.forward(cx, g)?;
        Ok(cx.tape.sigmoid(g))
    }

    /// `F_c`, the pooled-statistics branch, shape `[N, C, 1, 1]`.
    pub fn pooled_features(&self, cx: &mut Ctx, input: Var) -> Result<Var> {
        self.check(cx, input)?;
        let i1 = self.conv1.forward(cx, input)?;
        let i1 = self.bn1.forward(cx, i1)?;
        let i1 = cx.tape.relu(i1);
        let gmax = cx.tape.global_reduce(i1, Reduce::Max)?;
        let gavg = cx.tape.global_reduce(i1, Reduce::Avg)?;
        let po = cx.tape.concat_channels(&[gmax, gavg])?;
        let fc = self.conv2.forward(cx, po)?;
        let fc = self.bn2.forward(cx, fc)?;
        Ok(cx.tape.relu(fc))
    }

    pub fn forward(&self, cx: &mut Ctx, input: Var) -> Result<Var> {
        let fc = self.pooled_features(cx, input)?;
        let fcc = self.attention_coefficients(cx, input)?;
        if cx.tape.shape(fc) != cx.tape.shape(fcc) {
            return Err(Error::shape("sfeb gate", cx.tape.shape(fc), cx.tape.shape(fcc)));
        }
        let em = cx.tape.mul(fc, fcc)?;
        let full = cx.tape.shape(input).to_vec();
        let em = cx.tape.broadcast_to(em, &full)?;
        cx.tape.add(input, em)
    }

    pub fn analytic_param_count(channels: usize) -> usize {
        let c = channels;
        (9 * c * c + 2 * c) + (2 * c * c + 2 * c) + (c * c + c + 2 * c)
    }
}

impl Module for SfebWeights {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.conv1.collect_params(out);
        self.bn1.collect_params(out);
        self.conv2.collect_params(out);
        self.bn2.collect_params(out);
        self.gate.collect_params(out);
        self.gate_bn.collect_params(out);
    }
}
