use serde::{Deserialize, Serialize};

use super::{BatchNorm2d, Builder, Conv2d};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, Module, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockConfig {
    pub num_layers: usize,
    pub growth_rate: usize,
    pub bn_size: usize,
}

impl DenseBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.growth_rate == 0 || self.bn_size == 0 {
            return Err(Error::Config(format!("dense block needs positive sizes, got {self:?}")));
        }
        Ok(())
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        in_channels + self.num_layers * self.growth_rate
    }
}

/// BN -> ReLU -> 1x1 conv -> BN -> ReLU -> 3x3 conv, concatenated onto its input.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
}

impl DenseLayer {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize, cfg: &DenseBlockConfig) -> Self {
        let mid = cfg.bn_size * cfg.growth_rate;
        DenseLayer {
            bn1: BatchNorm2d::new(b, &format!("{name}.norm1"), in_channels),
            conv1: Conv2d::new(b, &format!("{name}.conv1"), in_channels, mid, 1, 1, 0, false),
            bn2: BatchNorm2d::new(b, &format!("{name}.norm2"), mid),
            conv2: Conv2d::new(b, &format!("{name}.conv2"), mid, cfg.growth_rate, 3, 1, 1, false),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.bn1.forward(cx, x)?;
        let y = cx.tape.relu(y);
        let y = self.conv1.forward(cx, y)?;
        let y = self.bn2.forward(cx, y)?;
        let y = cx.tape.relu(y);
        let y = self.conv2.forward(cx, y)?;
        cx.tape.concat_channels(&[x, y])
    }
}

impl Module for DenseLayer {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.bn1.collect_params(out);
        self.conv1.collect_params(out);
        self.bn2.collect_params(out);
        self.conv2.collect_params(out);
    }
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<DenseLayer>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DenseBlock {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize, cfg: &DenseBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|i| DenseLayer::new(b, &format!("{name}.layer{i}"), in_channels + i * cfg.growth_rate, cfg))
            .collect();
        Ok(DenseBlock {
            layers,
            in_channels,
            out_channels: cfg.out_channels(in_channels),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        if cx.tape.shape(x).get(1) != Some(&self.in_channels) {
            return Err(Error::shape("dense block", cx.tape.shape(x), &[self.in_channels]));
        }
        self.layers.iter().try_fold(x, |h, layer| layer.forward(cx, h))
    }
}

impl Module for DenseBlock {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.layers.iter().for_each(|l| l.collect_params(out));
    }
}

/// BN -> ReLU -> 1x1 conv to `floor(theta * C)` channels -> 2x2 average pool.
#[derive(Clone, Debug)]
pub struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
    pub out_channels: usize,
}

impl Transition {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::Config(format!("compression {theta} outside (0, 1]")));
        }
        let out_channels = (theta * in_channels as f64 + 1e-9).floor() as usize;
        if out_channels == 0 {
            return Err(Error::Config(format!("transition of {in_channels} channels by {theta} leaves none")));
        }
        Ok(Transition {
            bn: BatchNorm2d::new(b, &format!("{name}.norm"), in_channels),
            conv: Conv2d::new(b, &format!("{name}.conv"), in_channels, out_channels, 1, 1, 0, false),
            out_channels,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.bn.forward(cx, x)?;
        let y = cx.tape.relu(y);
        let y = self.conv.forward(cx, y)?;
        cx.tape.avg_pool2d(y, 2)
    }
}

impl Module for Transition {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.bn.collect_params(out);
        self.conv.collect_params(out);
    }
}
