//! Layers and the DenseNet-style encoder.

mod dense;
mod encoder;

pub use dense::{DenseBlock, DenseBlockConfig, DenseLayer, Transition};
pub use encoder::{Encoder, EncoderConfig, EncoderOutput, ENCODER_STRIDE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{RunningStats, Var};
use crate::error::{Error, Result};
use crate::params::{BufferId, Ctx, Module, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Deterministic parameter factory: identical seeds and call order give
/// bit-identical stores.
pub struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal weights, `std = sqrt(2 / fan_in)`.
    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }

    pub fn buffer(&mut self, name: &str, channels: usize) -> BufferId {
        self.store.add_buffer(name, RunningStats::new(channels))
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = b.he_normal(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
        );
        let bias = bias.then(|| b.constant(&format!("{name}.bias"), &[out_channels], 0.0));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let c = cx.tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(Error::shape("conv2d channels", cx.tape.shape(x), &[self.in_channels]));
        }
        let w = cx.param(self.weight);
        let bias = self.bias.map(|id| cx.param(id));
        cx.tape.conv2d(x, w, bias, self.stride, self.pad)
    }
}

impl Module for Conv2d {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.push(self.weight);
        out.extend(self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
    pub channels: usize,
}

impl BatchNorm2d {
    /// `gamma = 1`, `beta = 0`.
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: b.constant(&format!("{name}.gamma"), &[channels], 1.0),
            beta: b.constant(&format!("{name}.beta"), &[channels], 0.0),
            stats: b.buffer(name, channels),
            channels,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        cx.batch_norm(x, self.gamma, self.beta, self.stats)
    }
}

impl Module for BatchNorm2d {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.push(self.gamma);
        out.push(self.beta);
    }
}

/// 3x3 conv (pad 1) -> batch norm -> ReLU; spatial size is preserved.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(b: &mut Builder, name: &str, in_channels: usize, out_channels: usize) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(b, &format!("{name}.conv"), in_channels, out_channels, 3, 1, 1, false),
            bn: BatchNorm2d::new(b, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(cx.tape.relu(y))
    }
}

impl Module for ConvBnRelu {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.conv.collect_params(out);
        self.bn.collect_params(out);
    }
}
