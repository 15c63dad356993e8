use serde::{Deserialize, Serialize};

use super::{BatchNorm2d, Builder, Conv2d, DenseBlock, DenseBlockConfig, Transition};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Ctx, Module, ParamId};

/// Total spatial reduction from input to bottleneck.
pub const ENCODER_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub blocks: Vec<DenseBlockConfig>,
    pub compression: f64,
}

impl EncoderConfig {
    /// DenseNet-121 topology: blocks of 6/12/24/16 layers, growth 32.
    pub fn full() -> Self {
        let block = |num_layers| DenseBlockConfig {
            num_layers,
            growth_rate: 32,
            bn_size: 4,
        };
        EncoderConfig {
            in_channels: 3,
            stem_channels: 64,
            blocks: vec![block(6), block(12), block(24), block(16)],
            compression: 0.5,
        }
    }

    pub fn tiny() -> Self {
        let block = DenseBlockConfig {
            num_layers: 2,
            growth_rate: 8,
            bn_size: 4,
        };
        EncoderConfig {
            in_channels: 1,
            stem_channels: 16,
            blocks: vec![block; 4],
            compression: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != 4 {
            return Err(Error::Config(format!("encoder needs 4 dense blocks, got {}", self.blocks.len())));
        }
        if self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        self.blocks.iter().try_for_each(DenseBlockConfig::validate)
    }
}

pub struct EncoderOutput {
    pub bottleneck: Var,
    /// Stem, DB1, DB2, DB3 outputs at strides 2, 4, 8, 16.
    pub skips: [Var; 4],
}

/// Stem (7x7/2 conv, BN, ReLU, 3x3/2 max pool), then DB1 TL1 DB2 TL2 DB3
/// TL3 DB4 and a closing BN + ReLU.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm2d,
    pub in_channels: usize,
    pub skip_channels: [usize; 4],
    pub out_channels: usize,
}

impl Encoder {
    pub fn new(b: &mut Builder, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let stem_conv = Conv2d::new(b, &format!("{name}.conv0"), cfg.in_channels, cfg.stem_channels, 7, 2, 3, false);
        let stem_bn = BatchNorm2d::new(b, &format!("{name}.norm0"), cfg.stem_channels);
        let mut skip_channels = [cfg.stem_channels, 0, 0, 0];
        let mut channels = cfg.stem_channels;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, bc) in cfg.blocks.iter().enumerate() {
            let block = DenseBlock::new(b, &format!("{name}.denseblock{}", i + 1), channels, bc)?;
            channels = block.out_channels;
            blocks.push(block);
            if i < 3 {
                skip_channels[i + 1] = channels;
                let t = Transition::new(b, &format!("{name}.transition{}", i + 1), channels, cfg.compression)?;
                channels = t.out_channels;
                transitions.push(t);
            }
        }
        let final_bn = BatchNorm2d::new(b, &format!("{name}.norm5"), channels);
        Ok(Encoder {
            stem_conv,
            stem_bn,
            blocks,
            transitions,
            final_bn,
            in_channels: cfg.in_channels,
            skip_channels,
            out_channels: channels,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<EncoderOutput> {
        let shape = cx.tape.shape(x).to_vec();
        match shape[..] {
            [_, _, h, w] if h % ENCODER_STRIDE == 0 && w % ENCODER_STRIDE == 0 && h > 0 && w > 0 => {}
            _ => {
                return Err(Error::Config(format!(
                    "encoder input {shape:?} must be 4-d with H, W divisible by {ENCODER_STRIDE}"
                )))
            }
        }
        let y = self.stem_conv.forward(cx, x)?;
        let y = self.stem_bn.forward(cx, y)?;
        let stem = cx.tape.relu(y);
        let mut h = cx.tape.max_pool2d(stem, 3, 2, 1)?;
        let mut skips = [stem; 4];
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(cx, h)?;
            if i < 3 {
                skips[i + 1] = h;
                h = self.transitions[i].forward(cx, h)?;
            }
        }
        let h = self.final_bn.forward(cx, h)?;
        let bottleneck = cx.tape.relu(h);
        Ok(EncoderOutput { bottleneck, skips })
    }
}

impl Module for Encoder {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.stem_conv.collect_params(out);
        self.stem_bn.collect_params(out);
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect_params(out);
            if let Some(t) = self.transitions.get(i) {
                t.collect_params(out);
            }
        }
        self.final_bn.collect_params(out);
    }
}
