//! Encoder, bottleneck attention, gated skips and an upsampling decoder
//! ending in a sigmoid mask head.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvBnRelu, Encoder, EncoderConfig, ENCODER_STRIDE};
use crate::params::{Ctx, Module, ParamId, ParamStore};
use crate::sfeb::SfebWeights;
use crate::tam::{TamConfig, TamWeights};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::Config(format!("unknown preset {other:?}, expected full or tiny"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub encoder: EncoderConfig,
    pub decoder_widths: Vec<usize>,
    pub use_convblock: bool,
    pub use_sfeb: bool,
    pub use_tam: bool,
    #[serde(default)]
    pub sfeb_in_decoder: bool,
    #[serde(default)]
    pub tam: TamConfig,
    pub input_size: usize,
    pub threshold: f64,
}

impl ModelConfig {
    pub fn new(preset: Preset) -> Self {
        let (encoder, decoder_widths, input_size) = match preset {
            Preset::Full => (EncoderConfig::full(), vec![256, 128, 64, 32], 256),
            Preset::Tiny => (EncoderConfig::tiny(), vec![32, 24, 16, 8], 64),
        };
        ModelConfig {
            preset,
            encoder,
            decoder_widths,
            use_convblock: true,
            use_sfeb: true,
            use_tam: true,
            sfeb_in_decoder: false,
            tam: TamConfig::default(),
            input_size,
            threshold: 0.5,
        }
    }

    pub fn tiny() -> Self {
        Self::new(Preset::Tiny)
    }

    pub fn full() -> Self {
        Self::new(Preset::Full)
    }

    /// Sets all three component toggles at once.
    pub fn with_components(mut self, convblock: bool, sfeb: bool, tam: bool) -> Self {
        self.use_convblock = convblock;
        self.use_sfeb = sfeb;
        self.use_tam = tam;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_widths.len() != 4 || self.decoder_widths.contains(&0) {
            return Err(Error::Config(format!(
                "decoder needs 4 positive widths, got {:?}",
                self.decoder_widths
            )));
        }
        if self.input_size == 0 || self.input_size % ENCODER_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input size {} is not a positive multiple of {ENCODER_STRIDE}",
                self.input_size
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size / ENCODER_STRIDE
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub convs: Vec<ConvBnRelu>,
}

impl Module for DecoderStage {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.convs.iter().for_each(|c| c.collect_params(out));
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub tam: Option<TamWeights>,
    /// One per skip, in encoder order (stem, DB1, DB2, DB3); empty when off.
    pub skip_sfebs: Vec<SfebWeights>,
    /// Stage `i` consumes skip `3 - i`.
    pub decoder: Vec<DecoderStage>,
    pub decoder_sfebs: Vec<SfebWeights>,
    pub head: Conv2d,
}

/// Builds the network and its parameter store from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<(SegmentationModel, ParamStore)> {
    cfg.validate()?;
    let mut b = Builder::new(seed);
    let encoder = Encoder::new(&mut b, "encoder", &cfg.encoder)?;
    let side = cfg.bottleneck_size();
    let tam = if cfg.use_tam {
        Some(TamWeights::new(&mut b, "tam", encoder.out_channels, side, side, cfg.tam)?)
    } else {
        None
    };
    let skip_sfebs = if cfg.use_sfeb {
        (0..4)
            .map(|i| SfebWeights::new(&mut b, &format!("sfeb{i}"), encoder.skip_channels[i]))
            .collect()
    } else {
        Vec::new()
    };
    let reps = if cfg.use_convblock { 2 } else { 1 };
    let mut channels = encoder.out_channels;
    let mut decoder = Vec::new();
    let mut decoder_sfebs = Vec::new();
    for (i, &width) in cfg.decoder_widths.iter().enumerate() {
        let mut cin = channels + encoder.skip_channels[3 - i];
        let convs = (0..reps)
            .map(|r| {
                let conv = ConvBnRelu::new(&mut b, &format!("decoder{i}.conv{r}"), cin, width);
                cin = width;
                conv
            })
            .collect();
        decoder.push(DecoderStage { convs });
        if cfg.sfeb_in_decoder {
            decoder_sfebs.push(SfebWeights::new(&mut b, &format!("decoder{i}.sfeb"), width));
        }
        channels = width;
    }
    let head = Conv2d::new(&mut b, "head", channels, 1, 1, 1, 0, true);
    let model = SegmentationModel {
        cfg: cfg.clone(),
        encoder,
        tam,
        skip_sfebs,
        decoder,
        decoder_sfebs,
        head,
    };
    Ok((model, b.finish()))
}

impl SegmentationModel {
    fn prepare_input(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = self.cfg.input_size;
        let want = self.encoder.in_channels;
        match *cx.tape.shape(x) {
            [n, c, h, w] if h == s && w == s && n > 0 => {
                if c == want {
                    Ok(x)
                } else if c == 1 {
                    cx.tape.broadcast_to(x, &[n, want, h, w])
                } else {
                    Err(Error::shape("model input", cx.tape.shape(x), &[n, want, s, s]))
                }
            }
            ref shape => Err(Error::shape("model input", shape, &[0, want, s, s])),
        }
    }

    /// Per-pixel tumour probabilities `[N, 1, H, W]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let x = self.prepare_input(cx, x)?;
        let enc = self.encoder.forward(cx, x)?;
        let mut h = match &self.tam {
            Some(tam) => tam.forward(cx, enc.bottleneck)?,
            None => enc.bottleneck,
        };
        for (i, stage) in self.decoder.iter().enumerate() {
            let k = 3 - i;
            let skip = match self.skip_sfebs.get(k) {
                Some(s) => s.forward(cx, enc.skips[k])?,
                None => enc.skips[k],
            };
            let up = cx.tape.upsample_bilinear_2x(h)?;
            h = cx.tape.concat_channels(&[up, skip])?;
            for conv in &stage.convs {
                h = conv.forward(cx, h)?;
            }
            if let Some(s) = self.decoder_sfebs.get(i) {
                h = s.forward(cx, h)?;
            }
        }
        let h = cx.tape.upsample_bilinear_2x(h)?;
        let logits = self.head.forward(cx, h)?;
        Ok(cx.tape.sigmoid(logits))
    }

    /// Eval-mode probabilities without recording gradients.
    pub fn predict(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut cx = Ctx::inference(store);
        let xv = cx.input(x.clone());
        let y = self.forward(&mut cx, xv)?;
        Ok(cx.tape.value(y).clone())
    }

    /// Named parameter totals per component.
    pub fn breakdown(&self, store: &ParamStore) -> Vec<(&'static str, usize)> {
        let sum = |ms: &[SfebWeights]| ms.iter().map(|m| m.param_count(store)).sum::<usize>();
        vec![
            ("encoder", self.encoder.param_count(store)),
            ("tam", self.tam.as_ref().map_or(0, |t| t.param_count(store))),
            ("sfeb", sum(&self.skip_sfebs) + sum(&self.decoder_sfebs)),
            ("decoder", self.decoder.iter().map(|d| d.param_count(store)).sum()),
            ("head", self.head.param_count(store)),
        ]
    }
}

impl Module for SegmentationModel {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.encoder.collect_params(out);
        if let Some(t) = &self.tam {
            t.collect_params(out);
        }
        self.skip_sfebs.iter().for_each(|s| s.collect_params(out));
        for (i, d) in self.decoder.iter().enumerate() {
            d.collect_params(out);
            if let Some(s) = self.decoder_sfebs.get(i) {
                s.collect_params(out);
            }
        }
        self.head.collect_params(out);
    }
}

/// `1` where `p >= threshold`, else `0`.
pub fn predict_mask(probs: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(probs.map(|p| if p >= threshold { 1.0 } else { 0.0 }))
}
