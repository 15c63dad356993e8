//! Per-block gradient checks at randomized weights and inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{grad_check, GradCheckOptions, GradCheckReport};
use crate::error::Result;
use crate::loss::combined_loss;
use crate::model::{build_model, ModelConfig};
use crate::nn::{Builder, ConvBnRelu, DenseBlock, DenseBlockConfig, Transition};
use crate::params::{Ctx, Mode, Module, ParamId, ParamStore};
use crate::sfeb::SfebWeights;
use crate::tam::{TamConfig, TamWeights};
use crate::tensor::Tensor;

pub const BLOCKS: [&str; 8] = [
    "conv_bn_relu",
    "dense_block",
    "transition",
    "tsa",
    "gsa",
    "tam_fusion",
    "sfeb",
    "tiny_model",
];

#[derive(Clone, Debug, Serialize)]
pub struct BlockCheck {
    pub block: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl BlockCheck {
    fn new(block: &'static str, seed: u64, r: GradCheckReport) -> Self {
        BlockCheck {
            block,
            seed,
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            skipped: r.skipped,
        }
    }
}

/// Moves batch-norm affine parameters and position embeddings away from
/// their constant init so gradients are exercised at a generic point.
fn perturb_affine(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<(ParamId, (f64, f64))> = store
        .params()
        .filter_map(|(id, name, _)| {
            if name.ends_with(".gamma") {
                Some((id, (0.5, 1.5)))
            } else if name.ends_with(".beta") {
                Some((id, (-0.3, 0.8)))
            } else if name.ends_with(".pos_embed") {
                Some((id, (-0.5, 0.5)))
            } else {
                None
            }
        })
        .collect();
    for (id, (lo, hi)) in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::uniform(&shape, lo, hi, rng);
    }
}

/// Checks `forward(x)` contracted with a random probe, against the block's
/// parameters and its input.
fn check_block<F>(
    mut b: Builder,
    input_shape: &[usize],
    mode: Mode,
    seed: u64,
    mut targets: Vec<ParamId>,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, crate::Var) -> Result<crate::Var>,
{
    let x = b.constant("x", input_shape, 0.0);
    let mut store = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    perturb_affine(&mut store, &mut rng);
    *store.get_mut(x) = Tensor::randn(input_shape, 1.0, &mut rng);
    {
        // Initializes running statistics for eval-mode checks.
        let mut cx = Ctx::new(&mut store, Mode::Train);
        let xv = cx.param(x);
        forward(&mut cx, xv)?;
    }
    targets.push(x);
    let mut probe: Option<Tensor> = None;
    let opts = GradCheckOptions {
        mode,
        seed,
        ..GradCheckOptions::default()
    };
    grad_check(&mut store, &targets, &opts, |cx| {
        let xv = cx.param(x);
        let y = forward(cx, xv)?;
        let shape = cx.tape.shape(y).to_vec();
        let p = probe.get_or_insert_with(|| Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
        let p = cx.input(p.clone());
        let y = cx.tape.mul(y, p)?;
        Ok(cx.tape.sum(y))
    })
}

fn tam_config(seed: u64) -> TamConfig {
    TamConfig {
        heads: if seed % 2 == 0 { 1 } else { 2 },
        ..TamConfig::default()
    }
}

fn tam_block(seed: u64) -> (Builder, TamWeights) {
    let mut b = Builder::new(seed);
    let tam = TamWeights::new(&mut b, "tam", 4, 2, 2, tam_config(seed)).expect("valid tam shape");
    (b, tam)
}

pub fn check(block: &str, seed: u64) -> Result<BlockCheck> {
    let report = match block {
        "conv_bn_relu" => {
            let mut b = Builder::new(seed);
            let m = ConvBnRelu::new(&mut b, "cbr", 3, 4);
            check_block(b, &[2, 3, 5, 5], Mode::Train, seed, m.param_ids(), |cx, x| m.forward(cx, x))?
        }
        "dense_block" => {
            let cfg = DenseBlockConfig {
                num_layers: 2,
                growth_rate: 2,
                bn_size: 2,
            };
            let mut b = Builder::new(seed);
            let m = DenseBlock::new(&mut b, "db", 3, &cfg)?;
            check_block(b, &[2, 3, 4, 4], Mode::Train, seed, m.param_ids(), |cx, x| m.forward(cx, x))?
        }
        "transition" => {
            let mut b = Builder::new(seed);
            let m = Transition::new(&mut b, "tl", 4, 0.5)?;
            check_block(b, &[2, 4, 4, 4], Mode::Train, seed, m.param_ids(), |cx, x| m.forward(cx, x))?
        }
        "tsa" | "gsa" | "tam_fusion" => {
            let (b, tam) = tam_block(seed);
            let ids = tam.param_ids();
            let which = block;
            check_block(b, &[2, 4, 2, 2], Mode::Train, seed, ids, |cx, x| match which {
                "tsa" => Ok(tam.tsa(cx, x)?.out),
                "gsa" => Ok(tam.gsa(cx, x)?.out),
                _ => tam.forward(cx, x),
            })?
        }
        "sfeb" => {
            // Batch norm over pooled 1x1 maps sees one value per image; with
            // two images it is close to a step function and the central
            // difference error grows as eps^2 times a large third derivative.
            let mut b = Builder::new(seed);
            let m = SfebWeights::new(&mut b, "sfeb", 3);
            check_block(b, &[4, 3, 4, 4], Mode::Train, seed, m.param_ids(), |cx, x| m.forward(cx, x))?
        }
        "tiny_model" => tiny_model(seed)?,
        other => {
            return Err(crate::Error::Config(format!(
                "unknown block `{other}` (expected one of {})",
                BLOCKS.join(", ")
            )))
        }
    };
    Ok(BlockCheck::new(BLOCKS.iter().find(|b| **b == block).unwrap(), seed, report))
}

/// Full tiny network under the combined loss. Batch norm runs on stored
/// statistics: at the 2x2 bottleneck with two images, batch statistics are
/// close to degenerate and the central difference becomes ill-conditioned.
fn tiny_model(seed: u64) -> Result<GradCheckReport> {
    let (model, mut store) = build_model(&ModelConfig::tiny(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57);
    perturb_affine(&mut store, &mut rng);
    let x = Tensor::uniform(&[2, 1, 64, 64], 0.0, 1.0, &mut rng);
    let y = Tensor::uniform(&[2, 1, 64, 64], 0.0, 1.0, &mut rng).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
    {
        let mut cx = Ctx::new(&mut store, Mode::Train);
        let xv = cx.input(x.clone());
        model.forward(&mut cx, xv)?;
    }
    let opts = GradCheckOptions {
        mode: Mode::Eval,
        max_coords: Some(2),
        seed,
        ..GradCheckOptions::default()
    };
    grad_check(&mut store, &model.param_ids(), &opts, |cx| {
        let xv = cx.input(x.clone());
        let p = model.forward(cx, xv)?;
        let t = cx.input(y.clone());
        combined_loss(&mut cx.tape, p, t)
    })
}

/// Every block at one seed.
pub fn run_all(seed: u64) -> Result<Vec<BlockCheck>> {
    BLOCKS.iter().map(|b| check(b, seed)).collect()
}
