//! Optimization loop: Adam, plateau schedule with early stopping, seeded
//! validation split, per-epoch history, and the component ablation.

mod adam;
mod schedule;

pub use adam::{Adam, AdamConfig};
pub use schedule::{Action, Schedule, ScheduleConfig};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint;
use crate::data::{seeded_permutation, SegmentationSample};
use crate::error::{Error, Result};
use crate::loss::combined_loss;
use crate::metrics::{evaluate, Evaluation, Metrics};
use crate::model::{build_model, predict_mask, ModelConfig, SegmentationModel};
use crate::params::{Ctx, Mode, Module, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub schedule: ScheduleConfig,
    pub val_fraction: f64,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 10,
            adam: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
            val_fraction: 0.2,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.adam.lr)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("validation fraction {} outside (0, 1)", self.val_fraction)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

/// Seeded shuffle, then `floor(n * fraction)` samples go to validation.
pub fn split_train_val<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 5 {
        return Err(Error::Config(format!("need at least 5 samples to split, got {}", items.len())));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let n_val = ((items.len() as f64) * fraction + 1e-9).floor() as usize;
    let perm = seeded_permutation(items.len(), seed);
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(&perm[n_val..]), pick(&perm[..n_val])))
}

/// Shuffled index batches; a trailing single sample joins the previous batch
/// so batch statistics never see a batch of one.
pub fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

pub fn stack_batch(samples: &[SegmentationSample], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].image).collect();
    let masks: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

#[derive(Clone, Debug)]
pub struct Validation {
    /// Sample-weighted mean of per-batch combined loss.
    pub loss: f64,
    pub evaluation: Evaluation,
    pub probabilities: Vec<Tensor>,
    /// Gradient-tracking nodes recorded while validating; always zero.
    pub grad_nodes: usize,
}

/// Eval-mode pass without gradient recording.
pub fn validate(
    model: &SegmentationModel,
    store: &mut ParamStore,
    samples: &[SegmentationSample],
    batch: usize,
    threshold: f64,
) -> Result<Validation> {
    if samples.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let (mut loss, mut grad_nodes) = (0.0, 0);
    let mut probabilities = Vec::with_capacity(samples.len());
    let order: Vec<usize> = (0..samples.len()).collect();
    for idx in order.chunks(batch.max(1)) {
        let (x, y) = stack_batch(samples, idx)?;
        let mut cx = Ctx::inference(store);
        let xv = cx.input(x);
        let p = model.forward(&mut cx, xv)?;
        let yv = cx.input(y);
        let l = combined_loss(&mut cx.tape, p, yv)?;
        loss += cx.tape.value(l).item()? * idx.len() as f64;
        grad_nodes += cx.tape.grad_node_count();
        let probs = cx.tape.value(p);
        probabilities.extend((0..idx.len()).map(|k| probs.index0(k)));
    }
    let preds = probabilities
        .iter()
        .map(|p| predict_mask(p, threshold))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    Ok(Validation {
        loss: loss / samples.len() as f64,
        evaluation: evaluate(&ids, &preds, &gts)?,
        probabilities,
        grad_nodes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Per-image means over the validation set.
    pub val: Metrics,
    pub action: Action,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Weights at `best_epoch`.
    pub best_store: ParamStore,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
    pub val_grad_nodes: usize,
}

impl TrainState {
    pub fn best_val_dice(&self) -> f64 {
        self.history.iter().map(|r| r.val.dice).fold(0.0, f64::max)
    }

    pub fn lr_trajectory(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.lr).collect()
    }
}

pub const HISTORY_COLUMNS: [&str; 11] = [
    "epoch",
    "lr",
    "train_loss",
    "val_loss",
    "val_dice",
    "val_jaccard",
    "val_sensitivity",
    "val_accuracy",
    "val_precision",
    "val_specificity",
    "action",
];

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_COLUMNS)?;
    for r in history {
        let m = &r.val;
        let action = serde_json::to_value(r.action)?;
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            m.dice.to_string(),
            m.jaccard.to_string(),
            m.sensitivity.to_string(),
            m.accuracy.to_string(),
            m.precision.to_string(),
            m.specificity.to_string(),
            action.as_str().unwrap_or_default().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains in place on `train_set`, monitoring `val_set`. When `out` is set,
/// `history.csv` is rewritten every epoch and `best.ckpt` on improvement.
pub fn train(
    model: &SegmentationModel,
    store: &mut ParamStore,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainState> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let ids = model.param_ids();
    let mut adam = Adam::new(store, cfg.adam);
    let mut schedule = Schedule::new(cfg.adam.lr, cfg.schedule);
    // Split and shuffle streams are kept apart so that changing one leaves the other intact.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let checkpoint_path = out.map(|d| d.join("best.ckpt"));
    let mut state = TrainState {
        history: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        best_store: store.clone(),
        stopped_early: false,
        checkpoint: checkpoint_path.clone(),
        val_grad_nodes: 0,
    };
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr();
        adam.set_lr(lr);
        let mut total = 0.0;
        for (b, idx) in shuffled_batches(train_set.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let (x, y) = stack_batch(train_set, idx)?;
            let mut cx = Ctx::with_tape(store, Mode::Train, Tape::new());
            let xv = cx.input(x);
            let p = model.forward(&mut cx, xv)?;
            let yv = cx.input(y);
            let l = combined_loss(&mut cx.tape, p, yv)?;
            let value = cx.tape.value(l).item()?;
            if !value.is_finite() {
                return Err(Error::Numerical { epoch, batch: b + 1, lr });
            }
            total += value * idx.len() as f64;
            let grads = cx.backward(l)?;
            adam.step(store, &ids, &grads)?;
        }
        let train_loss = total / train_set.len() as f64;
        let val = validate(model, store, val_set, cfg.batch_size, cfg.threshold)?;
        if !val.loss.is_finite() {
            return Err(Error::Numerical { epoch, batch: 0, lr });
        }
        state.val_grad_nodes += val.grad_nodes;
        if val.loss < state.best_val_loss {
            state.best_val_loss = val.loss;
            state.best_epoch = epoch;
            state.best_store = store.clone();
            if let Some(p) = &checkpoint_path {
                checkpoint::save(p, store)?;
            }
        }
        let action = schedule.observe(val.loss);
        state.history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss: val.loss,
            val: val.evaluation.mean.metrics,
            action,
        });
        if let Some(dir) = out {
            write_history_csv(&dir.join("history.csv"), &state.history)?;
        }
        if action == Action::Stop {
            state.stopped_early = true;
            break;
        }
    }
    Ok(state)
}

/// Table rows in stacking order: name, ConvBlock, SFEB, TAM.
pub const ABLATION_STEPS: [(&str, bool, bool, bool); 4] = [
    ("BL", false, false, false),
    ("BL + ConvBlock", true, false, false),
    ("BL + ConvBlock + SFEB", true, true, false),
    ("BL + ConvBlock + SFEB + TAM", true, true, true),
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub param_count: usize,
    pub epochs: usize,
    pub best_val_dice: f64,
    /// Per-image means on the test split using the best-validation weights.
    pub test: Metrics,
}

pub fn ablation_run(
    base: &ModelConfig,
    train_set: &[SegmentationSample],
    val_set: &[SegmentationSample],
    test_set: &[SegmentationSample],
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if test_set.is_empty() {
        return Err(Error::Config("ablation needs a held-out test split".into()));
    }
    ABLATION_STEPS
        .iter()
        .map(|&(name, cb, sf, tam)| {
            let mcfg = base.clone().with_components(cb, sf, tam);
            let (model, mut store) = build_model(&mcfg, cfg.seed)?;
            let param_count = model.param_count(&store);
            let state = train(&model, &mut store, train_set, val_set, cfg, None)?;
            let mut best = state.best_store.clone();
            let test = validate(&model, &mut best, test_set, cfg.batch_size, cfg.threshold)?;
            Ok(AblationRow {
                name: name.to_string(),
                param_count,
                epochs: state.history.len(),
                best_val_dice: state.best_val_dice(),
                test: test.evaluation.mean.metrics,
            })
        })
        .collect()
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["config", "parameters", "epochs", "best_val_dice"];
    header.extend(Metrics::NAMES);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.name.clone(), r.param_count.to_string(), r.epochs.to_string(), r.best_val_dice.to_string()];
        rec.extend(r.test.values().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
