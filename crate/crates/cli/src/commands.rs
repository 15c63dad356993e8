use std::path::Path;

use attnseg::checkpoint;
use attnseg::data::{
    fixed_test_split, load_dataset, overlay, read_mask, scan_manifest, synth_dataset, write_busi_layout,
    write_mask_png, write_rgb_png, SegmentationSample, SynthOptions,
};
use attnseg::gradcheck::suite::{self, BlockCheck, BLOCKS};
use attnseg::metrics::evaluate;
use attnseg::model::{build_model, predict_mask, ModelConfig, Preset, SegmentationModel};
use attnseg::stats::{friedman_test, nemenyi_posthoc, ScoreMatrix};
use attnseg::trainer::{ablation_run, split_train_val, train, validate, write_ablation_csv, ABLATION_STEPS};
use attnseg::{Error, Module, ParamStore, Result, Tensor};
use serde::Serialize;

use crate::args::{EvalCmd, GradcheckCmd, ParamsCmd, StatsCmd, SynthCmd, TrainCmd};
use crate::config::{create_dir, io_error, read_json, resolve_model, resolve_run, write_json, RunConfig};

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    config: &'a RunConfig,
}

fn dataset(cfg: &RunConfig) -> Result<Vec<SegmentationSample>> {
    match (&cfg.data, cfg.synthetic) {
        (Some(root), _) => load_dataset(root, cfg.model.input_size),
        (None, Some(n)) => {
            let opts = SynthOptions {
                size: cfg.model.input_size,
                ..SynthOptions::default()
            };
            synth_dataset(n, cfg.seed, &opts)
        }
        (None, None) => Err(Error::Config("no dataset configured".into())),
    }
}

struct Splits {
    train: Vec<SegmentationSample>,
    val: Vec<SegmentationSample>,
    test: Vec<SegmentationSample>,
}

#[derive(Serialize)]
struct SplitIds<'a> {
    train: Vec<&'a str>,
    val: Vec<&'a str>,
    test: Vec<&'a str>,
}

fn ids(v: &[SegmentationSample]) -> Vec<&str> {
    v.iter().map(|x| x.id.as_str()).collect()
}

fn split(cfg: &RunConfig, samples: Vec<SegmentationSample>) -> Result<Splits> {
    let (pool, test) = match cfg.test_size {
        Some(t) if t > 0 => {
            if t >= samples.len() {
                return Err(Error::Config(format!("test size {t} leaves no training data")));
            }
            fixed_test_split(&samples, samples.len() - t, t, cfg.seed)?
        }
        _ => (samples, Vec::new()),
    };
    let (train, val) = split_train_val(&pool, cfg.train.val_fraction, cfg.seed)?;
    Ok(Splits { train, val, test })
}

fn write_splits(dir: &Path, s: &Splits) -> Result<()> {
    let split = SplitIds {
        train: ids(&s.train),
        val: ids(&s.val),
        test: ids(&s.test),
    };
    write_json(&dir.join("split.json"), &split)
}

/// Sample ids may carry a class folder, as in `benign/benign (3)`.
fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) => create_dir(p),
        None => Ok(()),
    }
}

fn prepare_out(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("run_config.json"), &Provenance { command, config: cfg })?;
    write_json(&dir.join("model_config.json"), &cfg.model)
}

pub fn train_cmd(cmd: &TrainCmd) -> Result<()> {
    let cfg = resolve_run(&cmd.model, &cmd.data, &cmd.train)?;
    prepare_out(&cmd.out, "train", &cfg)?;
    let splits = split(&cfg, dataset(&cfg)?)?;
    write_splits(&cmd.out, &splits)?;
    let (model, mut store) = build_model(&cfg.model, cfg.seed)?;
    let state = train(&model, &mut store, &splits.train, &splits.val, &cfg.train, Some(&cmd.out))?;
    checkpoint::save(&cmd.out.join("last.ckpt"), &store)?;
    let mut summary = serde_json::json!({
        "parameters": model.param_count(&store),
        "epochs_run": state.history.len(),
        "stopped_early": state.stopped_early,
        "best_epoch": state.best_epoch,
        "best_val_loss": state.best_val_loss,
        "best_val_dice": state.best_val_dice(),
        "train_samples": splits.train.len(),
        "val_samples": splits.val.len(),
    });
    if !splits.test.is_empty() {
        let mut best = state.best_store.clone();
        let test = validate(&model, &mut best, &splits.test, cfg.train.batch_size, cfg.model.threshold)?;
        test.evaluation.write_csv(&cmd.out.join("test_metrics.csv"))?;
        test.evaluation.write_summary_json(&cmd.out.join("test_summary.json"))?;
        summary["test_dice"] = test.evaluation.mean.metrics.dice.into();
    }
    write_json(&cmd.out.join("summary.json"), &summary)?;
    println!(
        "trained {} epochs; best epoch {} (val loss {:.6}, best val dice {:.4})",
        state.history.len(),
        state.best_epoch,
        state.best_val_loss,
        state.best_val_dice()
    );
    Ok(())
}

pub fn ablate_cmd(cmd: &TrainCmd) -> Result<()> {
    let mut cfg = resolve_run(&cmd.model, &cmd.data, &cmd.train)?;
    let samples = dataset(&cfg)?;
    if cfg.test_size.is_none() {
        cfg.test_size = Some(samples.len() / 5);
    }
    prepare_out(&cmd.out, "ablate", &cfg)?;
    let splits = split(&cfg, samples)?;
    write_splits(&cmd.out, &splits)?;
    let rows = ablation_run(&cfg.model, &splits.train, &splits.val, &splits.test, &cfg.train)?;
    write_ablation_csv(&cmd.out.join("ablation.csv"), &rows)?;
    write_json(&cmd.out.join("ablation.json"), &rows)?;
    println!("{:<30} {:>12} {:>7} {:>9} {:>9}", "config", "parameters", "epochs", "val_dice", "test_dice");
    for r in &rows {
        println!(
            "{:<30} {:>12} {:>7} {:>9.4} {:>9.4}",
            r.name, r.param_count, r.epochs, r.best_val_dice, r.test.dice
        );
    }
    Ok(())
}

/// The model for checkpoint-driven commands: `--model-config` if given,
/// else the model flags.
fn checkpoint_model(cmd: &EvalCmd, path: &Path) -> Result<(ModelConfig, SegmentationModel, ParamStore)> {
    let mut rc = resolve_model(&cmd.model, None)?;
    if let Some(mc) = &cmd.model_config {
        rc.model = read_json(mc)?;
        if let Some(t) = cmd.model.threshold {
            rc.model.threshold = t;
        }
        rc.model.validate()?;
    }
    let (model, mut store) = build_model(&rc.model, rc.seed)?;
    checkpoint::load(path, &mut store)?;
    Ok((rc.model, model, store))
}

struct Scored {
    samples: Vec<SegmentationSample>,
    preds: Vec<Tensor>,
}

fn predictions(cmd: &EvalCmd) -> Result<(Scored, f64)> {
    if let Some(ckpt) = &cmd.checkpoint {
        let (mcfg, model, mut store) = checkpoint_model(cmd, ckpt)?;
        if cmd.size.is_some_and(|s| s != mcfg.input_size) {
            return Err(Error::Config(format!("model input size is {}", mcfg.input_size)));
        }
        let samples = load_dataset(&cmd.data, mcfg.input_size)?;
        let v = validate(&model, &mut store, &samples, cmd.batch, mcfg.threshold)?;
        let preds = v
            .probabilities
            .iter()
            .map(|p| predict_mask(p, mcfg.threshold))
            .collect::<Result<Vec<_>>>()?;
        return Ok((Scored { samples, preds }, mcfg.threshold));
    }
    let dir = cmd.pred.as_ref().expect("clap requires --pred or --checkpoint");
    let rc = resolve_model(&cmd.model, None)?;
    let size = cmd.size.unwrap_or(rc.model.input_size);
    let manifest = scan_manifest(&cmd.data)?;
    let samples = attnseg::data::load_manifest(&manifest, size)?;
    let preds = samples
        .iter()
        .map(|s| read_mask(&dir.join(format!("{}.png", s.id)), Some(size)))
        .collect::<Result<Vec<_>>>()?;
    Ok((Scored { samples, preds }, rc.model.threshold))
}

pub fn eval_cmd(cmd: &EvalCmd) -> Result<()> {
    let (scored, _) = predictions(cmd)?;
    create_dir(&cmd.out)?;
    let ids: Vec<String> = scored.samples.iter().map(|s| s.id.clone()).collect();
    let gts: Vec<Tensor> = scored.samples.iter().map(|s| s.mask.clone()).collect();
    let ev = evaluate(&ids, &scored.preds, &gts)?;
    ev.write_csv(&cmd.out.join("metrics.csv"))?;
    ev.write_summary_json(&cmd.out.join("summary.json"))?;
    if cmd.save_masks && cmd.checkpoint.is_some() {
        let dir = cmd.out.join("masks");
        create_dir(&dir)?;
        for (id, p) in ids.iter().zip(&scored.preds) {
            let path = dir.join(format!("{id}.png"));
            create_parent(&path)?;
            write_mask_png(p, &path)?;
        }
    }
    println!("{:<12} {:>14} {:>12}", "metric", "per_image_mean", "global_pool");
    for (name, (a, b)) in attnseg::metrics::Metrics::NAMES
        .iter()
        .zip(ev.mean.metrics.values().iter().zip(ev.pooled.metrics.values()))
    {
        println!("{name:<12} {a:>14.6} {b:>12.6}");
    }
    Ok(())
}

pub fn overlay_cmd(cmd: &EvalCmd) -> Result<()> {
    let (scored, _) = predictions(cmd)?;
    create_dir(&cmd.out)?;
    for (s, p) in scored.samples.iter().zip(&scored.preds) {
        // First channel as the grayscale base.
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        let base = Tensor::from_vec(&[1, h, w], s.image.data()[..h * w].to_vec())?;
        let img = overlay(p, &s.mask, &base)?;
        let path = cmd.out.join(format!("{}_overlay.png", s.id));
        create_parent(&path)?;
        write_rgb_png(&img, &path)?;
    }
    println!("wrote {} overlays to {}", scored.samples.len(), cmd.out.display());
    Ok(())
}

pub fn stats_cmd(cmd: &StatsCmd) -> Result<()> {
    let m = ScoreMatrix::from_csv(&cmd.scores)?;
    let f = friedman_test(&m)?;
    let ph = nemenyi_posthoc(&m)?;
    create_dir(&cmd.out)?;
    write_json(
        &cmd.out.join("stats.json"),
        &serde_json::json!({ "friedman": f, "nemenyi": ph }),
    )?;
    ph.write_pairwise_csv(&cmd.out.join("pairwise.csv"))?;
    println!("friedman chi2 = {:.6}, dof = {}, p = {:.6e}, n = {}", f.chi2, f.dof, f.p_value, f.n);
    println!(
        "nemenyi CD(0.05) = {:.4}, CD(0.01) = {:.4}",
        ph.critical_difference_05, ph.critical_difference_01
    );
    for (name, r) in ph.methods.iter().zip(&ph.mean_ranks) {
        println!("  {name:<24} mean rank {r:.4}");
    }
    Ok(())
}

pub fn synth_cmd(cmd: &SynthCmd) -> Result<()> {
    let opts = SynthOptions {
        size: cmd.size,
        ..SynthOptions::default()
    };
    let samples = synth_dataset(cmd.n, cmd.seed, &opts)?;
    create_dir(&cmd.out)?;
    write_busi_layout(&samples, &cmd.out)?;
    println!("wrote {} samples to {}", samples.len(), cmd.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ParamReport {
    config: String,
    total: usize,
    components: Vec<(&'static str, usize)>,
}

fn param_report(name: String, cfg: &ModelConfig) -> Result<ParamReport> {
    let (model, store) = build_model(cfg, 0)?;
    Ok(ParamReport {
        config: name,
        total: model.param_count(&store),
        components: model.breakdown(&store),
    })
}

pub fn params_cmd(cmd: &ParamsCmd) -> Result<()> {
    let rc = resolve_model(&cmd.model, None)?;
    let mut reports = vec![param_report("selected".into(), &rc.model)?];
    if cmd.ablation {
        for &(name, cb, sf, tam) in &ABLATION_STEPS {
            reports.push(param_report(name.into(), &rc.model.clone().with_components(cb, sf, tam))?);
        }
    }
    for r in &reports {
        println!("{} total {}", r.config, r.total);
        for (c, n) in &r.components {
            println!("  {c:<10} {n:>12}");
        }
    }
    if let Some(dir) = &cmd.out {
        create_dir(dir)?;
        write_json(&dir.join("params.json"), &reports)?;
    }
    Ok(())
}

/// Returns the rows and whether all of them are within tolerance.
pub fn gradcheck_cmd(cmd: &GradcheckCmd) -> Result<bool> {
    if cmd.preset != Preset::Tiny {
        return Err(Error::Config("gradcheck runs on the tiny preset only".into()));
    }
    let blocks: Vec<&str> = match &cmd.block {
        Some(b) => vec![b.as_str()],
        None => BLOCKS.to_vec(),
    };
    let mut rows: Vec<BlockCheck> = Vec::new();
    println!("{:<14} {:>6} {:>14} {:>8} {:>8}  status", "block", "seed", "max_rel_error", "checked", "skipped");
    for seed in cmd.seed..cmd.seed + cmd.seeds {
        for b in &blocks {
            let r = suite::check(b, seed)?;
            let ok = r.max_rel_error < cmd.tolerance && r.checked > 0;
            println!(
                "{:<14} {:>6} {:>14.3e} {:>8} {:>8}  {}",
                r.block,
                r.seed,
                r.max_rel_error,
                r.checked,
                r.skipped,
                if ok { "ok" } else { "FAIL" }
            );
            rows.push(r);
        }
    }
    if let Some(dir) = &cmd.out {
        create_dir(dir)?;
        let path = dir.join("gradcheck.csv");
        let mut text = String::from("block,seed,max_rel_error,checked,skipped\n");
        for r in &rows {
            text.push_str(&format!("{},{},{:e},{},{}\n", r.block, r.seed, r.max_rel_error, r.checked, r.skipped));
        }
        std::fs::write(&path, text).map_err(|e| io_error(&path, e))?;
    }
    Ok(rows.iter().all(|r| r.max_rel_error < cmd.tolerance && r.checked > 0))
}
