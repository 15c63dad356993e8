use std::collections::HashSet;

use attnseg::checkpoint;
use attnseg::gradcheck::{grad_check, GradCheckOptions};
use attnseg::loss::combined_loss;
use attnseg::model::{build_model, predict_mask, ModelConfig, Preset};
use attnseg::nn::ENCODER_STRIDE;
use attnseg::sfeb::SfebWeights;
use attnseg::tam::TamWeights;
use attnseg::{Ctx, Mode, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn tiny_forward_smoke() {
    let (model, mut store) = build_model(&ModelConfig::tiny(), 0).unwrap();
    let x = random(&[2, 1, 64, 64], 1);
    let mut cx = Ctx::new(&mut store, Mode::Train);
    let xv = cx.input(x.clone());
    let y = model.forward(&mut cx, xv).unwrap();
    let out = cx.tape.value(y);
    assert_eq!(out.shape(), &[2, 1, 64, 64]);
    assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
    let a = model.predict(&mut store, &x).unwrap();
    let b = model.predict(&mut store, &x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn full_preset_accepts_grayscale() {
    let mut cfg = ModelConfig::full();
    cfg.input_size = 64;
    let (model, mut store) = build_model(&cfg, 0).unwrap();
    let mut cx = Ctx::with_tape(&mut store, Mode::Train, attnseg::Tape::no_grad());
    let x = cx.input(random(&[1, 1, 64, 64], 2));
    let y = model.forward(&mut cx, x).unwrap();
    assert_eq!(cx.tape.shape(y), &[1, 1, 64, 64]);
}

#[test]
fn rejects_bad_inputs_and_configs() {
    let (model, mut store) = build_model(&ModelConfig::tiny(), 0).unwrap();
    let mut cx = Ctx::new(&mut store, Mode::Train);
    let x = cx.input(Tensor::zeros(&[1, 1, 32, 32]));
    assert!(model.forward(&mut cx, x).is_err());
    let x = cx.input(Tensor::zeros(&[1, 2, 64, 64]));
    assert!(model.forward(&mut cx, x).is_err());
    for mutate in [
        (|c: &mut ModelConfig| c.input_size = 48) as fn(&mut ModelConfig),
        |c| c.threshold = 1.0,
        |c| c.decoder_widths = vec![8, 8, 8],
        |c| c.decoder_widths[2] = 0,
    ] {
        let mut cfg = ModelConfig::tiny();
        mutate(&mut cfg);
        assert!(build_model(&cfg, 0).is_err());
    }
    assert!("huge".parse::<Preset>().is_err());
}

#[test]
fn registry_holds_each_tensor_once() {
    let cfg = ModelConfig {
        sfeb_in_decoder: true,
        ..ModelConfig::tiny()
    };
    let (model, store) = build_model(&cfg, 0).unwrap();
    let ids = model.param_ids();
    assert_eq!(ids.len(), store.len());
    assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
    let total: usize = model.breakdown(&store).iter().map(|(_, n)| n).sum();
    assert_eq!(total, store.total_scalars());
}

#[test]
fn same_seed_same_parameters() {
    let (_, a) = build_model(&ModelConfig::tiny(), 5).unwrap();
    let (_, b) = build_model(&ModelConfig::tiny(), 5).unwrap();
    let (_, c) = build_model(&ModelConfig::tiny(), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn toggles_change_counts_by_closed_forms() {
    for preset in [Preset::Tiny, Preset::Full] {
        let base = ModelConfig::new(preset);
        let count = |cfg: &ModelConfig| {
            let (m, s) = build_model(cfg, 0).unwrap();
            m.param_count(&s)
        };
        let all = count(&base);
        let c = match preset {
            Preset::Tiny => 32,
            Preset::Full => 1024,
        };
        let side = base.input_size / ENCODER_STRIDE;
        let no_tam = count(&base.clone().with_components(true, true, false));
        assert_eq!(all - no_tam, TamWeights::analytic_param_count(c, side, side, &base.tam));
        let no_sfeb = count(&base.clone().with_components(true, false, true));
        let skips: [usize; 4] = match preset {
            Preset::Tiny => [16, 32, 32, 32],
            Preset::Full => [64, 256, 512, 1024],
        };
        assert_eq!(all - no_sfeb, skips.iter().map(|&k| SfebWeights::analytic_param_count(k)).sum::<usize>());
    }
}

#[test]
fn ablation_counts_strictly_increase() {
    for preset in [Preset::Tiny, Preset::Full] {
        let counts: Vec<usize> = [(false, false, false), (true, false, false), (true, true, false), (true, true, true)]
            .iter()
            .map(|&(cb, sf, tam)| {
                let (m, s) = build_model(&ModelConfig::new(preset).with_components(cb, sf, tam), 0).unwrap();
                m.param_count(&s)
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{preset:?} {counts:?}");
    }
}

#[test]
fn baseline_has_no_attention_parameters() {
    let (m, s) = build_model(&ModelConfig::tiny().with_components(false, false, false), 0).unwrap();
    assert!(m.tam.is_none() && m.skip_sfebs.is_empty());
    assert!(m.decoder.iter().all(|d| d.convs.len() == 1));
    assert!(s.params().all(|(_, name, _)| !name.starts_with("tam") && !name.contains("sfeb")));
}

#[test]
fn thresholding() {
    let p = Tensor::full(&[1, 1, 2, 2], 0.9);
    assert_eq!(predict_mask(&p, 0.5).unwrap(), Tensor::ones(&[1, 1, 2, 2]));
    assert_eq!(predict_mask(&p, 0.95).unwrap(), Tensor::zeros(&[1, 1, 2, 2]));
    let q = random(&[3, 1, 8, 8], 3);
    let m = predict_mask(&q, 0.4).unwrap();
    for (a, b) in q.data().iter().zip(m.data()) {
        assert_eq!(*b, if *a >= 0.4 { 1.0 } else { 0.0 });
    }
    assert!(predict_mask(&p, 0.0).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let (model, mut store) = build_model(&ModelConfig::tiny(), 1).unwrap();
    let x = random(&[2, 1, 64, 64], 4);
    {
        let mut cx = Ctx::new(&mut store, Mode::Train);
        let xv = cx.input(x.clone());
        model.forward(&mut cx, xv).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    checkpoint::save(&path, &store).unwrap();
    let (_, mut other) = build_model(&ModelConfig::tiny(), 2).unwrap();
    assert_ne!(other, store);
    checkpoint::load(&path, &mut other).unwrap();
    assert_eq!(other, store);
    assert_eq!(model.predict(&mut other, &x).unwrap(), model.predict(&mut store, &x).unwrap());
    let (_, mut wrong) = build_model(&ModelConfig::tiny().with_components(true, true, false), 0).unwrap();
    assert!(checkpoint::load(&path, &mut wrong).is_err());
    assert!(checkpoint::load_bytes(&mut other, &[1, 2, 3]).is_err());
}

#[test]
fn tiny_model_gradients_with_combined_loss() {
    let (model, mut store) = build_model(&ModelConfig::tiny(), 7).unwrap();
    let x = random(&[2, 1, 64, 64], 8);
    let y = random(&[2, 1, 64, 64], 9).map(|v| if v > 0.7 { 1.0 } else { 0.0 });
    {
        let mut cx = Ctx::new(&mut store, Mode::Train);
        let xv = cx.input(x.clone());
        model.forward(&mut cx, xv).unwrap();
    }
    let targets = model.param_ids();
    let opts = GradCheckOptions {
        mode: Mode::Eval,
        max_coords: Some(2),
        seed: 1,
        ..GradCheckOptions::default()
    };
    let start = std::time::Instant::now();
    let report = grad_check(&mut store, &targets, &opts, |cx| {
        let xv = cx.input(x.clone());
        let p = model.forward(cx, xv)?;
        let t = cx.input(y.clone());
        combined_loss(&mut cx.tape, p, t)
    })
    .unwrap();
    eprintln!("{report:?} in {:?}", start.elapsed());
    assert!(report.checked > 200);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
