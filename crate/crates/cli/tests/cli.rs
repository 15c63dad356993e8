use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--n", "32", "--seed", "7", "--out", p(&a)]);
    ok(&["synth", "--n", "32", "--seed", "7", "--out", p(&b)]);
    let fa = files(&a);
    assert_eq!(fa.len(), 64);
    assert_eq!(fa, files(&b));
    for f in &fa {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f:?}");
    }
}

#[test]
fn eval_of_perfect_predictions_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let pred = dir.path().join("pred");
    ok(&["synth", "--n", "12", "--seed", "3", "--out", p(&data)]);
    for f in files(&data) {
        let name = f.to_str().unwrap();
        if let Some(stem) = name.strip_suffix("_mask.png") {
            let target = pred.join(format!("{stem}.png"));
            std::fs::create_dir_all(target.parent().unwrap()).unwrap();
            std::fs::copy(data.join(&f), target).unwrap();
        }
    }
    let out = dir.path().join("eval");
    ok(&["eval", "--data", p(&data), "--pred", p(&pred), "--out", p(&out)]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for agg in ["per_image_mean", "global_pool"] {
        for m in ["jaccard", "dice", "sensitivity", "accuracy", "precision", "specificity"] {
            assert_eq!(summary[agg][m], 1.0, "{agg} {m}");
        }
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn gradcheck_rows_are_within_tolerance() {
    let out = ok(&["gradcheck", "--preset", "tiny"]);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    for r in rows {
        let cols: Vec<&str> = r.split_whitespace().collect();
        let err: f64 = cols[2].parse().unwrap();
        assert!(err < 1e-4, "{r}");
        assert_eq!(cols[5], "ok");
    }
}

#[test]
fn params_reports_monotone_ablation() {
    let out = ok(&["params", "--preset", "tiny", "--ablation"]);
    let totals: Vec<usize> = out
        .lines()
        .filter(|l| !l.starts_with(' '))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 5);
    assert!(totals[1..].windows(2).all(|w| w[0] < w[1]), "{totals:?}");
    assert_eq!(totals[0], totals[4]);
    let bare = ok(&["params", "--no-tam", "--no-sfeb", "--no-convblock"]);
    assert!(bare.starts_with(&format!("selected total {}", totals[1])));
}

#[test]
fn train_writes_provenance_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |o: &Path| {
        vec!["train", "--synthetic", "24", "--epochs", "2", "--batch", "6", "--seed", "5", "--test-size", "4", "--out"]
            .into_iter()
            .map(String::from)
            .chain([o.to_str().unwrap().to_string()])
            .collect::<Vec<_>>()
    };
    for o in [&a, &b] {
        let v = args(o);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for f in ["history.csv", "run_config.json", "model_config.json", "split.json", "best.ckpt", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let rc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(rc["command"], "train");
    assert_eq!(rc["config"]["train"]["batch_size"], 6);
    assert_eq!(rc["config"]["seed"], 5);
    assert!(a.join("test_metrics.csv").exists());

    // Weights and config from the run drive eval.
    let ev = dir.path().join("ev");
    let data = dir.path().join("data");
    ok(&["synth", "--n", "6", "--seed", "1", "--out", p(&data)]);
    ok(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&a.join("best.ckpt")),
        "--model-config",
        p(&a.join("model_config.json")),
        "--out",
        p(&ev),
        "--save-masks",
    ]);
    assert_eq!(files(&ev.join("masks")).len(), 6);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 9, "train": {"epochs": 1, "batch_size": 4}, "synthetic": 12}"#).unwrap();
    let out = dir.path().join("o");
    ok(&["train", "--config", p(&cfg), "--batch", "3", "--out", p(&out)]);
    let rc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(rc["config"]["train"]["batch_size"], 3);
    assert_eq!(rc["config"]["train"]["epochs"], 1);
    assert_eq!(rc["config"]["seed"], 9);
    assert_eq!(std::fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 2);
}

#[test]
fn stats_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    std::fs::write(&scores, "image_id,a,b,c\n1,0.9,0.5,0.4\n2,0.8,0.6,0.5\n3,0.85,0.4,0.45\n4,0.9,0.3,0.2\n").unwrap();
    let out = dir.path().join("st");
    let text = ok(&["stats", "--scores", p(&scores), "--out", p(&out)]);
    assert!(text.contains("chi2 = 6.500000"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(v["friedman"]["dof"], 2);
    assert_eq!(v["nemenyi"]["bands"][0][2], "<0.05");
    assert_eq!(std::fs::read_to_string(out.join("pairwise.csv")).unwrap().lines().count(), 4);
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let bad_lr = run(&["train", "--synthetic", "10", "--lr", "-1", "--out", p(&o)]);
    assert_eq!(bad_lr.status.code(), Some(1));
    assert_eq!(error_line(&bad_lr)["error"], "config");
    let bad_flag = run(&["train", "--frobnicate"]);
    assert_eq!(bad_flag.status.code(), Some(1));
    let missing = run(&["train", "--data", p(&dir.path().join("absent")), "--out", p(&o)]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(error_line(&missing)["error"], "io");
    let nan = run(&["train", "--synthetic", "10", "--epochs", "2", "--lr", "1e308", "--out", p(&o)]);
    assert_eq!(nan.status.code(), Some(3), "{}", String::from_utf8_lossy(&nan.stderr));
    let line = error_line(&nan);
    assert_eq!(line["error"], "numerical");
    assert_eq!(line["code"], 3);
    let threads = bin().env("ATTNSEG_THREADS", "zero").args(["params"]).output().unwrap();
    assert_eq!(threads.status.code(), Some(1));
    let big_k = dir.path().join("k.csv");
    let header: Vec<String> = (0..11).map(|j| format!("m{j}")).collect();
    let mut text = header.join(",") + "\n";
    for i in 0..3 {
        text += &(0..11).map(|j| ((i * 7 + j * 3) % 11).to_string()).collect::<Vec<_>>().join(",");
        text += "\n";
    }
    std::fs::write(&big_k, text).unwrap();
    let unsupported = run(&["stats", "--scores", p(&big_k), "--out", p(&o)]);
    assert_eq!(unsupported.status.code(), Some(1));
}

#[test]
fn overlay_writes_one_png_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "5", "--seed", "2", "--out", p(&data)]);
    let pred = dir.path().join("pred");
    for f in files(&data) {
        if let Some(stem) = f.to_str().unwrap().strip_suffix("_mask.png") {
            let target = pred.join(format!("{stem}.png"));
            std::fs::create_dir_all(target.parent().unwrap()).unwrap();
            std::fs::copy(data.join(&f), target).unwrap();
        }
    }
    let out = dir.path().join("ov");
    ok(&["overlay", "--data", p(&data), "--pred", p(&pred), "--out", p(&out)]);
    let pngs: Vec<_> = files(&out).into_iter().filter(|f| f.extension().is_some_and(|e| e == "png")).collect();
    assert_eq!(pngs.len(), 5);
}
