//! Pixel-count segmentation metrics.
//!
//! Empty denominators resolve to perfect agreement when nothing was missed:
//! an empty prediction against an empty mask scores 1 on every metric;
//! precision with no positive predictions is 1 only if there were no false
//! negatives, and recall and specificity are treated symmetrically.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

fn check_binary(t: &Tensor) -> Result<()> {
    match t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&v) => Err(Error::NonBinary(v)),
        None => Ok(()),
    }
}

pub fn confusion_counts(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("confusion_counts", pred.shape(), gt.shape()));
    }
    check_binary(pred)?;
    check_binary(gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub jaccard: f64,
    pub dice: f64,
    pub sensitivity: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub specificity: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 6] = ["jaccard", "dice", "sensitivity", "accuracy", "precision", "specificity"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.jaccard,
            self.dice,
            self.sensitivity,
            self.accuracy,
            self.precision,
            self.specificity,
        ]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Metrics {
            jaccard: v[0],
            dice: v[1],
            sensitivity: v[2],
            accuracy: v[3],
            precision: v[4],
            specificity: v[5],
        }
    }

    pub fn mean(all: &[Metrics]) -> Option<Metrics> {
        if all.is_empty() {
            return None;
        }
        let mut acc = [0.0; 6];
        for m in all {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / all.len() as f64)))
    }
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    let ConfusionCounts { tp, fp, fn_, tn } = *c;
    let perfect = |misses: u64| if misses == 0 { 1.0 } else { 0.0 };
    Metrics {
        jaccard: ratio(tp, tp + fp + fn_, 1.0),
        dice: ratio(2 * tp, 2 * tp + fp + fn_, 1.0),
        sensitivity: ratio(tp, tp + fn_, perfect(fp)),
        accuracy: ratio(tp + tn, c.total(), 1.0),
        precision: ratio(tp, tp + fp, perfect(fn_)),
        specificity: ratio(tn, tn + fp, perfect(fn_)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    PerImageMean,
    GlobalPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aggregation: Aggregation,
    pub images: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Per-image metrics plus both aggregate reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub counts: Vec<ConfusionCounts>,
    pub per_image: Vec<Metrics>,
    pub mean: MetricReport,
    pub pooled: MetricReport,
}

pub fn evaluate(ids: &[String], preds: &[Tensor], gts: &[Tensor]) -> Result<Evaluation> {
    if preds.len() != gts.len() || ids.len() != preds.len() || preds.is_empty() {
        return Err(Error::Config(format!(
            "evaluation needs matching non-empty lists, got {} ids, {} predictions, {} masks",
            ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    let counts = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| confusion_counts(p, g))
        .collect::<Result<Vec<_>>>()?;
    let per_image: Vec<Metrics> = counts.iter().map(compute_metrics).collect();
    let mut pool = ConfusionCounts::default();
    counts.iter().for_each(|&c| pool += c);
    let n = counts.len();
    Ok(Evaluation {
        ids: ids.to_vec(),
        mean: MetricReport {
            aggregation: Aggregation::PerImageMean,
            images: n,
            metrics: Metrics::mean(&per_image).expect("non-empty"),
        },
        pooled: MetricReport {
            aggregation: Aggregation::GlobalPool,
            images: n,
            metrics: compute_metrics(&pool),
        },
        counts,
        per_image,
    })
}

impl Evaluation {
    /// `image_id` plus the six metrics, one row per image.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["image_id"];
        header.extend(Metrics::NAMES);
        w.write_record(&header)?;
        for (id, m) in self.ids.iter().zip(&self.per_image) {
            let mut row = vec![id.clone()];
            row.extend(m.values().iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        let summary = serde_json::json!({
            "per_image_mean": self.mean,
            "global_pool": self.pooled,
        });
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(&mut f, &summary)?;
        writeln!(f).map_err(|e| Error::io(path, e))
    }
}
