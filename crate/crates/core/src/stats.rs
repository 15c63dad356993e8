//! Friedman rank test across methods and the Nemenyi post hoc comparison.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Images as rows (blocks), methods as columns (treatments).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub methods: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(methods: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = methods.len();
        if k < 2 || rows.len() < 2 {
            return Err(Error::Config(format!(
                "score matrix needs at least 2 methods and 2 images, got {k} and {}",
                rows.len()
            )));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config(format!("score row {} is incomplete or non-finite", i + 1)));
        }
        Ok(ScoreMatrix { methods, rows })
    }

    /// Header of method names, one row of scores per image. A leading id
    /// column (headed `image_id`, `id` or `image`, or non-numeric) is dropped.
    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let records = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
        let id_header = header
            .first()
            .is_some_and(|h| matches!(h.to_ascii_lowercase().as_str(), "image_id" | "id" | "image"));
        let skip_first = id_header
            || records
                .first()
                .is_some_and(|rec| rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()));
        let start = skip_first as usize;
        let rows = records
            .iter()
            .enumerate()
            .map(|(i, rec)| {
                rec.iter()
                    .skip(start)
                    .map(|f| {
                        f.parse::<f64>()
                            .map_err(|_| Error::Config(format!("score row {}: {f:?} is not a number", i + 1)))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(header[start..].to_vec(), rows)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(f)
    }

    pub fn k(&self) -> usize {
        self.methods.len()
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }
}

/// Ranks within one row, 1 for the highest score, ties sharing the mean rank.
pub fn rank_row(row: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let mut ranks = vec![0.0; row.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && row[order[j + 1]] == row[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub p_value: f64,
    pub dof: usize,
    pub n: usize,
    pub k: usize,
    pub mean_ranks: Vec<f64>,
}

/// Tie-corrected Friedman chi-square with `k - 1` degrees of freedom.
pub fn friedman_test(m: &ScoreMatrix) -> Result<FriedmanResult> {
    let (n, k) = (m.n(), m.k());
    if k < 2 {
        return Err(Error::Config("Friedman test needs at least 2 methods".into()));
    }
    let mut sums = vec![0.0; k];
    let mut ties = 0.0;
    for row in &m.rows {
        let r = rank_row(row);
        for (s, v) in sums.iter_mut().zip(&r) {
            *s += v;
        }
        let mut sorted = r.clone();
        sorted.sort_by(f64::total_cmp);
        for group in sorted.chunk_by(|a, b| a == b) {
            let t = group.len() as f64;
            ties += t * t * t - t;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let ss: f64 = sums.iter().map(|s| s * s).sum();
    let correction = 1.0 - ties / (nf * kf * (kf * kf - 1.0));
    let raw = 12.0 / (nf * kf * (kf + 1.0)) * ss - 3.0 * nf * (kf + 1.0);
    let chi2 = if correction <= 1e-12 { 0.0 } else { (raw / correction).max(0.0) };
    let dist = ChiSquared::new(kf - 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let p_value = if chi2 == 0.0 { 1.0 } else { dist.sf(chi2) };
    Ok(FriedmanResult {
        chi2,
        p_value,
        dof: k - 1,
        n,
        k,
        mean_ranks: sums.iter().map(|s| s / nf).collect(),
    })
}

/// Two-tailed Nemenyi critical values `q_alpha / sqrt(2)` for k = 2..=10.
const Q_05: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];
const Q_01: [f64; 9] = [2.576, 2.913, 3.113, 3.255, 3.364, 3.452, 3.526, 3.590, 3.646];

pub fn critical_q(k: usize, alpha: Alpha) -> Result<f64> {
    if !(2..=10).contains(&k) {
        return Err(Error::UnsupportedK(k));
    }
    Ok(match alpha {
        Alpha::P05 => Q_05[k - 2],
        Alpha::P01 => Q_01[k - 2],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alpha {
    P05,
    P01,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Band {
    #[serde(rename = "<0.01")]
    Below01,
    #[serde(rename = "<0.05")]
    Below05,
    #[serde(rename = ">=0.05")]
    NotSignificant,
}

impl Band {
    pub fn label(self) -> &'static str {
        match self {
            Band::Below01 => "<0.01",
            Band::Below05 => "<0.05",
            Band::NotSignificant => ">=0.05",
        }
    }
}

/// `P(Q <= q)` for the studentized range of `k` standard normals with
/// infinite degrees of freedom, by Simpson quadrature of
/// `k * integral phi(z) [Phi(z) - Phi(z - q)]^(k-1) dz`.
pub fn studentized_range_cdf(q: f64, k: usize) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let (lo, hi, steps) = (-9.0, 9.0 + q, 4000);
    let h = (hi - lo) / steps as f64;
    let f = |z: f64| {
        let inner = normal.cdf(z) - normal.cdf(z - q);
        (-(z * z) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() * inner.powi(k as i32 - 1)
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..steps {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (k as f64 * acc * h / 3.0).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosthocResult {
    pub methods: Vec<String>,
    pub mean_ranks: Vec<f64>,
    /// `sqrt(k (k + 1) / (6 n))`.
    pub standard_error: f64,
    pub critical_difference_05: f64,
    pub critical_difference_01: f64,
    /// `|R_i - R_j| / SE`.
    pub z: Vec<Vec<f64>>,
    /// From the studentized range; diagonal and equal ranks give 1.
    pub p_values: Vec<Vec<f64>>,
    pub bands: Vec<Vec<Band>>,
}

pub fn nemenyi_posthoc(m: &ScoreMatrix) -> Result<PosthocResult> {
    let k = m.k();
    let (q05, q01) = (critical_q(k, Alpha::P05)?, critical_q(k, Alpha::P01)?);
    let f = friedman_test(m)?;
    let se = (k as f64 * (k as f64 + 1.0) / (6.0 * m.n() as f64)).sqrt();
    let mut z = vec![vec![0.0; k]; k];
    let mut p = vec![vec![1.0; k]; k];
    let mut bands = vec![vec![Band::NotSignificant; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let zij = (f.mean_ranks[i] - f.mean_ranks[j]).abs() / se;
            z[i][j] = zij;
            p[i][j] = 1.0 - studentized_range_cdf(zij * std::f64::consts::SQRT_2, k);
            bands[i][j] = if zij > q01 {
                Band::Below01
            } else if zij > q05 {
                Band::Below05
            } else {
                Band::NotSignificant
            };
        }
    }
    Ok(PosthocResult {
        methods: m.methods.clone(),
        mean_ranks: f.mean_ranks,
        standard_error: se,
        critical_difference_05: q05 * se,
        critical_difference_01: q01 * se,
        z,
        p_values: p,
        bands,
    })
}

impl PosthocResult {
    pub fn write_pairwise_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method_a", "method_b", "rank_difference", "z", "p_value", "band"])?;
        let k = self.methods.len();
        for i in 0..k {
            for j in i + 1..k {
                w.write_record([
                    self.methods[i].clone(),
                    self.methods[j].clone(),
                    (self.mean_ranks[i] - self.mean_ranks[j]).to_string(),
                    self.z[i][j].to_string(),
                    self.p_values[i][j].to_string(),
                    self.bands[i][j].label().to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
