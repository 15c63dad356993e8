//! Exact permutation distribution of within-row rank sums under the null
//! that every row's ranks are exchangeable.

use std::collections::HashMap;

/// Doubled ranks (so averaged ties stay integral), 2 for the highest score.
fn doubled_ranks(row: &[f64]) -> Vec<i64> {
    row.iter()
        .map(|&v| {
            let above = row.iter().filter(|&&w| w > v).count() as i64;
            let equal = row.iter().filter(|&&w| w == v).count() as i64;
            2 * above + equal + 1
        })
        .collect()
}

fn permutations(v: &[i64]) -> Vec<Vec<i64>> {
    if v.len() <= 1 {
        return vec![v.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..v.len() {
        let mut rest = v.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

pub struct PermOracle {
    /// Observed doubled rank sums per column.
    pub observed: Vec<i64>,
    /// Null distribution of the doubled rank-sum vector.
    pub dist: HashMap<Vec<i64>, f64>,
}

impl PermOracle {
    pub fn new(rows: &[Vec<f64>]) -> Self {
        let k = rows[0].len();
        let mut observed = vec![0; k];
        let mut dist: HashMap<Vec<i64>, f64> = HashMap::from([(vec![0; k], 1.0)]);
        for row in rows {
            let r = doubled_ranks(row);
            for (o, v) in observed.iter_mut().zip(&r) {
                *o += v;
            }
            let perms = permutations(&r);
            let w = 1.0 / perms.len() as f64;
            let mut next = HashMap::with_capacity(dist.len() * 4);
            for (state, p) in &dist {
                for perm in &perms {
                    let s: Vec<i64> = state.iter().zip(perm).map(|(a, b)| a + b).collect();
                    *next.entry(s).or_insert(0.0) += p * w;
                }
            }
            dist = next;
        }
        PermOracle { observed, dist }
    }

    fn sum_sq(v: &[i64]) -> i64 {
        v.iter().map(|x| x * x).sum()
    }

    fn range(v: &[i64]) -> i64 {
        v.iter().max().unwrap() - v.iter().min().unwrap()
    }

    /// Exact p-value of the Friedman statistic (monotone in the sum of
    /// squared rank sums for a fixed tie pattern).
    pub fn friedman_p(&self) -> f64 {
        let obs = Self::sum_sq(&self.observed);
        self.dist.iter().filter(|(s, _)| Self::sum_sq(s) >= obs).map(|(_, p)| p).sum()
    }

    /// Smallest doubled rank-sum range whose upper tail is at most `alpha`;
    /// pairs at least this far apart are significant with family-wise
    /// control, as the Nemenyi test intends.
    pub fn range_critical(&self, alpha: f64) -> i64 {
        let mut by_range: Vec<(i64, f64)> = self.dist.iter().map(|(s, p)| (Self::range(s), *p)).collect();
        by_range.sort_by_key(|x| x.0);
        let max = by_range.last().unwrap().0;
        (0..=max + 1)
            .find(|&d| by_range.iter().filter(|x| x.0 >= d).map(|x| x.1).sum::<f64>() <= alpha)
            .unwrap()
    }

    pub fn pair_significant(&self, a: usize, b: usize, alpha: f64) -> bool {
        (self.observed[a] - self.observed[b]).abs() >= self.range_critical(alpha)
    }

    /// Exact p-value of one pair's difference under the range statistic.
    pub fn pair_p(&self, a: usize, b: usize) -> f64 {
        let d = (self.observed[a] - self.observed[b]).abs();
        self.dist.iter().filter(|(s, _)| Self::range(s) >= d).map(|(_, p)| p).sum()
    }
}

/// Enumerates every combination of row permutations directly.
pub fn brute_force_friedman_p(rows: &[Vec<f64>]) -> f64 {
    let k = rows[0].len();
    let perms: Vec<Vec<Vec<i64>>> = rows.iter().map(|r| permutations(&doubled_ranks(r))).collect();
    let observed: i64 = (0..k)
        .map(|j| rows.iter().map(|r| doubled_ranks(r)[j]).sum::<i64>())
        .map(|s| s * s)
        .sum();
    let mut hits = 0.0;
    let mut total = 0.0;
    let mut idx = vec![0usize; rows.len()];
    loop {
        let mut sums = vec![0i64; k];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..k {
                sums[j] += perms[r][i][j];
            }
        }
        total += 1.0;
        if sums.iter().map(|s| s * s).sum::<i64>() >= observed {
            hits += 1.0;
        }
        let mut r = 0;
        loop {
            if r == idx.len() {
                return hits / total;
            }
            idx[r] += 1;
            if idx[r] < perms[r].len() {
                break;
            }
            idx[r] = 0;
            r += 1;
        }
    }
}
