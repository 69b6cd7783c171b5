//! Ranking metrics, DCI disentanglement and seed aggregation.

use log::warn;

use crate::error::{Error, Result};

/// Scores with binary labels; `true` marks an anomaly (the positive class).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredTestSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredTestSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension {
                op: "scored test set",
                lhs: vec![scores.len()],
                rhs: vec![labels.len()],
            });
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::UndefinedMetric("NaN score".into()));
        }
        Ok(ScoredTestSet { scores, labels })
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }
}

/// Probability that a random anomaly outscores a random nominal sample,
/// ties counting one half. Computed from midranks.
pub fn auc(set: &ScoredTestSet) -> Result<f64> {
    let (pos, neg) = set.counts();
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both nominal and anomalous samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    // Twice the rank sum of the positives keeps midranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && set.scores[order[end]] == set.scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end; their mean doubled is start + end + 1.
        let twice_mid = (start + end + 1) as u64;
        let hits = order[start..end].iter().filter(|&&i| set.labels[i]).count() as u64;
        twice_rank_sum += twice_mid * hits;
        start = end;
    }
    let twice_u = twice_rank_sum - (pos as u64) * (pos as u64 + 1);
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Average precision together with whether tied scores were present.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AveragePrecision {
    pub value: f64,
    /// Ties were broken by input order, so the value depends on it.
    pub has_ties: bool,
}

/// `Σ_k (R_k − R_{k−1}) · P_k` over the ranking by descending score, equal
/// scores kept in input order.
pub fn average_precision(set: &ScoredTestSet) -> Result<AveragePrecision> {
    let (pos, _) = set.counts();
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one anomaly".into(),
        ));
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let has_ties = order
        .windows(2)
        .any(|w| set.scores[w[0]] == set.scores[w[1]]);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if set.labels[i] {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(AveragePrecision {
        value: sum / pos as f64,
        has_ties,
    })
}

/// Estimator settings for [`dci_disentanglement`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DciConfig {
    /// L1 weight of each one-vs-rest logistic fit.
    pub l1: f64,
    pub max_iter: usize,
    /// Stop once no coefficient moves by more than this.
    pub tol: f64,
}

impl Default for DciConfig {
    fn default() -> Self {
        DciConfig {
            l1: 1e-2,
            max_iter: 2000,
            tol: 1e-10,
        }
    }
}

/// Outcome of [`dci_disentanglement`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dci {
    pub disentanglement: f64,
    /// `d × F` importance matrix, columns normalized to sum one.
    pub importance: Vec<Vec<f64>>,
    /// All importances were zero; the score is reported as 0.
    pub degenerate: bool,
}

/// Z-score every column of a row-major `n × d` matrix; constant columns become zero.
pub fn standardize(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            out[i * d + j] = if sd > 1e-12 {
                (x[i * d + j] - mean) / sd
            } else {
                0.0
            };
        }
    }
    out
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Weights of `mean logistic loss + l1·‖w‖₁` (bias unpenalized) by FISTA,
/// for standardized row-major `x: n × d` and 0/1 targets.
pub fn l1_logistic(x: &[f64], n: usize, d: usize, y: &[f64], cfg: &DciConfig) -> Vec<f64> {
    // Lipschitz bound of the smooth part: ‖[X 1]‖_F² / (4n).
    let frob: f64 = x.iter().map(|v| v * v).sum::<f64>() + n as f64;
    let step = 4.0 * n as f64 / frob;
    let mut w = vec![0.0; d + 1];
    let mut prev = w.clone();
    let mut probe = w.clone();
    let mut t = 1.0f64;
    let mut grad = vec![0.0; d + 1];
    for _ in 0..cfg.max_iter {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let z = probe[d] + row.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
            let r = sigmoid(z) - y[i];
            for (g, &a) in grad.iter_mut().zip(row) {
                *g += r * a;
            }
            grad[d] += r;
        }
        let mut moved = 0.0f64;
        for j in 0..=d {
            let v = probe[j] - step * grad[j] / n as f64;
            let next = if j == d {
                v
            } else {
                v.signum() * (v.abs() - step * cfg.l1).max(0.0)
            };
            moved = moved.max((next - w[j]).abs());
            prev[j] = w[j];
            w[j] = next;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        for j in 0..=d {
            probe[j] = w[j] + beta * (w[j] - prev[j]);
        }
        t = t_next;
        if moved <= cfg.tol {
            break;
        }
    }
    w.truncate(d);
    w
}

/// `D = Σ_i ρ_i (1 − H_F(p_i))` of a `d × F` importance matrix.
pub fn disentanglement_from_importance(importance: &[Vec<f64>]) -> f64 {
    let f = importance.first().map_or(0, Vec::len);
    let totals: Vec<f64> = importance.iter().map(|row| row.iter().sum()).collect();
    let grand: f64 = totals.iter().sum();
    if f < 2 || grand <= 0.0 {
        return 0.0;
    }
    let mut weighted = 0.0;
    for (row, &total) in importance.iter().zip(&totals) {
        if total <= 0.0 {
            continue;
        }
        let entropy: f64 = row
            .iter()
            .filter(|&&r| r > 0.0)
            .map(|&r| {
                let p = r / total;
                -p * p.ln() / (f as f64).ln()
            })
            .sum();
        weighted += total * (1.0 - entropy);
    }
    weighted / grand
}

/// DCI disentanglement of `representations` (row-major `n × d`) with respect
/// to discrete `factors` (row-major `n × F`).
pub fn dci_disentanglement(
    representations: &[f64],
    factors: &[u32],
    n: usize,
    d: usize,
    cfg: &DciConfig,
) -> Result<Dci> {
    if n == 0 || representations.len() != n * d || !factors.len().is_multiple_of(n) {
        return Err(Error::Dimension {
            op: "dci",
            lhs: vec![representations.len(), n, d],
            rhs: vec![factors.len()],
        });
    }
    let f = factors.len() / n;
    if d == 0 || n <= d || f < 2 {
        return Err(Error::Contract(format!(
            "DCI needs n > d ≥ 1 and F ≥ 2, got n={n} d={d} F={f}"
        )));
    }
    let x = standardize(representations, n, d);
    let mut importance = vec![vec![0.0; f]; d];
    for k in 0..f {
        let codes: Vec<u32> = (0..n).map(|i| factors[i * f + k]).collect();
        let mut values = codes.clone();
        values.sort_unstable();
        values.dedup();
        if values.len() < 2 {
            continue;
        }
        let mut col = vec![0.0; d];
        for &v in &values {
            let y: Vec<f64> = codes.iter().map(|&c| f64::from(u8::from(c == v))).collect();
            let w = l1_logistic(&x, n, d, &y, cfg);
            for (c, wj) in col.iter_mut().zip(&w) {
                *c += wj.abs() / values.len() as f64;
            }
        }
        let sum: f64 = col.iter().sum();
        if sum > 0.0 {
            for (i, c) in col.iter().enumerate() {
                importance[i][k] = c / sum;
            }
        }
    }
    let degenerate = importance.iter().flatten().all(|&v| v == 0.0);
    if degenerate {
        warn!("all DCI importances are zero; reporting disentanglement 0");
    }
    Ok(Dci {
        disentanglement: disentanglement_from_importance(&importance),
        importance,
        degenerate,
    })
}

/// Mean and population standard deviation over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::UndefinedMetric("aggregate of zero runs".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(Aggregate {
        mean,
        std: var.sqrt(),
        n,
    })
}
