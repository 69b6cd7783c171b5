//! Slow, direct implementations of the evaluation metrics.

/// AUC by counting every positive/negative pair, ties worth one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Precision/recall curve walked one rank at a time.
pub fn stepwise_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let total = labels.iter().filter(|&&l| l).count() as f64;
    let (mut tp, mut prev_recall, mut ap) = (0.0, 0.0, 0.0);
    for (k, &i) in idx.iter().enumerate() {
        if labels[i] {
            tp += 1.0;
        }
        let recall = tp / total;
        let precision = tp / (k + 1) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Straight-line DCI: standardize, FISTA L1 logistic per class, normalize, entropy.
#[allow(clippy::too_many_arguments)]
pub fn dci(
    x: &[f64],
    n: usize,
    d: usize,
    z: &[u32],
    f: usize,
    l1: f64,
    iters: usize,
    tol: f64,
) -> f64 {
    let mut xs = vec![0.0; n * d];
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| x[i * d + j]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            xs[i * d + j] = if sd > 1e-12 { (col[i] - m) / sd } else { 0.0 };
        }
    }
    let lip = (xs.iter().map(|v| v * v).sum::<f64>() + n as f64) / (4.0 * n as f64);
    let mut r = vec![vec![0.0; f]; d];
    for k in 0..f {
        let mut vals: Vec<u32> = (0..n).map(|i| z[i * f + k]).collect();
        vals.sort();
        vals.dedup();
        let mut imp = vec![0.0; d];
        for &v in &vals {
            let y: Vec<f64> = (0..n)
                .map(|i| if z[i * f + k] == v { 1.0 } else { 0.0 })
                .collect();
            let mut w = vec![0.0; d + 1];
            let mut w_old = vec![0.0; d + 1];
            let mut q = vec![0.0; d + 1];
            let mut t = 1.0f64;
            for _ in 0..iters {
                let mut g = vec![0.0; d + 1];
                for i in 0..n {
                    let mut s = q[d];
                    for j in 0..d {
                        s += xs[i * d + j] * q[j];
                    }
                    let p = if s >= 0.0 {
                        1.0 / (1.0 + (-s).exp())
                    } else {
                        s.exp() / (1.0 + s.exp())
                    };
                    for j in 0..d {
                        g[j] += (p - y[i]) * xs[i * d + j];
                    }
                    g[d] += p - y[i];
                }
                let mut delta = 0.0f64;
                for j in 0..=d {
                    let u = q[j] - g[j] / n as f64 / lip;
                    let shrunk = if j == d {
                        u
                    } else if u > l1 / lip {
                        u - l1 / lip
                    } else if u < -l1 / lip {
                        u + l1 / lip
                    } else {
                        0.0
                    };
                    delta = delta.max((shrunk - w[j]).abs());
                    w_old[j] = w[j];
                    w[j] = shrunk;
                }
                let t2 = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                for j in 0..=d {
                    q[j] = w[j] + (t - 1.0) / t2 * (w[j] - w_old[j]);
                }
                t = t2;
                if delta <= tol {
                    break;
                }
            }
            for j in 0..d {
                imp[j] += w[j].abs() / vals.len() as f64;
            }
        }
        let s: f64 = imp.iter().sum();
        for j in 0..d {
            r[j][k] = if s > 0.0 { imp[j] / s } else { 0.0 };
        }
    }
    let total: f64 = r.iter().flatten().sum();
    let mut out = 0.0;
    for row in &r {
        let rs: f64 = row.iter().sum();
        if rs == 0.0 {
            continue;
        }
        let h: f64 = row
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| -(v / rs) * (v / rs).log(f as f64))
            .sum();
        out += rs / total * (1.0 - h);
    }
    out
}

/// Every combination of factor values, row-major.
pub fn factor_grid(card: &[u32]) -> Vec<u32> {
    let mut rows: Vec<Vec<u32>> = vec![vec![]];
    for &c in card {
        rows = rows
            .into_iter()
            .flat_map(|r| {
                (0..c).map(move |v| {
                    let mut r = r.clone();
                    r.push(v);
                    r
                })
            })
            .collect();
    }
    rows.concat()
}
