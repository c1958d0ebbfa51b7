//! Small statistical helpers shared by metrics, attacks and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Median with the midpoint convention for even lengths. `NaN` when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let v = sorted(values);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Linear-interpolated quantile of already sorted data, `q` in [0, 1].
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Half-width of the 95% percentile bootstrap interval of `statistic`.
pub fn bootstrap_half_width(values: &[f64], resamples: usize, seed: u64, statistic: impl Fn(&[f64]) -> f64) -> f64 {
    if values.len() < 2 || resamples == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; values.len()];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = values[rng.random_range(0..values.len())];
            }
            statistic(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    0.5 * (quantile_sorted(&stats, 0.975) - quantile_sorted(&stats, 0.025))
}

pub fn bootstrap_median_half_width(values: &[f64], resamples: usize, seed: u64) -> f64 {
    bootstrap_half_width(values, resamples, seed, median)
}

/// Pearson chi-square goodness of fit of `observed` counts against `expected`
/// probabilities. Bins are merged left to right until each expected count is at
/// least 5. Returns the p-value.
pub fn chi_square_gof(observed: &[u64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len());
    let n: u64 = observed.iter().sum();
    let total_p: f64 = expected.iter().sum();
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(expected) {
        o_acc += o as f64;
        e_acc += p / total_p * n as f64;
        if e_acc >= 5.0 {
            bins.push((o_acc, e_acc));
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 || o_acc > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += o_acc;
                last.1 += e_acc;
            }
            None => bins.push((o_acc, e_acc)),
        }
    }
    if bins.len() < 2 {
        return 1.0;
    }
    let stat: f64 = bins.iter().map(|&(o, e)| if e > 0.0 { (o - e).powi(2) / e } else if o > 0.0 { f64::INFINITY } else { 0.0 }).sum();
    chi_square_sf(stat, (bins.len() - 1) as f64)
}

/// Chi-square test of independence on a contingency table (rows = groups).
/// Columns with zero total are dropped. Returns the p-value.
pub fn chi_square_independence(table: &[Vec<u64>]) -> f64 {
    let n_cols = table.first().map_or(0, Vec::len);
    let col_totals: Vec<f64> = (0..n_cols).map(|j| table.iter().map(|r| r[j] as f64).sum()).collect();
    let keep: Vec<usize> = (0..n_cols).filter(|&j| col_totals[j] > 0.0).collect();
    let row_totals: Vec<f64> = table.iter().map(|r| keep.iter().map(|&j| r[j] as f64).sum()).collect();
    let n: f64 = row_totals.iter().sum();
    let rows = row_totals.iter().filter(|&&t| t > 0.0).count();
    if rows < 2 || keep.len() < 2 {
        return 1.0;
    }
    let mut stat = 0.0;
    for (r, row) in table.iter().enumerate() {
        if row_totals[r] == 0.0 {
            continue;
        }
        for &j in &keep {
            let e = row_totals[r] * col_totals[j] / n;
            stat += (row[j] as f64 - e).powi(2) / e;
        }
    }
    chi_square_sf(stat, ((rows - 1) * (keep.len() - 1)) as f64)
}

pub fn chi_square_sf(stat: f64, df: f64) -> f64 {
    if !stat.is_finite() {
        return 0.0;
    }
    ChiSquared::new(df).expect("positive degrees of freedom").sf(stat)
}

/// Two-sample Kolmogorov-Smirnov test; asymptotic p-value with the usual
/// small-sample correction.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (sorted(a), sorted(b));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    kolmogorov_q((en + 0.12 + 0.11 / en) * d)
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let term = 2.0 * (if j % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Average ranks (1-based) with ties sharing the mean rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Mann-Whitney AUC: probability a positive outscores a negative, ties count 1/2.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let r = ranks(scores);
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let rank_sum: f64 = r.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}
