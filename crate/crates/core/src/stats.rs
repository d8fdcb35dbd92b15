//! Statistics for comparing score samples: two-sample Anderson-Darling,
//! paired t-tests, RMSE, Spearman correlation and a loss-divergence monitor.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Reported Anderson-Darling p-values are clamped to this range, the span
/// covered by the critical-value table.
pub const AD_P_MIN: f64 = 0.001;
pub const AD_P_MAX: f64 = 0.25;

const AD_SIG: [f64; 7] = [0.25, 0.1, 0.05, 0.025, 0.01, 0.005, 0.001];
const AD_B0: [f64; 7] = [0.675, 1.281, 1.645, 1.96, 2.326, 2.573, 3.085];
const AD_B1: [f64; 7] = [-0.245, 0.25, 0.678, 1.149, 1.822, 2.364, 3.615];
const AD_B2: [f64; 7] = [-0.105, -0.305, -0.362, -0.391, -0.396, -0.345, -0.154];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdResult {
    /// Standardised statistic `(A2akN - (k - 1)) / sigma`.
    pub statistic: f64,
    pub p_value: f64,
}

fn lower_bound(sorted: &[f64], v: f64) -> usize {
    sorted.partition_point(|&x| x < v)
}

fn upper_bound(sorted: &[f64], v: f64) -> usize {
    sorted.partition_point(|&x| x <= v)
}

/// Least-squares quadratic through `(x, y)`; returns `[c2, c1, c0]`.
fn quadratic_fit(x: &[f64], y: &[f64]) -> [f64; 3] {
    // normal equations for [c2, c1, c0]
    let mut s = [0.0; 5];
    let mut t = [0.0; 3];
    for (&xi, &yi) in x.iter().zip(y) {
        let mut p = 1.0;
        for (j, sj) in s.iter_mut().enumerate() {
            *sj += p;
            if j < 3 {
                t[j] += p * yi;
            }
            p *= xi;
        }
    }
    // rows: sum x^(4-i-j) for i,j in 0..3
    let mut m = [[s[4], s[3], s[2], t[2]], [s[3], s[2], s[1], t[1]], [s[2], s[1], s[0], t[0]]];
    for col in 0..3 {
        let piv = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).expect("rows");
        m.swap(col, piv);
        let pivot = m[col];
        for (row, r) in m.iter_mut().enumerate() {
            if row != col {
                let f = r[col] / pivot[col];
                for (v, p) in r.iter_mut().zip(&pivot).skip(col) {
                    *v -= f * p;
                }
            }
        }
    }
    [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]]
}

/// Two-sample Anderson-Darling k-sample test with midrank handling of ties
/// (Scholz & Stephens). The p-value is interpolated from the standard
/// critical-value table via a quadratic fit of `log(significance)` and
/// clamped to `[0.001, 0.25]`. Constant pooled data yields 0.25.
pub fn anderson_darling_k2(sample_a: &[f64], sample_b: &[f64]) -> Result<AdResult> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(Error::Empty("Anderson-Darling needs at least 2 values per sample".into()));
    }
    if sample_a.iter().chain(sample_b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Anderson-Darling input".into()));
    }
    let samples = [sample_a, sample_b];
    let k = 2.0;
    let mut pooled: Vec<f64> = sample_a.iter().chain(sample_b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut distinct = pooled.clone();
    distinct.dedup();
    if distinct.len() < 2 {
        return Ok(AdResult { statistic: f64::NEG_INFINITY, p_value: AD_P_MAX });
    }
    let big_n = pooled.len() as f64;

    let lj: Vec<f64> = distinct.iter().map(|&z| (upper_bound(&pooled, z) - lower_bound(&pooled, z)) as f64).collect();
    let bj: Vec<f64> = distinct.iter().zip(&lj).map(|(&z, &l)| lower_bound(&pooled, z) as f64 + l / 2.0).collect();

    let mut a2 = 0.0;
    for s in samples {
        let mut sorted = s.to_vec();
        sorted.sort_by(f64::total_cmp);
        let ni = sorted.len() as f64;
        let mut inner = 0.0;
        for (j, &z) in distinct.iter().enumerate() {
            let right = upper_bound(&sorted, z) as f64;
            let fij = right - lower_bound(&sorted, z) as f64;
            let mij = right - fij / 2.0;
            let num = big_n * mij - bj[j] * ni;
            inner += lj[j] / big_n * num * num / (bj[j] * (big_n - bj[j]) - big_n * lj[j] / 4.0);
        }
        a2 += inner / ni;
    }
    a2 *= (big_n - 1.0) / big_n;

    // variance of the statistic under H0
    let nn = pooled.len();
    let h_inv: f64 = samples.iter().map(|s| 1.0 / s.len() as f64).sum();
    let mut hs_cs = Vec::with_capacity(nn.saturating_sub(2));
    let mut acc = 0.0;
    for i in (2..nn).rev() {
        acc += 1.0 / i as f64;
        hs_cs.push(acc);
    }
    let h = hs_cs.last().copied().unwrap_or(0.0) + 1.0;
    let g: f64 = hs_cs.iter().enumerate().map(|(i, v)| v / (i + 2) as f64).sum();
    let a = (4.0 * g - 6.0) * (k - 1.0) + (10.0 - 6.0 * g) * h_inv;
    let b = (2.0 * g - 4.0) * k * k + 8.0 * h * k + (2.0 * g - 14.0 * h - 4.0) * h_inv - 8.0 * h + 4.0 * g - 6.0;
    let c = (6.0 * h + 2.0 * g - 2.0) * k * k + (4.0 * h - 4.0 * g + 6.0) * k + (2.0 * h - 6.0) * h_inv + 4.0 * h;
    let d = (2.0 * h + 6.0) * k * k - 4.0 * h * k;
    let sigma_sq =
        (a * big_n.powi(3) + b * big_n.powi(2) + c * big_n + d) / ((big_n - 1.0) * (big_n - 2.0) * (big_n - 3.0));
    let m = k - 1.0;
    let statistic = (a2 - m) / sigma_sq.sqrt();

    let critical: Vec<f64> = (0..7).map(|i| AD_B0[i] + AD_B1[i] / m.sqrt() + AD_B2[i] / m).collect();
    let lo = critical.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = critical.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p = if statistic < lo {
        AD_P_MAX
    } else if statistic > hi {
        AD_P_MIN
    } else {
        let logs: Vec<f64> = AD_SIG.iter().map(|s| s.ln()).collect();
        let [c2, c1, c0] = quadratic_fit(&critical, &logs);
        (c2 * statistic * statistic + c1 * statistic + c0).exp()
    };
    Ok(AdResult { statistic, p_value: p.clamp(AD_P_MIN, AD_P_MAX) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    /// H1: mean difference > 0.
    Greater,
    /// H1: mean difference < 0.
    Less,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
    pub mean: f64,
}

/// One-sample t-test on paired differences.
///
/// Zero-variance input: all-zero differences give p = 1; a constant nonzero
/// difference gives p = 0 in the tail it supports and 1 otherwise.
pub fn paired_t_test(diffs: &[f64], tail: Tail) -> Result<TTestResult> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::Empty("paired t-test needs at least 2 differences".into()));
    }
    if diffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-test input".into()));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            let supports = match tail {
                Tail::Greater => mean > 0.0,
                Tail::Less => mean < 0.0,
                Tail::TwoSided => true,
            };
            (mean.signum() * f64::INFINITY, if supports { 0.0 } else { 1.0 })
        };
        return Ok(TTestResult { t, df, p_value: p, mean });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = match tail {
        Tail::Greater => dist.sf(t),
        Tail::Less => dist.cdf(t),
        Tail::TwoSided => (2.0 * dist.sf(t.abs())).min(1.0),
    };
    Ok(TTestResult { t, df, p_value: p.clamp(0.0, 1.0), mean })
}

/// Root-mean-square difference of two equally long vectors.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("rmse over lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("rmse of empty vectors".into()));
    }
    Ok((a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt())
}

/// Average ranks (1-based), ties share the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
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

/// Spearman rank correlation (Pearson on average ranks). Returns 0 when a
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Dimension("spearman needs two equally long vectors of length >= 2".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub const DEFAULT_DIVERGENCE_WINDOW: usize = 3;
pub const DEFAULT_DIVERGENCE_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceReport {
    pub flagged: bool,
    /// 1-based round closing the first window that tripped the rule.
    pub first_round: Option<usize>,
}

/// Flags the first round whose trailing-window mean loss exceeds `factor`
/// times the smallest trailing-window mean seen so far.
pub fn loss_divergence_monitor(losses: &[f64], window: usize, factor: f64) -> Result<DivergenceReport> {
    if window == 0 {
        return Err(Error::config("window", "must be >= 1"));
    }
    if !(factor > 0.0) {
        return Err(Error::config("factor", "must be > 0"));
    }
    let mut best = f64::INFINITY;
    for end in window..=losses.len() {
        let m = mean(&losses[end - window..end]);
        best = best.min(m);
        if m > factor * best {
            return Ok(DivergenceReport { flagged: true, first_round: Some(end) });
        }
    }
    Ok(DivergenceReport { flagged: false, first_round: None })
}
