//! Estimators and hypothesis tests used by the verification suites.
//!
//! p-values come from asymptotic distributions; nothing here tries to be exact
//! for small samples, hence the hard floor of 30 observations.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const MIN_SAMPLES: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestVerdict {
    pub name: String,
    pub statistic: f64,
    pub p_value: f64,
    pub threshold: f64,
    /// `p_value > threshold`
    pub pass: bool,
    pub n: usize,
}

impl TestVerdict {
    pub fn new(name: &str, statistic: f64, p_value: f64, threshold: f64, n: usize) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        Self { name: name.into(), statistic, p_value, threshold, pass: p_value > threshold, n }
    }
}

fn need(n: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::TooFewSamples { need: MIN_SAMPLES, got: n });
    }
    Ok(())
}

/// Per-test level after splitting `alpha` over `m` tests.
pub fn bonferroni(alpha: f64, m: usize) -> f64 {
    alpha / m.max(1) as f64
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    (mean(xs), (variance(xs) / xs.len() as f64).sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Cumulative Σ(Δy)² along a path; starts at 0.
pub fn realized_qv(path: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(path.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in path.windows(2) {
        let d = w[1] - w[0];
        acc += d * d;
        out.push(acc);
    }
    out
}

fn two_sided_normal(z: f64) -> f64 {
    // erfc(|z|/√2)
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2)
}

fn students_two_sided(t: f64, df: f64) -> f64 {
    if !df.is_finite() || df > 1e7 {
        return two_sided_normal(t);
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    2.0 * dist.cdf(-t.abs())
}

/// OLS fit with heteroskedasticity-robust (HC1) standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    /// Intercept first, then one slope per regressor.
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub n: usize,
}

impl Regression {
    /// Passes when no slope is significant at `alpha` (intercept ignored).
    pub fn slopes_verdict(&self, name: &str, alpha: f64) -> TestVerdict {
        let (mut tmax, mut pmin) = (0.0f64, 1.0f64);
        for j in 1..self.coef.len() {
            tmax = tmax.max(self.t[j].abs());
            pmin = pmin.min(self.p[j]);
        }
        TestVerdict::new(name, tmax, pmin, alpha, self.n)
    }

    /// Two-sided CI for coefficient `j` at confidence 1 - alpha.
    pub fn ci(&self, j: usize, alpha: f64) -> (f64, f64) {
        let dist = StudentsT::new(0.0, 1.0, (self.n - self.coef.len()) as f64).expect("df > 0");
        let q = dist.inverse_cdf(1.0 - alpha / 2.0);
        (self.coef[j] - q * self.se[j], self.coef[j] + q * self.se[j])
    }
}

fn solve_spd(mut m: Vec<Vec<f64>>, mut rhs: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    // Gauss-Jordan with partial pivoting; k is tiny here
    let k = m.len();
    let scale = m.iter().map(|r| r.iter().fold(0.0f64, |a, v| a.max(v.abs()))).fold(0.0f64, f64::max);
    for col in 0..k {
        let piv = (col..k).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        if m[piv][col].abs() <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::SingularDesign);
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = m[r][col] / m[col][col];
                for c in col..k {
                    m[r][c] -= f * m[col][c];
                }
                for c in 0..rhs[r].len() {
                    rhs[r][c] -= f * rhs[col][c];
                }
            }
        }
    }
    for r in 0..k {
        let d = m[r][r];
        for v in rhs[r].iter_mut() {
            *v /= d;
        }
    }
    Ok(rhs)
}

/// Regress `y` on an intercept plus the given regressor columns.
pub fn ols_robust(y: &[f64], regressors: &[Vec<f64>]) -> Result<Regression> {
    let n = y.len();
    need(n)?;
    let k = regressors.len() + 1;
    if n <= k || regressors.iter().any(|c| c.len() != n) {
        return Err(Error::SingularDesign);
    }
    let row = |i: usize, j: usize| if j == 0 { 1.0 } else { regressors[j - 1][i] };
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![vec![0.0]; k];
    for i in 0..n {
        for a in 0..k {
            let xa = row(i, a);
            xty[a][0] += xa * y[i];
            for b in a..k {
                xtx[a][b] += xa * row(i, b);
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[a][b] = xtx[b][a];
        }
    }
    let ident: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| (i == j) as u8 as f64).collect()).collect();
    let inv = solve_spd(xtx.clone(), ident)?;
    let coef: Vec<f64> = (0..k).map(|a| (0..k).map(|b| inv[a][b] * xty[b][0]).sum()).collect();

    let mut meat = vec![vec![0.0; k]; k];
    for i in 0..n {
        let fit: f64 = (0..k).map(|j| coef[j] * row(i, j)).sum();
        let e2 = (y[i] - fit).powi(2);
        for a in 0..k {
            for b in 0..k {
                meat[a][b] += e2 * row(i, a) * row(i, b);
            }
        }
    }
    let dof = n as f64 / (n - k) as f64;
    let mut se = vec![0.0; k];
    for (j, s) in se.iter_mut().enumerate() {
        let mut v = 0.0;
        for a in 0..k {
            for b in 0..k {
                v += inv[j][a] * meat[a][b] * inv[b][j];
            }
        }
        *s = (dof * v).sqrt();
    }
    let t: Vec<f64> = coef.iter().zip(&se).map(|(c, s)| c / s).collect();
    let df = (n - k) as f64;
    let p = t.iter().map(|&t| students_two_sided(t, df)).collect();
    Ok(Regression { coef, se, t, p, n })
}

/// Own-past martingale test: no slope of `increments` on the regressors may
/// be significant at `alpha`.
pub fn martingale_regression(increments: &[f64], regressors: &[Vec<f64>], alpha: f64) -> Result<TestVerdict> {
    Ok(ols_robust(increments, regressors)?.slopes_verdict("martingale regression", alpha))
}

/// Jarque-Bera normality test, χ²₂ reference.
pub fn normality_test(xs: &[f64], alpha: f64) -> Result<TestVerdict> {
    let n = xs.len();
    need(n)?;
    let m = mean(xs);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let nf = n as f64;
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    if m2 <= 0.0 {
        return Ok(TestVerdict::new("jarque-bera", f64::INFINITY, 0.0, alpha, n));
    }
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    let jb = nf / 6.0 * (skew * skew + 0.25 * (kurt - 3.0).powi(2));
    // χ²₂ survival function
    Ok(TestVerdict::new("jarque-bera", jb, (-0.5 * jb).exp(), alpha, n))
}

/// Kolmogorov survival function Q(λ) = 2Σ(-1)^(k-1) exp(-2k²λ²).
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test with Stephens' finite-n correction.
pub fn ks_two_sample(a: &[f64], b: &[f64], alpha: f64) -> Result<TestVerdict> {
    need(a.len().min(b.len()))?;
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let p = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
    Ok(TestVerdict::new("ks two-sample", d, p, alpha, n + m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alternative {
    TwoSided,
    /// mean(a) > mean(b)
    Greater,
}

/// Welch's unequal-variance t test of mean(a) against mean(b).
pub fn welch_mean_compare(a: &[f64], b: &[f64], alt: Alternative, alpha: f64) -> Result<TestVerdict> {
    need(a.len().min(b.len()))?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let se = (va + vb).sqrt();
    let t = (mean(a) - mean(b)) / se;
    let df = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let p = if !t.is_finite() {
        // both samples constant
        let diff = mean(a) - mean(b);
        match alt {
            Alternative::TwoSided => (diff == 0.0) as u8 as f64,
            Alternative::Greater => (diff <= 0.0) as u8 as f64,
        }
    } else {
        match alt {
            Alternative::TwoSided => students_two_sided(t, df),
            Alternative::Greater => {
                let half = 0.5 * students_two_sided(t, df);
                if t > 0.0 {
                    half
                } else {
                    1.0 - half
                }
            }
        }
    };
    Ok(TestVerdict::new("welch", t, p, alpha, a.len() + b.len()))
}

/// One-sample t test of mean(xs) = 0, two-sided.
pub fn mean_zero_test(xs: &[f64], alpha: f64) -> Result<TestVerdict> {
    need(xs.len())?;
    let (m, se) = mean_se(xs);
    let t = m / se;
    let p = if t.is_finite() { students_two_sided(t, (xs.len() - 1) as f64) } else { (m == 0.0) as u8 as f64 };
    Ok(TestVerdict::new("mean zero", t, p, alpha, xs.len()))
}

/// Own-past regressions at successive checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OwnPastReport {
    /// Index of the checkpoint each regression starts from.
    pub starts: Vec<usize>,
    pub regressions: Vec<Regression>,
    pub max_abs_t: f64,
    pub verdict: TestVerdict,
}

/// `columns[k]` holds a process at checkpoint k across paths. For every k ≥
/// `lags`, the increment from k to k+1 is regressed on the values at k, k-1,
/// ..., k-lags+1, and the slopes are judged jointly with a Bonferroni
/// correction over regressions and slopes.
pub fn own_past_regression(columns: &[Vec<f64>], lags: usize, alpha: f64) -> Result<OwnPastReport> {
    if lags == 0 || columns.len() < lags + 1 {
        return Err(Error::TooFewSamples { need: lags + 1, got: columns.len() });
    }
    let mut starts = Vec::new();
    let mut regressions = Vec::new();
    for k in lags - 1..columns.len() - 1 {
        let y: Vec<f64> = columns[k + 1].iter().zip(&columns[k]).map(|(a, b)| a - b).collect();
        let xs: Vec<Vec<f64>> = (0..lags).map(|j| columns[k - j].clone()).collect();
        regressions.push(ols_robust(&y, &xs)?);
        starts.push(k);
    }
    let level = bonferroni(alpha, regressions.len() * lags);
    let (mut tmax, mut pmin) = (0.0f64, 1.0f64);
    for r in &regressions {
        for j in 1..r.coef.len() {
            tmax = tmax.max(r.t[j].abs());
            pmin = pmin.min(r.p[j]);
        }
    }
    let n = regressions.first().map_or(0, |r| r.n);
    let verdict = TestVerdict::new("own-past regression", tmax, pmin, level, n);
    Ok(OwnPastReport { starts, regressions, max_abs_t: tmax, verdict })
}
