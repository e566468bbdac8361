//! Small statistics toolkit: compensated sums, summaries with confidence
//! intervals, two-sample Kolmogorov–Smirnov, binomial acceptance bands and
//! log-log slope fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neumaier compensated accumulator. Summing the same sequence in the same
/// order always yields the same bits.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Mean computed around the first element, so a constant sample returns that
/// constant exactly.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let shift = xs[0];
    shift + compensated_sum(xs.iter().map(|x| x - shift)) / xs.len() as f64
}

/// Unbiased sample variance (n - 1 denominator).
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    compensated_sum(xs.iter().map(|x| (x - m) * (x - m))) / (xs.len() - 1) as f64
}

/// Plug-in covariance `mean((a - ā)(b - b̄))`, exact zero when either sample
/// is constant.
pub fn covariance_plugin(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ma = mean(a);
    let mb = mean(b);
    compensated_sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb))) / a.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Summary {
    /// Normal-approximation 95% interval for the mean.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = mean(xs);
        let sd = variance(xs).sqrt();
        let std_error = if n > 0 {
            sd / (n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self {
            n,
            mean,
            sd,
            std_error,
            ci_low: mean - 1.96 * std_error,
            ci_high: mean + 1.96 * std_error,
        }
    }

    /// Studentized mean; zero when the sample is exactly degenerate at zero.
    pub fn t_statistic(&self) -> f64 {
        if self.std_error == 0.0 {
            if self.mean == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(self.mean)
            }
        } else {
            self.mean / self.std_error
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sample Kolmogorov–Smirnov test (two-sided).
///
/// The p-value is exact (lattice-path count) when `n * m <= 4_000_000`,
/// otherwise the asymptotic Kolmogorov distribution with Stephens'
/// small-sample correction is used.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData(
            "KS test needs two non-empty samples".into(),
        ));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::invalid("KS samples must be finite"));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len() as i64, ys.len() as i64);

    // D * n * m as an integer: max |i m - j n| after consuming tied values.
    let (mut i, mut j) = (0usize, 0usize);
    let mut dmax: i64 = 0;
    while i < xs.len() || j < ys.len() {
        let v = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < xs.len() && xs[i] == v {
            i += 1;
        }
        while j < ys.len() && ys[j] == v {
            j += 1;
        }
        dmax = dmax.max((i as i64 * m - j as i64 * n).abs());
    }
    let statistic = dmax as f64 / (n * m) as f64;

    if n * m <= 4_000_000 {
        Ok(KsResult {
            statistic,
            p_value: ks_exact_pvalue(n as usize, m as usize, dmax),
            exact: true,
        })
    } else {
        let en = ((n * m) as f64 / (n + m) as f64).sqrt();
        let lambda = (en + 0.12 + 0.11 / en) * statistic;
        Ok(KsResult {
            statistic,
            p_value: kolmogorov_survival(lambda),
            exact: false,
        })
    }
}

/// P(D >= d) where `d_nm = d * n * m` is an integer on the lattice.
fn ks_exact_pvalue(n: usize, m: usize, d_nm: i64) -> f64 {
    if d_nm == 0 {
        return 1.0;
    }
    let (ni, mi) = (n as i64, m as i64);
    let inside = |i: usize, j: usize| (i as i64 * mi - j as i64 * ni).abs() < d_nm;
    // prob[j] holds P(path stays inside up to (i, j)) normalised by C(i+j, i).
    let mut prob = vec![0.0f64; m + 1];
    prob[0] = 1.0;
    for j in 1..=m {
        prob[j] = if inside(0, j) { prob[j - 1] } else { 0.0 };
    }
    for i in 1..=n {
        prob[0] = if inside(i, 0) { prob[0] } else { 0.0 };
        for j in 1..=m {
            prob[j] = if inside(i, j) {
                let w = (i + j) as f64;
                prob[j] * (i as f64 / w) + prob[j - 1] * (j as f64 / w)
            } else {
                0.0
            };
        }
    }
    (1.0 - prob[m]).clamp(0.0, 1.0)
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut total = 0.0;
    for j in 1..=100i32 {
        let term = 2.0 * (-1f64).powi(j - 1) * (-2.0 * (j as f64).powi(2) * lambda * lambda).exp();
        total += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    total.clamp(0.0, 1.0)
}

fn ln_binomial_pmf(n: u64, k: u64, p: f64) -> f64 {
    ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k)
        .map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln())
        .sum()
}

/// Central acceptance band `[lo, hi]` (counts) for Binomial(n, p) at level
/// `1 - alpha`: each tail outside the band has probability at most alpha/2.
pub fn binomial_acceptance_band(n: u64, p: f64, alpha: f64) -> (u64, u64) {
    let pmf: Vec<f64> = (0..=n).map(|k| ln_binomial_pmf(n, k, p).exp()).collect();
    let mut lo = 0u64;
    let mut tail = 0.0;
    for (k, q) in pmf.iter().enumerate() {
        if tail + q > alpha / 2.0 {
            lo = k as u64;
            break;
        }
        tail += q;
    }
    let mut hi = n;
    tail = 0.0;
    for k in (0..=n as usize).rev() {
        if tail + pmf[k] > alpha / 2.0 {
            hi = k as u64;
            break;
        }
        tail += pmf[k];
    }
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_std_error: f64,
}

/// Ordinary least squares `y = intercept + slope * x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData(
            "linear fit needs >= 2 paired points".into(),
        ));
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    if sxx == 0.0 {
        return Err(Error::invalid("linear fit with constant abscissa"));
    }
    let sxy = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_std_error = if x.len() > 2 {
        let rss = compensated_sum(
            x.iter()
                .zip(y)
                .map(|(a, b)| (b - intercept - slope * a).powi(2)),
        );
        (rss / (x.len() - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(LinearFit {
        intercept,
        slope,
        slope_std_error,
    })
}

/// Slope of `ln y` against `ln x`. All values must be positive.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid(
            "log-log fit needs strictly positive finite values",
        ));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    Ok(linear_fit(&lx, &ly)?.slope)
}
