//! Confidence intervals, Kolmogorov–Smirnov tests and normal helpers.
//!
//! All reductions run in input order so results do not depend on thread count.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erf;

use crate::error::{LabError, Result};

/// Smallest sample size for which a KS test may reject.
pub const KS_MIN_N: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CI {
    pub mean: f64,
    pub halfwidth: f64,
    pub level: f64,
    pub n: usize,
}

impl CI {
    pub fn contains(&self, x: f64) -> bool {
        (x - self.mean).abs() <= self.halfwidth
    }

    pub fn lo(&self) -> f64 {
        self.mean - self.halfwidth
    }

    pub fn hi(&self) -> f64 {
        self.mean + self.halfwidth
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    sample_sd(xs) / (xs.len() as f64).sqrt()
}

/// Pearson correlation; NaN when either sample is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Two-sided standard normal quantile for a confidence level.
pub fn z_for_level(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(LabError::InvalidParameter(format!("confidence level must lie in (0, 1), got {level}")));
    }
    Ok(standard_normal().inverse_cdf(0.5 + level / 2.0))
}

pub fn mean_ci(samples: &[f64], level: f64) -> Result<CI> {
    let n = samples.len();
    if n < 2 {
        return Err(LabError::InsufficientSamples { n, needed: 2 });
    }
    let z = z_for_level(level)?;
    Ok(CI { mean: mean(samples), halfwidth: z * sample_sd(samples) / (n as f64).sqrt(), level, n })
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal is valid")
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_quantile(p: f64) -> f64 {
    standard_normal().inverse_cdf(p)
}

/// Asymptotic coefficient `c(alpha) = sqrt(-ln(alpha / 2) / 2)`.
pub fn ks_coefficient(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub critical: f64,
    pub reject: bool,
    pub alpha: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(LabError::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Two-sample Kolmogorov–Smirnov test. Samples smaller than [`KS_MIN_N`]
/// never reject.
pub fn ks_two_sample(a: &[f64], b: &[f64], alpha: f64) -> Result<KsResult> {
    check_alpha(alpha)?;
    if a.is_empty() || b.is_empty() {
        return Err(LabError::InsufficientSamples { n: a.len().min(b.len()), needed: 1 });
    }
    let (a, b) = (sorted(a), sorted(b));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
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
    let critical = ks_coefficient(alpha) * ((n + m) / (n * m)).sqrt();
    let enough = a.len().min(b.len()) >= KS_MIN_N;
    Ok(KsResult { statistic: d, critical, reject: enough && d > critical, alpha })
}

/// One-sample KS test against `N(mu, sigma^2)`.
pub fn ks_normal(samples: &[f64], mu: f64, sigma: f64, alpha: f64) -> Result<KsResult> {
    check_alpha(alpha)?;
    if !(sigma > 0.0) {
        return Err(LabError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    if samples.is_empty() {
        return Err(LabError::InsufficientSamples { n: 0, needed: 1 });
    }
    let xs = sorted(samples);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = normal_cdf((x - mu) / sigma);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let critical = ks_coefficient(alpha) / n.sqrt();
    Ok(KsResult { statistic: d, critical, reject: xs.len() >= KS_MIN_N && d > critical, alpha })
}
