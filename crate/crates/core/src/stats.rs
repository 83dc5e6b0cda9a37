//! Sample statistics with standard errors and the one-sample
//! Kolmogorov–Smirnov test.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi theta form converges fast for small arguments
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let mut sum = 0.0;
        for k in 0..20 {
            let m = (2 * k + 1) as f64;
            sum += y.powf(m * m);
        }
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum).clamp(0.0, 1.0)
    } else {
        let mut sum = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sum += if k % 2 == 1 { term } else { -term };
            if term < 1e-18 {
                break;
            }
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample KS test of `data` against `cdf`, with the Stephens
/// small-sample correction of the asymptotic p-value.
pub fn ks_test<F: Fn(f64) -> f64>(data: &[f64], cdf: F) -> KsResult {
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    KsResult { statistic: d, p_value: kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d) }
}

/// Value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub n: usize,
    pub mean: Estimate,
    pub variance: Estimate,
    pub skewness: Estimate,
    pub excess_kurtosis: Estimate,
}

impl SampleMoments {
    pub fn of(data: &[f64]) -> Self {
        let n = data.len();
        let nf = n as f64;
        let mean = data.iter().sum::<f64>() / nf;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for &x in data {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        m2 /= nf;
        m3 /= nf;
        m4 /= nf;
        let variance = m2 * nf / (nf - 1.0);
        let var_se = ((m4 - m2 * m2 * (nf - 3.0) / (nf - 1.0)) / nf).max(0.0).sqrt();
        let skew_se = (6.0 * nf * (nf - 1.0) / ((nf - 2.0) * (nf + 1.0) * (nf + 3.0))).sqrt();
        let kurt_se = 2.0 * skew_se * ((nf * nf - 1.0) / ((nf - 3.0) * (nf + 5.0))).sqrt();
        Self {
            n,
            mean: Estimate { value: mean, se: (variance / nf).sqrt() },
            variance: Estimate { value: variance, se: var_se },
            skewness: Estimate { value: m3 / m2.powf(1.5), se: skew_se },
            excess_kurtosis: Estimate { value: m4 / (m2 * m2) - 3.0, se: kurt_se },
        }
    }
}

/// Pearson correlation with its standard error `√((1 − r²)/(n − 2))`.
pub fn correlation(x: &[f64], y: &[f64]) -> Estimate {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    let r = if sxx > 0.0 && syy > 0.0 { sxy / (sxx * syy).sqrt() } else { 0.0 };
    Estimate { value: r, se: ((1.0 - r * r) / (n - 2.0)).max(0.0).sqrt() }
}
