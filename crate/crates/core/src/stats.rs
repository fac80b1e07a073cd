//! Shared statistical machinery: Kolmogorov–Smirnov tests (continuous and
//! lattice variants), chi-square goodness of fit, and jackknife errors.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("degenerate sample (zero variance)")]
    Degenerate,
}

/// Survival function of the Kolmogorov distribution,
/// `Q(x) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 x^2)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100u32 {
        let term = (-2.0 * (j * j) as f64 * x * x).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS statistic of `samples` against a continuous CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::InsufficientSamples { needed: 1, got: 0 });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        let hi = (i + 1) as f64 / n - f;
        let lo = f - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    Ok(d)
}

/// P-value for a one-sample KS statistic using Stephens' finite-sample
/// scaling `(sqrt(n) + 0.12 + 0.11/sqrt(n)) D`.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)
}

/// KS test of samples against the standard normal.
pub fn ks_test_std_normal(samples: &mut [f64]) -> Result<(f64, f64), StatsError> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = ks_statistic(samples, |x| normal.cdf(x))?;
    Ok((d, ks_p_value(d, samples.len())))
}

/// KS statistic for integer-valued samples against a discrete CDF given at
/// integer points: `sup_m |ECDF(m) - F(m)|` over the observed support.
pub fn ks_statistic_discrete<F: Fn(i64) -> f64>(
    samples: &[i64],
    cdf: F,
) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    let mut i = 0usize;
    // Check just below the smallest observed value too.
    d = d.max(cdf(sorted[0] - 1));
    while i < sorted.len() {
        let m = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == m {
            j += 1;
        }
        let ecdf_at_m = j as f64 / n;
        let ecdf_below = i as f64 / n;
        // ECDF is flat strictly below m, so the gap there peaks at F(m-1).
        d = d
            .max((ecdf_at_m - cdf(m)).abs())
            .max((cdf(m - 1) - ecdf_below).abs());
        i = j;
    }
    Ok(d)
}

/// Chi-square goodness of fit with small-expectation pooling.
///
/// `expected` are cell probabilities on `0..expected.len()`, with any
/// remaining mass treated as a final overflow cell. Cells are pooled from the
/// tail until every expected count is at least `min_expected`.
pub fn chi_square_gof(
    observed: &[u64],
    expected: &[f64],
    min_expected: f64,
) -> Result<ChiSquareReport, StatsError> {
    let n: u64 = observed.iter().sum();
    if n == 0 {
        return Err(StatsError::InsufficientSamples { needed: 1, got: 0 });
    }
    let nf = n as f64;
    let cells = expected.len();
    let mut obs: Vec<f64> = (0..cells)
        .map(|i| observed.get(i).copied().unwrap_or(0) as f64)
        .collect();
    // Overflow cell: observations beyond the table plus residual probability.
    let overflow_obs: u64 = observed.iter().skip(cells).sum();
    let overflow_p = (1.0 - expected.iter().sum::<f64>()).max(0.0);
    obs.push(overflow_obs as f64);
    let mut exp: Vec<f64> = expected.iter().map(|p| p * nf).collect();
    exp.push(overflow_p * nf);

    // Pool from the tail until all expected counts clear the threshold.
    let mut pooled_obs = Vec::new();
    let mut pooled_exp = Vec::new();
    let mut acc_o = 0.0;
    let mut acc_e = 0.0;
    for i in (0..obs.len()).rev() {
        acc_o += obs[i];
        acc_e += exp[i];
        if acc_e >= min_expected || i == 0 {
            pooled_obs.push(acc_o);
            pooled_exp.push(acc_e);
            acc_o = 0.0;
            acc_e = 0.0;
        }
    }
    if pooled_obs.len() < 2 {
        return Err(StatsError::Degenerate);
    }
    let stat: f64 = pooled_obs
        .iter()
        .zip(&pooled_exp)
        .filter(|(_, e)| **e > 0.0)
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum();
    let dof = pooled_obs.len() - 1;
    let chi = ChiSquared::new(dof as f64).expect("positive dof");
    let p_value = 1.0 - chi.cdf(stat);
    Ok(ChiSquareReport {
        statistic: stat,
        dof,
        p_value,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ChiSquareReport {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Leave-one-block-out jackknife over `blocks.len()` precomputed block
/// summaries. `stat` maps a set of included block indices to the statistic.
///
/// Returns `(estimate_on_all, standard_error)`.
pub fn jackknife<F: Fn(&[usize]) -> f64>(num_blocks: usize, stat: F) -> (f64, f64) {
    assert!(num_blocks >= 2);
    let all: Vec<usize> = (0..num_blocks).collect();
    let full = stat(&all);
    let mut leave_out = Vec::with_capacity(num_blocks);
    for skip in 0..num_blocks {
        let subset: Vec<usize> = (0..num_blocks).filter(|&b| b != skip).collect();
        leave_out.push(stat(&subset));
    }
    let b = num_blocks as f64;
    let mean = leave_out.iter().sum::<f64>() / b;
    let var = leave_out
        .iter()
        .map(|t| (t - mean) * (t - mean))
        .sum::<f64>()
        * (b - 1.0)
        / b;
    (full, var.sqrt())
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(x)
}
