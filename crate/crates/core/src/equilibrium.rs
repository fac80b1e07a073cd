//! Exact equilibrium quantities for a validated rate: the normalizer, the
//! density and its inverse, and inverse-CDF samplers for the bulk marginal,
//! the size-biased (origin) marginal, and the one-extra-particle marginal,
//! together with whole-configuration samplers for the corresponding product
//! measures.

use crate::model::{Configuration, ModelError, RateFunction, Torus};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error("series diverges: alpha = {alpha} against rate tail (max ratio {max_ratio})")]
    DivergentSeries { alpha: f64, max_ratio: f64 },
    #[error("alpha must be positive (got {0})")]
    NonPositiveAlpha(f64),
    #[error("target density {target} is outside the attainable range (max estimate {max})")]
    DensityOutOfRange { target: f64, max: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Ratio threshold: the geometric tail bound is applied once the term ratio
/// `alpha/g(k)` stays at or below this value.
const RATIO_CAP: f64 = 0.95;
const MAX_TERMS: usize = 200_000;

/// Which single-site marginal to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalKind {
    /// Bulk marginal `mu(k) ∝ alpha^k / (g(1)...g(k))`.
    Bulk,
    /// Size-biased origin marginal `mu0(k) ∝ k mu(k)`, supported on k >= 1.
    Palm,
    /// One extra particle on a bulk draw: `mu'(k) = mu(k-1)`, k >= 1.
    Primed,
}

/// Which product measure to sample a configuration from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    /// Product of bulk marginals at every site.
    Product,
    /// Bulk everywhere, size-biased at the origin (reference-frame law).
    Palm,
    /// Bulk everywhere, one extra particle on a bulk draw at the origin.
    Primed,
}

/// Frozen equilibrium tables for one `(g, alpha)` pair.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub alpha: f64,
    pub rho: f64,
    pub z: f64,
    pub tail_tol: f64,
    /// Truncation point: weights tabulated for k = 0..=k_max.
    pub k_max: usize,
    /// Unnormalized weights `w_k = alpha^k / (g(1)...g(k))`.
    weights: Vec<f64>,
    bulk_cdf: Vec<f64>,
    palm_cdf: Vec<f64>,
    primed_cdf: Vec<f64>,
    /// Density estimate at the largest admissible alpha; a lower bound on
    /// the true critical density when the rate keeps growing.
    pub rho_star_estimate: f64,
}

/// Normalizer `Z = sum_k alpha^k / (g(1)...g(k))` with certified truncation.
///
/// Returns `(Z, k_max)`. The residual tail is bounded geometrically once the
/// term ratio stays at or below [`RATIO_CAP`]; truncation stops when that
/// bound drops below `tail_tol * Z`.
pub fn partition_function(
    g: &RateFunction,
    alpha: f64,
    tail_tol: f64,
) -> Result<(f64, usize), EquilibriumError> {
    let weights = weight_table(g, alpha, tail_tol)?;
    Ok((weights.iter().sum(), weights.len() - 1))
}

fn weight_table(g: &RateFunction, alpha: f64, tail_tol: f64) -> Result<Vec<f64>, EquilibriumError> {
    if alpha <= 0.0 {
        return Err(EquilibriumError::NonPositiveAlpha(alpha));
    }
    // Divergence screen on the probe tail, with the documented 0.95 safety
    // factor relative to the liminf estimate.
    let tail_start = g.probe_max / 2;
    let max_ratio = (tail_start..=g.probe_max)
        .map(|k| alpha / g.value(k))
        .fold(0.0, f64::max);
    if max_ratio > RATIO_CAP {
        return Err(EquilibriumError::DivergentSeries { alpha, max_ratio });
    }

    let mut weights = vec![1.0f64];
    let mut w = 1.0f64;
    let mut partial = 1.0f64;
    let mut k = 0u64;
    loop {
        k += 1;
        let ratio = alpha / g.value(k);
        w *= ratio;
        weights.push(w);
        partial += w;
        if ratio <= RATIO_CAP {
            let tail_bound = w * RATIO_CAP / (1.0 - RATIO_CAP);
            if tail_bound < tail_tol * partial {
                break;
            }
        }
        if weights.len() > MAX_TERMS {
            return Err(EquilibriumError::DivergentSeries { alpha, max_ratio });
        }
    }
    Ok(weights)
}

/// Density `rho(alpha) = sum_k k mu(k)` from the truncated table.
pub fn density(g: &RateFunction, alpha: f64, tail_tol: f64) -> Result<f64, EquilibriumError> {
    let weights = weight_table(g, alpha, tail_tol)?;
    let z: f64 = weights.iter().sum();
    Ok(weights
        .iter()
        .enumerate()
        .map(|(k, w)| k as f64 * w)
        .sum::<f64>()
        / z)
}

/// Invert the strictly increasing map `alpha -> rho(alpha)` by bisection to
/// `|rho(alpha) - target| < 1e-10`.
pub fn invert_density(
    g: &RateFunction,
    rho_target: f64,
    tail_tol: f64,
) -> Result<f64, EquilibriumError> {
    let alpha_max = alpha_ceiling(g);
    let rho_max = density(g, alpha_max, tail_tol)?;
    if rho_target <= 0.0 || rho_target > rho_max {
        return Err(EquilibriumError::DensityOutOfRange {
            target: rho_target,
            max: rho_max,
        });
    }
    let (mut lo, mut hi) = (0.0f64, alpha_max);
    // Bisection on rho: monotone in alpha.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let r = density(g, mid, tail_tol)?;
        if (r - rho_target).abs() < 1e-10 {
            return Ok(mid);
        }
        if r < rho_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Largest alpha admitted by the divergence screen.
fn alpha_ceiling(g: &RateFunction) -> f64 {
    RATIO_CAP * g.liminf_estimate
}

impl ModelParams {
    /// Build all tables for `(g, alpha)`.
    pub fn new(g: &RateFunction, alpha: f64, tail_tol: f64) -> Result<Self, EquilibriumError> {
        let weights = weight_table(g, alpha, tail_tol)?;
        let z: f64 = weights.iter().sum();
        let k_max = weights.len() - 1;
        let first_moment: f64 = weights.iter().enumerate().map(|(k, w)| k as f64 * w).sum();
        let rho = first_moment / z;

        // Bulk CDF over k = 0..=k_max; residual tail mass folds into the
        // last atom so the table is exactly normalized.
        let bulk_cdf = cdf_from(weights.iter().copied(), z);
        // Size-biased: mu0(k) = k mu(k) / rho, supported on k >= 1.
        let palm_cdf = cdf_from(
            weights
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, w)| k as f64 * w),
            first_moment,
        );
        // One extra particle: mu'(k) = mu(k-1) for k >= 1 (same normalizer).
        let primed_cdf = cdf_from(weights.iter().copied(), z);

        let rho_star_estimate = density(g, alpha_ceiling(g), tail_tol)?;

        let params = ModelParams {
            alpha,
            rho,
            z,
            tail_tol,
            k_max,
            weights,
            bulk_cdf,
            palm_cdf,
            primed_cdf,
            rho_star_estimate,
        };
        if g.is_id {
            params.assert_primed_below_palm();
        }
        Ok(params)
    }

    /// Build from a density target instead of alpha.
    pub fn from_density(
        g: &RateFunction,
        rho: f64,
        tail_tol: f64,
    ) -> Result<Self, EquilibriumError> {
        let alpha = invert_density(g, rho, tail_tol)?;
        ModelParams::new(g, alpha, tail_tol)
    }

    /// Bulk probability `mu(k)` from the truncated table.
    pub fn bulk_pmf(&self, k: usize) -> f64 {
        self.weights.get(k).copied().unwrap_or(0.0) / self.z
    }

    /// Size-biased origin probability `mu0(k) = k mu(k) / rho`.
    pub fn palm_pmf(&self, k: usize) -> f64 {
        k as f64 * self.bulk_pmf(k) / self.rho
    }

    /// One-extra-particle probability `mu'(k) = mu(k-1)` for `k >= 1`.
    pub fn primed_pmf(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.bulk_pmf(k - 1)
        }
    }

    fn cdf(&self, kind: MarginalKind) -> &[f64] {
        match kind {
            MarginalKind::Bulk => &self.bulk_cdf,
            MarginalKind::Palm => &self.palm_cdf,
            MarginalKind::Primed => &self.primed_cdf,
        }
    }

    /// Exact inverse-CDF draw from the truncated marginal table.
    pub fn sample_marginal<R: Rng>(&self, kind: MarginalKind, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        self.quantile(kind, u)
    }

    /// Quantile function of the marginal; monotone in `u`, which makes a
    /// common-uniform draw a monotone coupling between two marginals.
    pub fn quantile(&self, kind: MarginalKind, u: f64) -> u64 {
        let cdf = self.cdf(kind);
        let idx = cdf.partition_point(|&c| c <= u);
        let idx = idx.min(cdf.len() - 1);
        match kind {
            MarginalKind::Bulk => idx as u64,
            // Palm CDF table starts at k = 1; primed is 1 + bulk.
            MarginalKind::Palm => idx as u64 + 1,
            MarginalKind::Primed => idx as u64 + 1,
        }
    }

    /// CDF at occupancy `k` (exact, tail folded into the last atom).
    pub fn cdf_at(&self, kind: MarginalKind, k: u64) -> f64 {
        let cdf = self.cdf(kind);
        let idx = match kind {
            MarginalKind::Bulk => k as i64,
            MarginalKind::Palm | MarginalKind::Primed => k as i64 - 1,
        };
        if idx < 0 {
            0.0
        } else {
            cdf.get(idx as usize).copied().unwrap_or(1.0)
        }
    }

    /// Draw a full configuration: independent site draws, with the origin
    /// drawn from the ensemble's distinguished marginal.
    pub fn sample_configuration<R: Rng>(
        &self,
        ensemble: EnsembleKind,
        torus: Torus,
        rng: &mut R,
    ) -> Configuration {
        let n = torus.num_sites();
        let mut occ = vec![0u32; n];
        for (site, slot) in occ.iter_mut().enumerate() {
            let kind = match (site, ensemble) {
                (0, EnsembleKind::Palm) => MarginalKind::Palm,
                (0, EnsembleKind::Primed) => MarginalKind::Primed,
                _ => MarginalKind::Bulk,
            };
            *slot = self.sample_marginal(kind, rng) as u32;
        }
        Configuration::new(torus, occ)
    }

    // Under an (ID) rate the one-extra-particle marginal must sit below the
    // size-biased one in stochastic order (pointwise CDF domination). A
    // violation for a validated (ID) rate is a bug, not a data issue.
    fn assert_primed_below_palm(&self) {
        for k in 1..=(self.k_max as u64 + 1) {
            let primed = self.cdf_at(MarginalKind::Primed, k);
            let palm = self.cdf_at(MarginalKind::Palm, k);
            assert!(
                primed >= palm - 1e-12,
                "stochastic order violated at k = {k}: primed CDF {primed} < palm CDF {palm}"
            );
        }
    }
}

fn cdf_from<I: Iterator<Item = f64>>(weights: I, normalizer: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = weights
        .map(|w| {
            acc += w / normalizer;
            acc
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    cdf
}
