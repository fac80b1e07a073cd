//! Ensemble statistics over replica trajectories and the statistical gates
//! built on them: drift, variance lower bound and identity, boundedness,
//! superadditivity, increment association, a CLT check, and the equilibrium
//! adjoint identities.
//!
//! All assertions are sigma-multiplier gates against jackknife standard
//! errors over replica blocks; every report row records the estimate, the
//! error, the target, and the verdict.

use crate::equilibrium::{EnsembleKind, MarginalKind, ModelParams};
use crate::model::RateFunction;
use crate::sim::{self, SimError, SimModel};
use crate::stats::{ks_p_value, ks_statistic, std_normal_cdf, StatsError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("need at least {needed} replicas, got {got}")]
    TooFewReplicas { needed: usize, got: usize },
    #[error("raw samples were not retained for this ensemble")]
    SamplesNotKept,
}

/// Streaming mean/co-moment accumulator over fixed-length observation
/// vectors, mergeable without order sensitivity beyond rounding.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    dim: usize,
    n: u64,
    mean: Vec<f64>,
    /// Centered co-moment sums, packed row-major upper triangle.
    m2: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(dim: usize) -> Self {
        MomentAccumulator {
            dim,
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    #[inline]
    fn pack(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        a * self.dim - a * (a + 1) / 2 + b
    }

    pub fn push(&mut self, obs: &[f64]) {
        debug_assert_eq!(obs.len(), self.dim);
        self.n += 1;
        let w = 1.0 / self.n as f64;
        // delta before the mean update, delta2 after: Welford cross terms.
        let deltas: Vec<f64> = obs.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&deltas) {
            *m += d * w;
        }
        for a in 0..self.dim {
            let d2a = obs[a] - self.mean[a];
            for b in a..self.dim {
                let idx = self.pack(a, b);
                self.m2[idx] += deltas[b] * d2a;
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        debug_assert_eq!(self.dim, other.dim);
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let deltas: Vec<f64> = other
            .mean
            .iter()
            .zip(&self.mean)
            .map(|(mb, ma)| mb - ma)
            .collect();
        for a in 0..self.dim {
            for b in a..self.dim {
                let idx = self.pack(a, b);
                self.m2[idx] += other.m2[idx] + deltas[a] * deltas[b] * na * nb / n;
            }
        }
        for (ma, d) in self.mean.iter_mut().zip(&deltas) {
            *ma += d * nb / n;
        }
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self, a: usize) -> f64 {
        self.mean[a]
    }

    /// Sample covariance (n-1 divisor).
    pub fn covariance(&self, a: usize, b: usize) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.m2[self.pack(a, b)] / (self.n as f64 - 1.0)
    }

    /// Plain second moment `mean(v_a v_b)`.
    pub fn raw_moment(&self, a: usize, b: usize) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.m2[self.pack(a, b)] / self.n as f64 + self.mean[a] * self.mean[b]
    }
}

/// One gate outcome. `target` is the reference value the estimate is held
/// against; `pass` is the sigma-gate verdict.
#[derive(Debug, Clone)]
pub struct GateReport {
    pub test: String,
    pub time: f64,
    pub estimate: f64,
    pub se: f64,
    pub target: f64,
    pub pass: bool,
}

impl GateReport {
    pub fn verdict(&self) -> &'static str {
        if self.pass {
            "pass"
        } else {
            "FAIL"
        }
    }
}

/// Per-checkpoint block accumulators over an ensemble of replicas.
///
/// Observation layout per checkpoint: `d` position coordinates followed by
/// `d` compensator coordinates.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub dim: usize,
    /// blocks[b][t]: accumulator for replica block b at checkpoint t.
    blocks: Vec<Vec<MomentAccumulator>>,
    /// Merged-over-all-blocks accumulators per checkpoint.
    all: Vec<MomentAccumulator>,
    /// Leave-one-block-out merges: loo[b][t].
    loo: Vec<Vec<MomentAccumulator>>,
    /// Raw scalar positions per checkpoint (d = 1 only), replica-ordered.
    raw_x: Option<Vec<Vec<f64>>>,
}

impl EnsembleStats {
    /// Fold replica rows (replica-indexed, each `[T][2d]`) into `n_blocks`
    /// block accumulators; replica `r` lands in block `r % n_blocks`.
    pub fn from_rows(
        times: Vec<f64>,
        dim: usize,
        rows: &[Vec<Vec<f64>>],
        n_blocks: usize,
        keep_raw: bool,
    ) -> Self {
        let b = n_blocks.min(rows.len().max(1));
        let mut blocks = vec![vec![MomentAccumulator::new(2 * dim); times.len()]; b];
        for (r, row) in rows.iter().enumerate() {
            let blk = &mut blocks[r % b];
            for (t, obs) in row.iter().enumerate() {
                blk[t].push(obs);
            }
        }
        let raw_x = if keep_raw && dim == 1 {
            let mut per_time = vec![Vec::with_capacity(rows.len()); times.len()];
            for row in rows {
                for (t, obs) in row.iter().enumerate() {
                    per_time[t].push(obs[0]);
                }
            }
            Some(per_time)
        } else {
            None
        };
        Self::assemble(times, dim, blocks, raw_x)
    }

    fn assemble(
        times: Vec<f64>,
        dim: usize,
        blocks: Vec<Vec<MomentAccumulator>>,
        raw_x: Option<Vec<Vec<f64>>>,
    ) -> Self {
        let b = blocks.len();
        let t_len = times.len();
        let mut all = vec![MomentAccumulator::new(2 * dim); t_len];
        for blk in &blocks {
            for (t, acc) in blk.iter().enumerate() {
                all[t].merge(acc);
            }
        }
        let mut loo = vec![vec![MomentAccumulator::new(2 * dim); t_len]; b];
        for (skip, out_row) in loo.iter_mut().enumerate() {
            for (other, blk) in blocks.iter().enumerate() {
                if other == skip {
                    continue;
                }
                for (t, acc) in blk.iter().enumerate() {
                    out_row[t].merge(acc);
                }
            }
        }
        EnsembleStats {
            times,
            dim,
            blocks,
            all,
            loo,
            raw_x,
        }
    }

    pub fn replicas(&self) -> u64 {
        self.all.first().map_or(0, MomentAccumulator::count)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn merged(&self, t: usize) -> &MomentAccumulator {
        &self.all[t]
    }

    /// Merge another ensemble collected with the same layout.
    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.times, other.times);
        assert_eq!(self.blocks.len(), other.blocks.len());
        for (mine, theirs) in self.blocks.iter_mut().zip(&other.blocks) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                a.merge(b);
            }
        }
        let raw = match (self.raw_x.take(), &other.raw_x) {
            (Some(mut mine), Some(theirs)) => {
                for (m, t) in mine.iter_mut().zip(theirs) {
                    m.extend_from_slice(t);
                }
                Some(mine)
            }
            _ => None,
        };
        *self = Self::assemble(
            std::mem::take(&mut self.times),
            self.dim,
            std::mem::take(&mut self.blocks),
            raw,
        );
    }

    /// Jackknife a statistic of the per-checkpoint merged accumulators.
    pub fn jackknife<F: Fn(&[MomentAccumulator]) -> f64>(&self, stat: F) -> (f64, f64) {
        let est = stat(&self.all);
        let b = self.loo.len();
        if b < 2 {
            return (est, f64::NAN);
        }
        let loo_vals: Vec<f64> = self.loo.iter().map(|accs| stat(accs)).collect();
        let mean = loo_vals.iter().sum::<f64>() / b as f64;
        let var = loo_vals
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            * (b as f64 - 1.0)
            / b as f64;
        (est, var.sqrt())
    }

    pub fn raw_positions(&self, t: usize) -> Result<&[f64], EstimatorError> {
        self.raw_x
            .as_ref()
            .map(|per_time| per_time[t].as_slice())
            .ok_or(EstimatorError::SamplesNotKept)
    }
}

/// Scalar summaries of one checkpoint accumulator (vector observables are
/// reduced by coordinate sums).
pub struct CheckpointSummary;

impl CheckpointSummary {
    /// `sum_c Var(x_c)` with the sample (n-1) divisor.
    pub fn variance(acc: &MomentAccumulator, dim: usize) -> f64 {
        (0..dim).map(|c| acc.covariance(c, c)).sum()
    }

    /// `sum_c mean(A_c^2)`.
    pub fn mean_sq_compensator(acc: &MomentAccumulator, dim: usize) -> f64 {
        (0..dim).map(|c| acc.raw_moment(dim + c, dim + c)).sum()
    }

    /// `sum_c mean(M_c A_c)` with `M = x - v t - A` for velocity `v`.
    pub fn mean_martingale_dot_compensator(
        acc: &MomentAccumulator,
        dim: usize,
        velocity: &[f64],
        time: f64,
    ) -> f64 {
        (0..dim)
            .map(|c| {
                let xa = acc.raw_moment(c, dim + c);
                let a_mean = acc.mean(dim + c);
                let a_sq = acc.raw_moment(dim + c, dim + c);
                xa - velocity[c] * time * a_mean - a_sq
            })
            .sum()
    }

    /// `sum_c mean(M_c^2)`.
    pub fn mean_sq_martingale(
        acc: &MomentAccumulator,
        dim: usize,
        velocity: &[f64],
        time: f64,
    ) -> f64 {
        (0..dim)
            .map(|c| {
                let vt = velocity[c] * time;
                let x2 = acc.raw_moment(c, c);
                let a2 = acc.raw_moment(dim + c, dim + c);
                let xa = acc.raw_moment(c, dim + c);
                let xm = acc.mean(c);
                let am = acc.mean(dim + c);
                // E[(x - vt - A)^2] expanded in raw moments.
                x2 + vt * vt + a2 - 2.0 * vt * xm - 2.0 * xa + 2.0 * vt * am
            })
            .sum()
    }
}

/// Ensemble collection plan.
#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    pub horizon: f64,
    pub times: Vec<f64>,
    pub replicas: usize,
    pub blocks: usize,
    pub seed: u64,
    pub ensemble: EnsembleKind,
    pub keep_raw: bool,
    /// Also record the reference-frame occupancy at this site at the end of
    /// each replica.
    pub watch_frame_site: Option<Vec<i64>>,
}

impl EnsembleSpec {
    pub fn new(horizon: f64, times: Vec<f64>, replicas: usize, seed: u64) -> Self {
        EnsembleSpec {
            horizon,
            times,
            replicas,
            blocks: 100,
            seed,
            ensemble: EnsembleKind::Palm,
            keep_raw: false,
            watch_frame_site: None,
        }
    }
}

/// Ensemble outputs: block statistics plus optional extras.
pub struct EnsembleData {
    pub stats: EnsembleStats,
    /// Final-time occupancy of the watched frame site, per replica.
    pub watched_occupancy: Option<Vec<u32>>,
    pub total_events: u64,
}

/// Run `spec.replicas` independent replicas (replica `r` uses RNG stream
/// `r`) and reduce them deterministically into block accumulators.
pub fn run_ensemble(
    model: &SimModel,
    params: &ModelParams,
    spec: &EnsembleSpec,
) -> Result<EnsembleData, EstimatorError> {
    if spec.replicas == 0 {
        return Err(EstimatorError::TooFewReplicas { needed: 1, got: 0 });
    }
    let dim = model.torus.dim;
    let rows: Result<Vec<_>, SimError> = (0..spec.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(r as u64);
            let initial = params.sample_configuration(spec.ensemble, model.torus, &mut rng);
            let traj = sim::run(&initial, model, spec.horizon, &spec.times, &mut rng)?;
            let mut row = Vec::with_capacity(spec.times.len());
            for (i, cp) in traj.checkpoints.iter().enumerate() {
                let mut obs = Vec::with_capacity(2 * dim);
                obs.extend(cp.position.iter().map(|&x| x as f64));
                obs.extend(traj.compensator(model, i));
                row.push(obs);
            }
            let watched = spec
                .watch_frame_site
                .as_ref()
                .map(|site| traj.final_frame.occupancy(model.torus.index(site)));
            Ok((row, watched, traj.events))
        })
        .collect();
    let rows = rows?;
    let total_events = rows.iter().map(|(_, _, e)| e).sum();
    let watched_occupancy = if spec.watch_frame_site.is_some() {
        Some(rows.iter().map(|(_, w, _)| w.unwrap_or(0)).collect())
    } else {
        None
    };
    let plain_rows: Vec<Vec<Vec<f64>>> = rows.into_iter().map(|(row, _, _)| row).collect();
    let stats = EnsembleStats::from_rows(
        spec.times.clone(),
        dim,
        &plain_rows,
        spec.blocks,
        spec.keep_raw,
    );
    Ok(EnsembleData {
        stats,
        watched_occupancy,
        total_events,
    })
}

/// Check `mean(x(t))/t` against the equilibrium velocity at each checkpoint.
pub fn drift_check(stats: &EnsembleStats, model: &SimModel, sigma: f64) -> Vec<GateReport> {
    let velocity = model.mean_velocity();
    let mut out = Vec::new();
    for (t_idx, &t) in stats.times.iter().enumerate() {
        for c in 0..stats.dim {
            let (est, se) = stats.jackknife(|accs| accs[t_idx].mean(c) / t);
            let target = velocity[c];
            out.push(GateReport {
                test: if stats.dim == 1 {
                    "drift".into()
                } else {
                    format!("drift[{c}]")
                },
                time: t,
                estimate: est,
                se,
                target,
                pass: (est - target).abs() <= sigma * se,
            });
        }
    }
    out
}

/// Variance gates: the diffusive lower bound, the exact variance identity,
/// and the boundedness-ratio diagnostic over a time window.
pub fn variance_bounds_check(
    stats: &EnsembleStats,
    model: &SimModel,
    sigma: f64,
    ratio_gate: f64,
    window: (f64, f64),
) -> Vec<GateReport> {
    let dim = stats.dim;
    let rate = model.alpha / model.rho * model.second_moment_trace();
    let mut out = Vec::new();
    for (t_idx, &t) in stats.times.iter().enumerate() {
        let target = rate * t;
        let (v_hat, v_se) = stats.jackknife(|accs| CheckpointSummary::variance(&accs[t_idx], dim));
        out.push(GateReport {
            test: "var_lower".into(),
            time: t,
            estimate: v_hat,
            se: v_se,
            target,
            pass: v_hat >= target - sigma * v_se,
        });
        let (resid, resid_se) = stats.jackknife(|accs| {
            CheckpointSummary::variance(&accs[t_idx], dim)
                - CheckpointSummary::mean_sq_compensator(&accs[t_idx], dim)
                - target
        });
        out.push(GateReport {
            test: "var_identity".into(),
            time: t,
            estimate: resid,
            se: resid_se,
            target: 0.0,
            pass: resid.abs() <= sigma * resid_se,
        });
    }
    // Boundedness diagnostic: max/min of V(t)/t across the window.
    let window_idx: Vec<usize> = stats
        .times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= window.0 && t <= window.1)
        .map(|(i, _)| i)
        .collect();
    if window_idx.len() >= 2 {
        let (ratio, ratio_se) = stats.jackknife(|accs| {
            let per_t: Vec<f64> = window_idx
                .iter()
                .map(|&i| CheckpointSummary::variance(&accs[i], dim) / stats.times[i])
                .collect();
            let max = per_t.iter().cloned().fold(f64::MIN, f64::max);
            let min = per_t.iter().cloned().fold(f64::MAX, f64::min);
            max / min
        });
        out.push(GateReport {
            test: "var_ratio_window".into(),
            time: window.1,
            estimate: ratio,
            se: ratio_se,
            target: ratio_gate,
            pass: ratio <= ratio_gate,
        });
    }
    out
}

/// Superadditivity scan over all in-grid sums `t_i + t_j`, plus the running
/// estimate of `sup V(t)/t`.
pub fn superadditivity_scan(stats: &EnsembleStats, sigma: f64) -> (Vec<GateReport>, f64) {
    let dim = stats.dim;
    let times = &stats.times;
    let mut out = Vec::new();
    for i in 0..times.len() {
        for j in i..times.len() {
            let sum = times[i] + times[j];
            let Some(k) = times.iter().position(|&t| (t - sum).abs() < 1e-9) else {
                continue;
            };
            let (gap, gap_se) = stats.jackknife(|accs| {
                CheckpointSummary::variance(&accs[k], dim)
                    - CheckpointSummary::variance(&accs[i], dim)
                    - CheckpointSummary::variance(&accs[j], dim)
            });
            out.push(GateReport {
                test: format!("superadd {}+{}", times[i], times[j]),
                time: sum,
                estimate: gap,
                se: gap_se,
                target: 0.0,
                pass: gap >= -sigma * gap_se,
            });
        }
    }
    let sup = times
        .iter()
        .enumerate()
        .map(|(i, &t)| CheckpointSummary::variance(&stats.all[i], dim) / t)
        .fold(f64::MIN, f64::max);
    (out, sup)
}

/// Monotone test functions for the association gate.
#[derive(Debug, Clone, Copy)]
pub enum MonotoneFn {
    Identity,
    /// `min(max(v - a, 0), b)`.
    Ramp {
        a: f64,
        b: f64,
    },
}

impl MonotoneFn {
    pub fn eval(&self, v: f64) -> f64 {
        match self {
            MonotoneFn::Identity => v,
            MonotoneFn::Ramp { a, b } => (v - a).max(0.0).min(*b),
        }
    }

    pub fn label(&self) -> String {
        match self {
            MonotoneFn::Identity => "id".into(),
            MonotoneFn::Ramp { a, b } => format!("ramp({a:.3},{b:.3})"),
        }
    }
}

/// Identity plus clipped ramps with knots on a grid around the sample mean.
pub fn monotone_family(samples: &[f64]) -> Vec<MonotoneFn> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let sd = sd.max(1e-9);
    let mut fns = vec![MonotoneFn::Identity];
    for shift in [-1.0, 0.0, 1.0] {
        fns.push(MonotoneFn::Ramp {
            a: mean + shift * sd,
            b: sd,
        });
    }
    fns
}

/// Covariance gates `Cov(phi(x(t+s) - x(t)), psi(x(t))) >= -sigma SE` for
/// each pair from the monotone families of the increment and the base.
pub fn association_test(
    base: &[f64],
    later: &[f64],
    n_blocks: usize,
    sigma: f64,
    time: f64,
) -> Vec<GateReport> {
    assert_eq!(base.len(), later.len());
    let increments: Vec<f64> = later.iter().zip(base).map(|(l, b)| l - b).collect();
    let phis = monotone_family(&increments);
    let psis = monotone_family(base);
    let b = n_blocks.min(base.len());
    let mut out = Vec::new();
    for phi in &phis {
        for psi in &psis {
            // Per-block accumulators over (phi(inc), psi(base)).
            let mut blocks = vec![MomentAccumulator::new(2); b];
            for (r, (inc, bas)) in increments.iter().zip(base).enumerate() {
                blocks[r % b].push(&[phi.eval(*inc), psi.eval(*bas)]);
            }
            let cov_of = |skip: Option<usize>| {
                let mut acc = MomentAccumulator::new(2);
                for (i, blk) in blocks.iter().enumerate() {
                    if Some(i) != skip {
                        acc.merge(blk);
                    }
                }
                acc.covariance(0, 1)
            };
            let est = cov_of(None);
            let loo: Vec<f64> = (0..b).map(|i| cov_of(Some(i))).collect();
            let mean = loo.iter().sum::<f64>() / b as f64;
            let var = loo.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * (b as f64 - 1.0)
                / b as f64;
            let se = var.sqrt();
            out.push(GateReport {
                test: format!("assoc {}|{}", phi.label(), psi.label()),
                time,
                estimate: est,
                se,
                target: 0.0,
                pass: est >= -sigma * se,
            });
        }
    }
    out
}

/// CLT report at a fixed time.
#[derive(Debug, Clone)]
pub struct CltReport {
    pub sigma_sq: f64,
    pub sigma_sq_se: f64,
    /// 99% jackknife confidence interval for `V(t)/t`.
    pub ci: (f64, f64),
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub ks_pass: bool,
    /// None when the strict comparison is skipped (vanishing compensator).
    pub ci_above_ratio: Option<bool>,
    pub ratio_target: f64,
}

/// Kolmogorov–Smirnov normality of `x(t)` plus the diffusivity confidence
/// interval against `alpha/rho`.
///
/// Positions live on the integer lattice, so the empirical CDF is a step
/// function with pitch-sized jumps that a continuous KS test would flag
/// regardless of how good the normal approximation is; samples are
/// de-latticed with uniform `(-1/2, 1/2)` jitter (seeded, deterministic)
/// before standardizing.
#[allow(clippy::too_many_arguments)]
pub fn clt_test(
    positions: &[f64],
    time: f64,
    ratio_target: f64,
    skip_strict: bool,
    level: f64,
    n_blocks: usize,
    min_samples: usize,
    seed: u64,
) -> Result<CltReport, EstimatorError> {
    if positions.len() < min_samples {
        return Err(StatsError::InsufficientSamples {
            needed: min_samples,
            got: positions.len(),
        }
        .into());
    }
    let n = positions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX); // independent of the replica streams
    let dithered: Vec<f64> = positions
        .iter()
        .map(|&x| x + rng.random::<f64>() - 0.5)
        .collect();
    let mean = dithered.iter().sum::<f64>() / n as f64;
    let var = dithered
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / (n as f64 - 1.0);
    if var <= 0.0 {
        return Err(StatsError::Degenerate.into());
    }
    let sd = var.sqrt();
    let mut standardized: Vec<f64> = dithered.iter().map(|x| (x - mean) / sd).collect();
    let d = ks_statistic(&mut standardized, std_normal_cdf)?;
    let p = ks_p_value(d, n);

    // sigma^2 = V(t)/t from the undithered positions, jackknifed.
    let b = n_blocks.min(n);
    let mut blocks = vec![MomentAccumulator::new(1); b];
    for (r, &x) in positions.iter().enumerate() {
        blocks[r % b].push(&[x]);
    }
    let stat_of = |skip: Option<usize>| {
        let mut acc = MomentAccumulator::new(1);
        for (i, blk) in blocks.iter().enumerate() {
            if Some(i) != skip {
                acc.merge(blk);
            }
        }
        acc.covariance(0, 0) / time
    };
    let est = stat_of(None);
    let loo: Vec<f64> = (0..b).map(|i| stat_of(Some(i))).collect();
    let loo_mean = loo.iter().sum::<f64>() / b as f64;
    let var_loo = loo
        .iter()
        .map(|v| (v - loo_mean) * (v - loo_mean))
        .sum::<f64>()
        * (b as f64 - 1.0)
        / b as f64;
    let se = var_loo.sqrt();
    let z99 = 2.5758293035489004;
    let ci = (est - z99 * se, est + z99 * se);

    Ok(CltReport {
        sigma_sq: est,
        sigma_sq_se: se,
        ci,
        ks_statistic: d,
        ks_p_value: p,
        ks_pass: p > level,
        ci_above_ratio: if skip_strict {
            None
        } else {
            Some(ci.0 > ratio_target)
        },
        ratio_target,
    })
}

/// Bounded local test function for the adjoint identities; `sites` are
/// reference-frame offsets the function reads.
#[derive(Debug, Clone)]
pub enum LocalFn {
    One,
    Count(i64),
    IndicatorGe(i64, u32),
    Clipped(i64, u32),
}

impl LocalFn {
    pub fn sites(&self) -> Vec<i64> {
        match self {
            LocalFn::One => vec![],
            LocalFn::Count(s) | LocalFn::IndicatorGe(s, _) | LocalFn::Clipped(s, _) => vec![*s],
        }
    }

    fn eval<F: Fn(i64) -> u32>(&self, occupancy: F) -> f64 {
        match self {
            LocalFn::One => 1.0,
            LocalFn::Count(s) => occupancy(*s) as f64,
            LocalFn::IndicatorGe(s, c) => {
                if occupancy(*s) >= *c {
                    1.0
                } else {
                    0.0
                }
            }
            LocalFn::Clipped(s, cap) => occupancy(*s).min(*cap) as f64,
        }
    }

    pub fn label(&self) -> String {
        match self {
            LocalFn::One => "1".into(),
            LocalFn::Count(s) => format!("eta[{s}]"),
            LocalFn::IndicatorGe(s, c) => format!("ind(eta[{s}]>={c})"),
            LocalFn::Clipped(s, c) => format!("min(eta[{s}],{c})"),
        }
    }
}

/// The default test-function library for the adjoint identities.
pub fn local_fn_library(site: i64) -> Vec<LocalFn> {
    vec![
        LocalFn::One,
        LocalFn::Count(site),
        LocalFn::IndicatorGe(site, 2),
        LocalFn::Clipped(site, 3),
    ]
}

// A window of occupancies on frame sites -w..=w, origin size-biased.
struct Window {
    lo: i64,
    occ: Vec<u32>,
}

impl Window {
    fn sample<R: Rng>(params: &ModelParams, half_width: i64, rng: &mut R) -> Self {
        let occ: Vec<u32> = (-half_width..=half_width)
            .map(|s| {
                let kind = if s == 0 {
                    MarginalKind::Palm
                } else {
                    MarginalKind::Bulk
                };
                params.sample_marginal(kind, rng) as u32
            })
            .collect();
        Window {
            lo: -half_width,
            occ,
        }
    }

    #[inline]
    fn get(&self, site: i64) -> u32 {
        self.occ[(site - self.lo) as usize]
    }
}

/// Monte Carlo residuals for the four equilibrium adjoint identities, using
/// common draws for both sides of each identity.
///
/// Identities, with expectations under the size-biased product measure and
/// `k != 0` an off-origin site, `j` a displacement:
/// 1. `E[g(n_k) psi]            = alpha E[psi(. + delta_k)]`
/// 2. `E[g(n_0)(n_0-1)/n_0 psi] = alpha E[psi(. + delta_0)]`
/// 3. `E[(g(n_0)/n_0) psi]      = E[(g(n_0)/n_0) psi(recentred by +j)]`
/// 4. `E[(n_j+1)(g(n_0)/n_0) psi] = E[g(n_0) psi(recentred by -j)]`
#[allow(clippy::too_many_arguments)]
pub fn adjoint_identity_check<R: Rng>(
    g: &RateFunction,
    params: &ModelParams,
    psi: &LocalFn,
    k_site: i64,
    j_off: i64,
    samples: usize,
    sigma: f64,
    rng: &mut R,
) -> Vec<GateReport> {
    assert!(k_site != 0, "the first identity needs an off-origin site");
    assert!(j_off != 0);
    let reach = psi.sites().iter().map(|s| s.abs()).max().unwrap_or(0);
    let half_width = reach + k_site.abs() + 2 * j_off.abs() + 1;

    let mut diff_acc = vec![MomentAccumulator::new(1); 4];
    for _ in 0..samples {
        let w = Window::sample(params, half_width, rng);
        let n0 = w.get(0) as u64;
        let g0 = g.value(n0);
        let escape = g0 / n0 as f64;

        // 1: common draw, psi on the plain window vs the window plus a
        // particle at k.
        let lhs1 = g.value(w.get(k_site) as u64) * psi.eval(|s| w.get(s));
        let rhs1 = params.alpha * psi.eval(|s| w.get(s) + u32::from(s == k_site));
        diff_acc[0].push(&[lhs1 - rhs1]);

        // 2: origin variant.
        let lhs2 = g0 * (n0 as f64 - 1.0) / n0 as f64 * psi.eval(|s| w.get(s));
        let rhs2 = params.alpha * psi.eval(|s| w.get(s) + u32::from(s == 0));
        diff_acc[1].push(&[lhs2 - rhs2]);

        // 3: recentre after moving the origin particle by +j:
        // zeta_m = eta_{m+j} + [m=0] - [m=-j].
        let shifted_plus = |s: i64| -> u32 {
            let mut v = w.get(s + j_off);
            if s == 0 {
                v += 1;
            }
            if s == -j_off {
                v -= 1;
            }
            v
        };
        let lhs3 = escape * psi.eval(|s| w.get(s));
        let rhs3 = escape * psi.eval(shifted_plus);
        diff_acc[2].push(&[lhs3 - rhs3]);

        // 4: recentre after moving the origin particle by -j:
        // zeta_m = eta_{m-j} + [m=0] - [m=j].
        let shifted_minus = |s: i64| -> u32 {
            let mut v = w.get(s - j_off);
            if s == 0 {
                v += 1;
            }
            if s == j_off {
                v -= 1;
            }
            v
        };
        let lhs4 = (w.get(j_off) as f64 + 1.0) * escape * psi.eval(|s| w.get(s));
        let rhs4 = g0 * psi.eval(shifted_minus);
        diff_acc[3].push(&[lhs4 - rhs4]);
    }

    diff_acc
        .iter()
        .enumerate()
        .map(|(i, acc)| {
            let est = acc.mean(0);
            let se = (acc.covariance(0, 0) / acc.count() as f64).sqrt();
            GateReport {
                test: format!("identity{} psi={}", i + 1, psi.label()),
                time: 0.0,
                estimate: est,
                se,
                target: 0.0,
                pass: est.abs() <= sigma * se.max(1e-15),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_kernel, validate_rate, RateSpec, Torus};
    use crate::rate_expr::RateExpr;
    use proptest::prelude::*;

    fn rate(text: &str) -> RateFunction {
        validate_rate(RateSpec::Expr(RateExpr::parse(text).unwrap()), 64).unwrap()
    }

    fn toy_model(rate_text: &str, alpha: f64, side: usize) -> (SimModel, ModelParams) {
        let g = rate(rate_text);
        let kernel = validate_kernel(vec![(vec![1], 1.0)], 1).unwrap();
        let torus = Torus::new(1, side, kernel.range).unwrap();
        let params = ModelParams::new(&g, alpha, 1e-12).unwrap();
        (SimModel::new(g, kernel, torus, &params), params)
    }

    #[test]
    fn accumulator_matches_direct_formulas() {
        let data = [[1.0, 2.0], [3.0, -1.0], [0.5, 4.0], [2.5, 0.0], [-1.0, 1.0]];
        let mut acc = MomentAccumulator::new(2);
        for row in &data {
            acc.push(row);
        }
        let n = data.len() as f64;
        let mean0: f64 = data.iter().map(|r| r[0]).sum::<f64>() / n;
        let mean1: f64 = data.iter().map(|r| r[1]).sum::<f64>() / n;
        let cov: f64 = data
            .iter()
            .map(|r| (r[0] - mean0) * (r[1] - mean1))
            .sum::<f64>()
            / (n - 1.0);
        assert!((acc.mean(0) - mean0).abs() < 1e-14);
        assert!((acc.mean(1) - mean1).abs() < 1e-14);
        assert!((acc.covariance(0, 1) - cov).abs() < 1e-14);
        let raw: f64 = data.iter().map(|r| r[0] * r[1]).sum::<f64>() / n;
        assert!((acc.raw_moment(0, 1) - raw).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn merge_equals_unsplit(values in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 4..120), cut in 1usize..100) {
            let cut = cut % values.len().max(1);
            prop_assume!(cut >= 1 && cut < values.len());
            let mut whole = MomentAccumulator::new(2);
            for (a, b) in &values {
                whole.push(&[*a, *b]);
            }
            let mut left = MomentAccumulator::new(2);
            let mut right = MomentAccumulator::new(2);
            for (i, (a, b)) in values.iter().enumerate() {
                if i < cut {
                    left.push(&[*a, *b]);
                } else {
                    right.push(&[*a, *b]);
                }
            }
            left.merge(&right);
            prop_assert_eq!(left.count(), whole.count());
            for a in 0..2 {
                let scale = whole.mean(a).abs().max(1.0);
                prop_assert!((left.mean(a) - whole.mean(a)).abs() <= 1e-12 * scale);
                for b in a..2 {
                    let scale = whole.covariance(a, b).abs().max(1.0);
                    prop_assert!((left.covariance(a, b) - whole.covariance(a, b)).abs() <= 1e-12 * scale);
                }
            }
        }
    }

    #[test]
    fn drift_check_identity_rate() {
        // g(k)=k, p(1)=1: drift target is exactly one.
        let (model, params) = toy_model("k", 1.0, 32);
        let spec = EnsembleSpec::new(20.0, vec![10.0, 20.0], 2000, 7);
        let data = run_ensemble(&model, &params, &spec).unwrap();
        let reports = drift_check(&data.stats, &model, 3.5);
        assert!(!reports.is_empty());
        for r in &reports {
            assert!((r.target - 1.0).abs() < 1e-10);
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn variance_identity_and_lower_bound_identity_rate() {
        // For g(k)=k the compensator vanishes and V(t) = t exactly.
        let (model, params) = toy_model("k", 1.0, 32);
        let spec = EnsembleSpec::new(20.0, vec![5.0, 10.0, 20.0], 3000, 8);
        let data = run_ensemble(&model, &params, &spec).unwrap();
        let reports = variance_bounds_check(&data.stats, &model, 3.5, 2.0, (5.0, 20.0));
        for r in &reports {
            assert!(r.pass, "{r:?}");
        }
        // Compensator is identically zero here.
        let a2 = CheckpointSummary::mean_sq_compensator(data.stats.merged(0), 1);
        assert!(a2.abs() < 1e-18, "a2 = {a2}");
        assert!(model.compensator_vanishes());
    }

    #[test]
    fn martingale_mean_and_orthogonality() {
        let (model, params) = toy_model("min(k,3)", 0.8, 32);
        let spec = EnsembleSpec::new(10.0, vec![5.0, 10.0], 4000, 9);
        let data = run_ensemble(&model, &params, &spec).unwrap();
        let velocity = model.mean_velocity();
        for (t_idx, &t) in data.stats.times.iter().enumerate() {
            // mean(M) within noise of zero.
            let (m_mean, m_se) = data
                .stats
                .jackknife(|accs| accs[t_idx].mean(0) - velocity[0] * t - accs[t_idx].mean(1));
            assert!(m_mean.abs() <= 3.5 * m_se, "mean M = {m_mean} +- {m_se}");
            // mean(M A) within noise of zero (time-reversal orthogonality).
            let (ma, ma_se) = data.stats.jackknife(|accs| {
                CheckpointSummary::mean_martingale_dot_compensator(&accs[t_idx], 1, &velocity, t)
            });
            assert!(
                ma.abs() <= 3.5 * ma_se.max(1e-12),
                "mean MA = {ma} +- {ma_se}"
            );
            // Quadratic variation: mean(M^2) near (alpha/rho) t.
            let (m2, m2_se) = data.stats.jackknife(|accs| {
                CheckpointSummary::mean_sq_martingale(&accs[t_idx], 1, &velocity, t)
            });
            let target = model.alpha / model.rho * t;
            assert!(
                (m2 - target).abs() <= 3.5 * m2_se,
                "mean M^2 = {m2} vs {target} +- {m2_se}"
            );
        }
    }

    #[test]
    fn superadditivity_equality_for_identity_rate() {
        let (model, params) = toy_model("k", 1.0, 32);
        let spec = EnsembleSpec::new(20.0, vec![5.0, 10.0, 15.0, 20.0], 3000, 10);
        let data = run_ensemble(&model, &params, &spec).unwrap();
        let (reports, sup) = superadditivity_scan(&data.stats, 3.5);
        assert!(!reports.is_empty());
        for r in &reports {
            assert!(r.pass, "{r:?}");
        }
        assert!((sup - 1.0).abs() < 0.2, "sup V/t = {sup}");
    }

    #[test]
    fn superadditivity_empty_grid() {
        let (model, params) = toy_model("k", 1.0, 32);
        let spec = EnsembleSpec::new(7.0, vec![3.0, 7.0], 500, 11);
        let data = run_ensemble(&model, &params, &spec).unwrap();
        // 3+3, 3+7, 7+7 are all off-grid: no rows.
        let (reports, _) = superadditivity_scan(&data.stats, 3.0);
        assert!(reports.is_empty());
    }

    #[test]
    fn association_independent_increments() {
        // g(k)=k: the tagged particle is a Poisson process, increments are
        // independent of the past; covariances hover at zero but must clear
        // the -3 sigma gate.
        let (model, params) = toy_model("k", 1.0, 32);
        let mut spec = EnsembleSpec::new(20.0, vec![10.0, 20.0], 4000, 12);
        spec.keep_raw = true;
        let data = run_ensemble(&model, &params, &spec).unwrap();
        let base = data.stats.raw_positions(0).unwrap();
        let later = data.stats.raw_positions(1).unwrap();
        let reports = association_test(base, later, 100, 3.5, 10.0);
        assert_eq!(reports.len(), 16);
        for r in &reports {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn association_covariance_identity() {
        // Cov(increment, base) = (V(t+s) - V(t) - Var(increment))/2 exactly
        // on the same samples.
        let (model, params) = toy_model("min(k,3)", 0.8, 32);
        let mut spec = EnsembleSpec::new(16.0, vec![8.0, 16.0], 2000, 13);
        spec.keep_raw = true;
        let data = run_ensemble(&model, &params, &spec).unwrap();
        let base = data.stats.raw_positions(0).unwrap();
        let later = data.stats.raw_positions(1).unwrap();
        let n = base.len() as f64;
        let mean_b = base.iter().sum::<f64>() / n;
        let mean_l = later.iter().sum::<f64>() / n;
        let var_b = base.iter().map(|x| (x - mean_b).powi(2)).sum::<f64>() / (n - 1.0);
        let var_l = later.iter().map(|x| (x - mean_l).powi(2)).sum::<f64>() / (n - 1.0);
        let inc: Vec<f64> = later.iter().zip(base).map(|(l, b)| l - b).collect();
        let mean_i = inc.iter().sum::<f64>() / n;
        let var_i = inc.iter().map(|x| (x - mean_i).powi(2)).sum::<f64>() / (n - 1.0);
        let cov = base
            .iter()
            .zip(&inc)
            .map(|(b, i)| (b - mean_b) * (i - mean_i))
            .sum::<f64>()
            / (n - 1.0);
        let identity = (var_l - var_b - var_i) / 2.0;
        assert!(
            (cov - identity).abs() <= 1e-12 * cov.abs().max(1.0),
            "{cov} vs {identity}"
        );
    }

    #[test]
    fn clt_on_poisson_like_samples() {
        let (model, params) = toy_model("k", 1.0, 64);
        let mut spec = EnsembleSpec::new(60.0, vec![60.0], 12_000, 14);
        spec.keep_raw = true;
        let data = run_ensemble(&model, &params, &spec).unwrap();
        let xs = data.stats.raw_positions(0).unwrap();
        let report = clt_test(xs, 60.0, 1.0, true, 0.01, 100, 10_000, 99).unwrap();
        assert!(report.ks_pass, "p = {}", report.ks_p_value);
        assert!(report.ci.0 < 1.0 && report.ci.1 > 1.0, "{:?}", report.ci);
        assert!(report.ci_above_ratio.is_none());
    }

    #[test]
    fn clt_insufficient_samples() {
        let xs = vec![0.0; 10];
        assert!(matches!(
            clt_test(&xs, 10.0, 1.0, true, 0.01, 10, 100, 1),
            Err(EstimatorError::Stats(
                StatsError::InsufficientSamples { .. }
            ))
        ));
    }

    #[test]
    fn adjoint_identities_closed_form_case() {
        // psi = 1: identity 1 reduces to E[g(eta_k)] = alpha, exactly the
        // stationarity of the bulk marginal.
        let g = rate("min(k,3)");
        let params = ModelParams::new(&g, 0.8, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let reports =
            adjoint_identity_check(&g, &params, &LocalFn::One, 2, 1, 200_000, 3.5, &mut rng);
        assert_eq!(reports.len(), 4);
        for r in &reports {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn adjoint_identities_counting_psi() {
        let g = rate("k");
        let params = ModelParams::new(&g, 1.5, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for psi in local_fn_library(2) {
            let reports = adjoint_identity_check(&g, &params, &psi, 2, 1, 150_000, 3.5, &mut rng);
            for r in &reports {
                assert!(r.pass, "{r:?}");
            }
        }
    }

    #[test]
    fn ensemble_merge_matches_single_run() {
        let (model, params) = toy_model("min(k,3)", 0.8, 16);
        let mut spec_a = EnsembleSpec::new(5.0, vec![5.0], 300, 31);
        spec_a.blocks = 10;
        let mut spec_b = spec_a.clone();
        spec_b.seed = 32;
        let a = run_ensemble(&model, &params, &spec_a).unwrap();
        let b = run_ensemble(&model, &params, &spec_b).unwrap();
        let mut merged = a.stats.clone();
        merged.merge(&b.stats);
        assert_eq!(merged.replicas(), 600);
        let va = CheckpointSummary::variance(merged.merged(0), 1);
        assert!(va.is_finite() && va > 0.0);
    }
}
