//! Monotone coupling of two tagged zero-range systems in one dimension with
//! totally asymmetric nearest-neighbor jumps and an (ID) rate: `g`
//! nondecreasing, `g(k)/k` nonincreasing.
//!
//! The joint process keeps two absolute-coordinate systems with
//! `xi1 <= xi2` sitewise and tagged positions `x1 >= x2`: adding particles
//! can only slow the tagged particle down. System-1 moves are always paired
//! with a system-2 move from the same site; the excess rate `g(xi2) - g(xi1)`
//! moves system 2 alone. At the lower tagged particle's site the pairing
//! gives the system-2 tagged move priority on a system-1 partner, so the
//! faster system-1 crowd never moves alone and both order invariants are
//! preserved move by move. Every listed rate is checked nonnegative before
//! use; a negative rate indicates an (ID) violation or an invariant breach
//! and is a hard failure.

use crate::equilibrium::{MarginalKind, ModelParams};
use crate::estimators::MomentAccumulator;
use crate::model::RateFunction;
use crate::weights::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("the coupling requires an (ID) rate: g nondecreasing with g(k)/k nonincreasing")]
    RequiresIdRate,
    #[error("negative coupling rate {rate} at site {site} ({context})")]
    NegativeCouplingRate {
        site: usize,
        rate: f64,
        context: &'static str,
    },
    #[error("tagged positions collided around the torus (gap {gap} at side {side})")]
    TorusCollision { gap: i64, side: usize },
    #[error("coupled system is empty")]
    EmptySystem,
    #[error("initial states violate the order: {0}")]
    BadInitialOrder(&'static str),
}

/// Validated coupling model. Dynamics are fixed: d = 1, `p(1) = 1`.
#[derive(Debug, Clone)]
pub struct CoupledModel {
    pub g: RateFunction,
    pub side: usize,
}

impl CoupledModel {
    pub fn new(g: RateFunction, side: usize) -> Result<Self, CouplingError> {
        if !g.is_id {
            return Err(CouplingError::RequiresIdRate);
        }
        Ok(CoupledModel { g, side })
    }
}

/// Which particles move in one coupled event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoupledMove {
    /// System-1 mover: `None` for no move, `Some(true)` for the tagged one.
    pub system1: Option<bool>,
    /// System-2 mover, same convention.
    pub system2: Option<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct CoupledEvent {
    pub time: f64,
    pub site: usize,
    pub mv: CoupledMove,
}

/// First order-invariant violation observed, if any.
#[derive(Debug, Clone)]
pub struct Violation {
    pub time: f64,
    pub description: String,
}

/// Joint state in absolute coordinates.
#[derive(Debug, Clone)]
pub struct CoupledState {
    occ1: Vec<u32>,
    occ2: Vec<u32>,
    /// Unwrapped tagged positions; `x1 >= x2` at all times.
    pub x1: i64,
    pub x2: i64,
    pub clock: f64,
    pub events: u64,
    /// Minimum of `x1 - x2` seen after any event.
    pub min_gap: i64,
    rates: WeightedIndex,
}

impl CoupledState {
    /// Both systems start with their tagged particle at absolute site 0.
    pub fn new(
        occ1: Vec<u32>,
        occ2: Vec<u32>,
        model: &CoupledModel,
    ) -> Result<Self, CouplingError> {
        Self::with_positions(occ1, occ2, 0, 0, model)
    }

    pub fn with_positions(
        occ1: Vec<u32>,
        occ2: Vec<u32>,
        x1: i64,
        x2: i64,
        model: &CoupledModel,
    ) -> Result<Self, CouplingError> {
        assert_eq!(occ1.len(), model.side);
        assert_eq!(occ2.len(), model.side);
        if x1 < x2 {
            return Err(CouplingError::BadInitialOrder("x1 < x2"));
        }
        if occ1.iter().zip(&occ2).any(|(a, b)| a > b) {
            return Err(CouplingError::BadInitialOrder("xi1 > xi2 at some site"));
        }
        let side = model.side as i64;
        if occ1[x1.rem_euclid(side) as usize] == 0 {
            return Err(CouplingError::BadInitialOrder("tagged-1 site empty"));
        }
        if occ2[x2.rem_euclid(side) as usize] == 0 {
            return Err(CouplingError::BadInitialOrder("tagged-2 site empty"));
        }
        if occ2.iter().all(|&k| k == 0) {
            return Err(CouplingError::EmptySystem);
        }
        let weights: Vec<f64> = occ2.iter().map(|&k| model.g.value(k as u64)).collect();
        Ok(CoupledState {
            occ1,
            occ2,
            x1,
            x2,
            clock: 0.0,
            events: 0,
            min_gap: x1 - x2,
            rates: WeightedIndex::new(weights),
        })
    }

    pub fn occupancies(&self) -> (&[u32], &[u32]) {
        (&self.occ1, &self.occ2)
    }

    #[inline]
    fn site1(&self, model: &CoupledModel) -> usize {
        self.x1.rem_euclid(model.side as i64) as usize
    }

    #[inline]
    fn site2(&self, model: &CoupledModel) -> usize {
        self.x2.rem_euclid(model.side as i64) as usize
    }

    /// The coupled move table at `site`: rates sum to `g(xi2_site)`.
    ///
    /// Away from the tagged particles this is the basic coupling. At the
    /// system-1 tagged site, the tagged-1 move carries a system-2 particle.
    /// At the system-2 tagged site, the tagged-2 move (rate `g(k2)/k2`)
    /// takes a system-1 partner first, the remaining system-1 rate
    /// `g(k1) - g(k2)/k2` pairs with non-tagged system-2 moves, and the
    /// excess `g(k2) - g(k1)` moves system 2 alone. When the tagged
    /// particles share a site both tagged moves are paired at rate
    /// `g(k2)/k2`, the surplus `g(k1)/k1 - g(k2)/k2` pairs tagged-1 with a
    /// non-tagged system-2 particle, and the excess moves system 2 alone.
    pub fn site_moves(
        &self,
        site: usize,
        model: &CoupledModel,
    ) -> Result<Vec<(CoupledMove, f64)>, CouplingError> {
        let k1 = self.occ1[site] as u64;
        let k2 = self.occ2[site] as u64;
        let g = &model.g;
        let g1 = g.value(k1);
        let g2 = g.value(k2);
        let at1 = site == self.site1(model);
        let at2 = site == self.site2(model);
        let colocated = self.x1 == self.x2;
        if (at1 && at2) && !colocated {
            return Err(CouplingError::TorusCollision {
                gap: self.x1 - self.x2,
                side: model.side,
            });
        }

        let both = |t1: bool, t2: bool| CoupledMove {
            system1: Some(t1),
            system2: Some(t2),
        };
        let only2 = |t2: bool| CoupledMove {
            system1: None,
            system2: Some(t2),
        };

        let moves: Vec<(CoupledMove, f64)> = if colocated && at1 {
            // Shared tagged site.
            let esc1 = g.per_particle(k1.max(1));
            let esc2 = g.per_particle(k2.max(1));
            vec![
                (both(false, false), g1 - esc1),
                (both(true, true), esc2),
                (both(true, false), esc1 - esc2),
                (only2(false), g2 - g1),
            ]
        } else if at1 {
            // Tagged-1 site; every system-2 particle here is non-tagged.
            let esc1 = g.per_particle(k1.max(1));
            vec![
                (both(false, false), g1 - esc1),
                (both(true, false), esc1),
                (only2(false), g2 - g1),
            ]
        } else if at2 {
            // Tagged-2 site; system-1 particles here are non-tagged.
            if k1 == 0 {
                let esc2 = g.per_particle(k2.max(1));
                vec![(only2(true), esc2), (only2(false), g2 - esc2)]
            } else {
                let esc2 = g.per_particle(k2);
                vec![
                    (both(false, true), esc2),
                    (both(false, false), g1 - esc2),
                    (only2(false), g2 - g1),
                ]
            }
        } else {
            // Basic coupling away from the tagged particles.
            vec![(both(false, false), g1), (only2(false), g2 - g1)]
        };

        for (mv, rate) in &moves {
            if *rate < -1e-12 * g2.max(1.0) {
                let context = match (mv.system1, mv.system2) {
                    (Some(_), Some(_)) => "paired move",
                    (None, Some(_)) => "system-2 residual",
                    _ => "system-1 residual",
                };
                return Err(CouplingError::NegativeCouplingRate {
                    site,
                    rate: *rate,
                    context,
                });
            }
        }
        Ok(moves)
    }

    /// Draw a holding time, then draw and apply one coupled event; the
    /// order invariants are checked exactly at the touched sites.
    pub fn step<R: Rng>(
        &mut self,
        model: &CoupledModel,
        rng: &mut R,
    ) -> Result<(CoupledEvent, Option<Violation>), CouplingError> {
        let total = self.rates.total();
        if total <= 0.0 {
            return Err(CouplingError::EmptySystem);
        }
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        self.clock += -u.ln() / total;
        self.jump(model, rng)
    }

    // Apply one jump at the current clock value.
    fn jump<R: Rng>(
        &mut self,
        model: &CoupledModel,
        rng: &mut R,
    ) -> Result<(CoupledEvent, Option<Violation>), CouplingError> {
        let total = self.rates.total();
        let site = self.rates.locate(rng.random::<f64>() * total);

        let moves = self.site_moves(site, model)?;
        let local_total: f64 = moves.iter().map(|(_, r)| r.max(0.0)).sum();
        let mut pick = rng.random::<f64>() * local_total;
        let mut chosen = moves.len() - 1;
        for (i, (_, r)) in moves.iter().enumerate() {
            let r = r.max(0.0);
            if pick < r {
                chosen = i;
                break;
            }
            pick -= r;
        }
        // Never land on a zero-rate move at fp boundaries.
        if moves[chosen].1 <= 0.0 {
            chosen = moves
                .iter()
                .enumerate()
                .filter(|(_, (_, r))| *r > 0.0)
                .map(|(i, _)| i)
                .next_back()
                .unwrap_or(chosen);
        }
        let mv = moves[chosen].0;
        let target = (site + 1) % model.side;

        if let Some(tagged) = mv.system1 {
            self.occ1[site] -= 1;
            self.occ1[target] += 1;
            if tagged {
                self.x1 += 1;
            }
        }
        if let Some(tagged) = mv.system2 {
            self.occ2[site] -= 1;
            self.occ2[target] += 1;
            if tagged {
                self.x2 += 1;
            }
            self.rates.set(site, model.g.value(self.occ2[site] as u64));
            self.rates
                .set(target, model.g.value(self.occ2[target] as u64));
        }
        self.events += 1;

        let gap = self.x1 - self.x2;
        self.min_gap = self.min_gap.min(gap);
        // The regime classification breaks only when the tagged sites
        // coincide with distinct positions, i.e. at a full-period gap.
        if gap != 0 && gap.rem_euclid(model.side as i64) == 0 {
            return Err(CouplingError::TorusCollision {
                gap,
                side: model.side,
            });
        }

        // Exact order checks at the touched sites.
        let mut violation = None;
        if gap < 0 {
            violation = Some(Violation {
                time: self.clock,
                description: format!("x1 = {} fell behind x2 = {}", self.x1, self.x2),
            });
        } else if self.occ1[site] > self.occ2[site] || self.occ1[target] > self.occ2[target] {
            let bad = if self.occ1[site] > self.occ2[site] {
                site
            } else {
                target
            };
            violation = Some(Violation {
                time: self.clock,
                description: format!(
                    "xi1 = {} exceeds xi2 = {} at site {bad}",
                    self.occ1[bad], self.occ2[bad]
                ),
            });
        }

        Ok((
            CoupledEvent {
                time: self.clock,
                site,
                mv,
            },
            violation,
        ))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CoupledCheckpoint {
    pub time: f64,
    pub x1: i64,
    pub x2: i64,
}

#[derive(Debug, Clone)]
pub struct CoupledRunReport {
    pub checkpoints: Vec<CoupledCheckpoint>,
    pub events: u64,
    /// Minimum of `x1 - x2` over all events.
    pub min_gap: i64,
    /// First order violation, if one occurred (the run stops there).
    pub violation: Option<Violation>,
}

/// Run the coupled pair to the horizon, recording tagged positions at the
/// checkpoint times and asserting the order invariants after every event.
pub fn run_coupled<R: Rng>(
    mut state: CoupledState,
    model: &CoupledModel,
    horizon: f64,
    checkpoint_times: &[f64],
    rng: &mut R,
) -> Result<CoupledRunReport, CouplingError> {
    let mut checkpoints = Vec::with_capacity(checkpoint_times.len());
    let mut next_cp = 0usize;
    let mut violation = None;
    loop {
        let total = state.rates.total();
        if total <= 0.0 {
            return Err(CouplingError::EmptySystem);
        }
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let dt = -u.ln() / total;
        let t_next = state.clock + dt;
        while next_cp < checkpoint_times.len() && checkpoint_times[next_cp] <= t_next {
            checkpoints.push(CoupledCheckpoint {
                time: checkpoint_times[next_cp],
                x1: state.x1,
                x2: state.x2,
            });
            next_cp += 1;
        }
        if t_next >= horizon {
            break;
        }
        state.clock = t_next;
        let (_, v) = state.jump(model, rng)?;
        if let Some(v) = v {
            violation = Some(v);
            break;
        }
    }
    Ok(CoupledRunReport {
        checkpoints,
        events: state.events,
        min_gap: state.min_gap,
        violation,
    })
}

/// Mean-gap curve between a system started from the one-extra-particle law
/// and one started from the size-biased law, coupled so the gap is
/// nonnegative replica by replica.
#[derive(Debug, Clone)]
pub struct PrimedComparison {
    pub times: Vec<f64>,
    /// `(mean gap, jackknife SE)` of `x_primed(t) - x_palm(t)` per time.
    pub mean_gap: Vec<(f64, f64)>,
    pub violations: u64,
    pub negative_gap_replicas: u64,
    pub min_gap: i64,
}

/// Couple the origin draws by a common uniform (the one-extra-particle law
/// sits below the size-biased law for (ID) rates), keep every other site
/// identical, and track the tagged-position gap.
pub fn primed_comparison(
    model: &CoupledModel,
    params: &ModelParams,
    horizon: f64,
    times: &[f64],
    replicas: usize,
    blocks: usize,
    seed: u64,
) -> Result<PrimedComparison, CouplingError> {
    let side = model.side;
    let results: Result<Vec<_>, CouplingError> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut occ_palm = vec![0u32; side];
            for (site, slot) in occ_palm.iter_mut().enumerate().skip(1) {
                let _ = site;
                *slot = params.sample_marginal(MarginalKind::Bulk, &mut rng) as u32;
            }
            let mut occ_primed = occ_palm.clone();
            let u: f64 = rng.random();
            let k_palm = params.quantile(MarginalKind::Palm, u) as u32;
            let k_primed = params.quantile(MarginalKind::Primed, u) as u32;
            debug_assert!(k_primed <= k_palm);
            occ_palm[0] = k_palm;
            occ_primed[0] = k_primed;
            // System 1 carries fewer particles and stays ahead.
            let state = CoupledState::new(occ_primed, occ_palm, model)?;
            let report = run_coupled(state, model, horizon, times, &mut rng)?;
            let gaps: Vec<f64> = report
                .checkpoints
                .iter()
                .map(|cp| (cp.x1 - cp.x2) as f64)
                .collect();
            Ok((gaps, report.violation.is_some() as u64, report.min_gap))
        })
        .collect();
    let results = results?;

    let b = blocks.min(replicas.max(1));
    let mut acc = vec![vec![MomentAccumulator::new(1); times.len()]; b];
    let mut violations = 0u64;
    let mut negative_gap_replicas = 0u64;
    let mut min_gap = i64::MAX;
    for (r, (gaps, viol, mg)) in results.iter().enumerate() {
        violations += viol;
        min_gap = min_gap.min(*mg);
        if gaps.iter().any(|&g| g < 0.0) {
            negative_gap_replicas += 1;
        }
        for (t, &gap) in gaps.iter().enumerate() {
            acc[r % b][t].push(&[gap]);
        }
    }

    let mean_gap = (0..times.len())
        .map(|t| {
            let mut all = MomentAccumulator::new(1);
            for blk in &acc {
                all.merge(&blk[t]);
            }
            let est = all.mean(0);
            let loo: Vec<f64> = (0..b)
                .map(|skip| {
                    let mut m = MomentAccumulator::new(1);
                    for (i, blk) in acc.iter().enumerate() {
                        if i != skip {
                            m.merge(&blk[t]);
                        }
                    }
                    m.mean(0)
                })
                .collect();
            let mean = loo.iter().sum::<f64>() / b as f64;
            let var = loo.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * (b as f64 - 1.0)
                / b as f64;
            (est, var.sqrt())
        })
        .collect();

    Ok(PrimedComparison {
        times: times.to_vec(),
        mean_gap,
        violations,
        negative_gap_replicas,
        min_gap: if min_gap == i64::MAX { 0 } else { min_gap },
    })
}
