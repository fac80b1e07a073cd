//! Event-driven simulation of the environment seen from the tagged particle.
//!
//! The engine keeps occupancies in absolute torus coordinates together with
//! the tagged particle's (unwrapped) position, so a tagged jump is an O(1)
//! particle move plus a retag instead of an O(L) frame rotation. All
//! reference-frame observables are recovered through the tagged offset.
//!
//! Exact accounting: the per-particle escape rate at the tagged site is
//! piecewise constant between events, so its time integral (which drives
//! every compensator) is accumulated without quadrature error, including at
//! checkpoint times interior to a holding interval.

use crate::equilibrium::ModelParams;
use crate::model::{Configuration, JumpKernel, RateFunction, Torus};
use crate::weights::WeightedIndex;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot simulate an empty system")]
    EmptySystem,
    #[error("event budget of {0} exceeded before reaching the horizon")]
    EventBudgetExceeded(u64),
    #[error("occupancy overflow at site {0}")]
    OccupancyOverflow(usize),
}

/// How the drift observable is assembled from the escape-rate integral.
///
/// `PerOffset` multiplies the centered per-particle escape rate by the drift
/// vector, which makes the compensated position an exact martingale. The
/// `Literal` variant subtracts the density ratio after multiplying by the
/// drift, and is kept only as a comparison switch; its mean does not vanish
/// unless the drift is 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriftFormula {
    #[default]
    PerOffset,
    Literal,
}

/// Immutable per-model data shared by every replica.
#[derive(Debug, Clone)]
pub struct SimModel {
    pub g: RateFunction,
    pub kernel: JumpKernel,
    pub torus: Torus,
    pub alpha: f64,
    pub rho: f64,
    pub drift_formula: DriftFormula,
    /// Cumulative offset probabilities for event-local offset draws.
    offset_cdf: Vec<f64>,
    /// neighbor_table[e * num_sites + site] = site displaced by entry e.
    neighbor_table: Vec<u32>,
    pub event_budget: u64,
    pub rebuild_every: u64,
}

impl SimModel {
    pub fn new(g: RateFunction, kernel: JumpKernel, torus: Torus, params: &ModelParams) -> Self {
        let num_sites = torus.num_sites();
        let mut offset_cdf = Vec::with_capacity(kernel.entries.len());
        let mut acc = 0.0;
        for (_, p) in &kernel.entries {
            acc += p;
            offset_cdf.push(acc);
        }
        if let Some(last) = offset_cdf.last_mut() {
            *last = 1.0;
        }
        let mut neighbor_table = vec![0u32; kernel.entries.len() * num_sites];
        for (e, (offset, _)) in kernel.entries.iter().enumerate() {
            for site in 0..num_sites {
                neighbor_table[e * num_sites + site] = torus.neighbor(site, offset) as u32;
            }
        }
        SimModel {
            g,
            kernel,
            torus,
            alpha: params.alpha,
            rho: params.rho,
            drift_formula: DriftFormula::PerOffset,
            offset_cdf,
            neighbor_table,
            event_budget: 1_000_000_000,
            rebuild_every: 1 << 20,
        }
    }

    /// Equilibrium mean displacement per unit time, `(alpha/rho) * drift`.
    pub fn mean_velocity(&self) -> Vec<f64> {
        self.kernel
            .drift
            .iter()
            .map(|d| d * self.alpha / self.rho)
            .collect()
    }

    /// `sum_j |j|^2 p(j)`, the martingale variance rate per unit escape.
    pub fn second_moment_trace(&self) -> f64 {
        (0..self.kernel.dim)
            .map(|c| self.kernel.second_moment[c * self.kernel.dim + c])
            .sum()
    }

    /// True when the per-particle escape rate `g(k)/k` is constant over the
    /// probed range, which forces the compensator to vanish identically.
    pub fn compensator_vanishes(&self) -> bool {
        let base = self.g.value(1);
        (1..=self.g.probe_max).all(|k| (self.g.per_particle(k) - base).abs() <= 1e-12 * base)
    }

    #[inline]
    fn draw_offset<R: Rng>(&self, rng: &mut R) -> usize {
        if self.offset_cdf.len() == 1 {
            return 0;
        }
        let u: f64 = rng.random();
        self.offset_cdf
            .partition_point(|&c| c <= u)
            .min(self.offset_cdf.len() - 1)
    }

    #[inline]
    fn neighbor(&self, entry: usize, site: usize) -> usize {
        self.neighbor_table[entry * self.torus.num_sites() + site] as usize
    }
}

/// One event drawn by the competing-clock scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    /// Absolute source site.
    pub site: usize,
    /// Index into the kernel's entry list.
    pub offset_entry: usize,
    pub tagged: bool,
}

/// Mutable per-replica simulation state.
#[derive(Debug, Clone)]
pub struct SimState {
    occ: Vec<u32>,
    rates: WeightedIndex,
    tagged_site: usize,
    /// Unwrapped tagged displacement since time zero.
    tagged_pos: Vec<i64>,
    pub clock: f64,
    /// Exact integral of g(eta_0)/eta_0 along the trajectory.
    pub escape_integral: f64,
    /// Shift counts per kernel entry.
    pub shift_counts: Vec<u64>,
    pub events: u64,
}

impl SimState {
    /// Start from a reference-frame configuration (tagged at the origin).
    pub fn new(initial: &Configuration, model: &SimModel) -> Result<Self, SimError> {
        if initial.total_particles() == 0 {
            return Err(SimError::EmptySystem);
        }
        assert!(
            initial.occupancy(0) >= 1,
            "reference-frame initial state must occupy the origin"
        );
        let occ: Vec<u32> = initial.occupancies().to_vec();
        let weights: Vec<f64> = occ.iter().map(|&k| model.g.value(k as u64)).collect();
        Ok(SimState {
            occ,
            rates: WeightedIndex::new(weights),
            tagged_site: 0,
            tagged_pos: vec![0; model.torus.dim],
            clock: 0.0,
            escape_integral: 0.0,
            shift_counts: vec![0; model.kernel.entries.len()],
            events: 0,
        })
    }

    #[inline]
    pub fn total_rate(&self) -> f64 {
        self.rates.total()
    }

    pub fn tagged_position(&self) -> &[i64] {
        &self.tagged_pos
    }

    /// Current per-particle escape rate at the tagged site.
    #[inline]
    pub fn tagged_escape_rate(&self, model: &SimModel) -> f64 {
        model.g.per_particle(self.occ[self.tagged_site] as u64)
    }

    /// Occupancy at reference-frame site (relative offset from the tagged
    /// particle).
    pub fn frame_occupancy(&self, model: &SimModel, frame_site: &[i64]) -> u32 {
        let mut coords = model.torus.coords(self.tagged_site);
        for (c, o) in coords.iter_mut().zip(frame_site) {
            *c += o;
        }
        self.occ[model.torus.index(&coords)]
    }

    /// Reference-frame view of the full configuration.
    pub fn frame_configuration(&self, model: &SimModel) -> Configuration {
        let torus = model.torus;
        let n = torus.num_sites();
        let mut occ = vec![0u32; n];
        let tagged_coords = torus.coords(self.tagged_site);
        for (idx, slot) in occ.iter_mut().enumerate() {
            let mut coords = torus.coords(idx);
            for (c, t) in coords.iter_mut().zip(&tagged_coords) {
                *c += t;
            }
            *slot = self.occ[torus.index(&coords)];
        }
        Configuration::new(torus, occ)
    }

    /// Draw and apply one event. The escape-rate integral is advanced over
    /// the holding interval before the jump is applied.
    pub fn step<R: Rng>(&mut self, model: &SimModel, rng: &mut R) -> Result<Event, SimError> {
        let total = self.total_rate();
        if total <= 0.0 {
            return Err(SimError::EmptySystem);
        }
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let dt = -u.ln() / total;
        self.escape_integral += dt * self.tagged_escape_rate(model);
        self.clock += dt;
        let event = self.draw_jump(model, rng)?;
        Ok(Event {
            time: self.clock,
            ..event
        })
    }

    // Select the site, the mover (tagged or not), and the offset; apply the
    // move. Does not advance the clock or the integrals.
    fn draw_jump<R: Rng>(&mut self, model: &SimModel, rng: &mut R) -> Result<Event, SimError> {
        let total = self.rates.total();
        let site = self.rates.locate(rng.random::<f64>() * total);
        let entry = model.draw_offset(rng);
        let target = model.neighbor(entry, site);

        let mut tagged = false;
        if site == self.tagged_site {
            let k = self.occ[site];
            // The mover at the tagged site is the tagged particle with
            // probability 1/eta_0.
            tagged = k == 1 || rng.random::<f64>() * k as f64 <= 1.0;
        }

        self.occ[site] -= 1;
        self.occ[target] = self.occ[target]
            .checked_add(1)
            .ok_or(SimError::OccupancyOverflow(target))?;
        self.rates.set(site, model.g.value(self.occ[site] as u64));
        self.rates
            .set(target, model.g.value(self.occ[target] as u64));

        if tagged {
            self.tagged_site = target;
            for (x, o) in self
                .tagged_pos
                .iter_mut()
                .zip(&model.kernel.entries[entry].0)
            {
                *x += o;
            }
            self.shift_counts[entry] += 1;
        }

        self.events += 1;
        if self.events.is_multiple_of(model.rebuild_every) {
            let before = self.rates.total();
            let after = self.rates.rebuild();
            debug_assert!(
                (before - after).abs() <= 1e-9 * after.max(1.0),
                "rate index drift: {before} vs {after}"
            );
        }

        Ok(Event {
            time: self.clock,
            site,
            offset_entry: entry,
            tagged,
        })
    }
}

/// Observables frozen at one checkpoint time.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub time: f64,
    /// Tagged displacement `x(t) = sum_j j N_j(t)`.
    pub position: Vec<i64>,
    /// Integral of the per-particle escape rate up to `time` (exact).
    pub escape_integral: f64,
    /// Shift counts per kernel entry at `time`.
    pub shift_counts: Vec<u64>,
}

/// Event log summary for one replica.
#[derive(Debug, Clone)]
pub struct TaggedTrajectory {
    pub checkpoints: Vec<Checkpoint>,
    /// Reference-frame configuration at the end of the run.
    pub final_frame: Configuration,
    pub events: u64,
}

impl TaggedTrajectory {
    /// Compensator `A(t)` at checkpoint `i` under the model's formula.
    pub fn compensator(&self, model: &SimModel, i: usize) -> Vec<f64> {
        let cp = &self.checkpoints[i];
        compensator_at(model, cp.time, cp.escape_integral)
    }

    /// Martingale part `M(t) = x(t) - E[x(t)] - A(t)` at checkpoint `i`.
    pub fn martingale(&self, model: &SimModel, i: usize) -> Vec<f64> {
        let cp = &self.checkpoints[i];
        let mean = model.mean_velocity();
        let a = self.compensator(model, i);
        cp.position
            .iter()
            .zip(mean.iter().zip(&a))
            .map(|(&x, (m, a))| x as f64 - m * cp.time - a)
            .collect()
    }
}

/// Compensator value from the exact escape-rate integral.
pub fn compensator_at(model: &SimModel, time: f64, escape_integral: f64) -> Vec<f64> {
    let ratio = model.alpha / model.rho;
    match model.drift_formula {
        DriftFormula::PerOffset => model
            .kernel
            .drift
            .iter()
            .map(|d| d * (escape_integral - ratio * time))
            .collect(),
        DriftFormula::Literal => model
            .kernel
            .drift
            .iter()
            .map(|d| d * escape_integral - ratio * time)
            .collect(),
    }
}

/// Run to horizon `T`, recording observables at each checkpoint time.
///
/// Checkpoints must be sorted and lie in `[0, T]`. The run is deterministic
/// given the initial configuration and the RNG state.
pub fn run<R: Rng>(
    initial: &Configuration,
    model: &SimModel,
    horizon: f64,
    checkpoint_times: &[f64],
    rng: &mut R,
) -> Result<TaggedTrajectory, SimError> {
    debug_assert!(checkpoint_times.windows(2).all(|w| w[0] <= w[1]));
    debug_assert!(checkpoint_times
        .iter()
        .all(|&t| (0.0..=horizon).contains(&t)));
    let mut state = SimState::new(initial, model)?;
    let mut checkpoints = Vec::with_capacity(checkpoint_times.len());
    let mut next_cp = 0usize;

    loop {
        let total = state.total_rate();
        if total <= 0.0 {
            return Err(SimError::EmptySystem);
        }
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let dt = -u.ln() / total;
        let t_next = state.clock + dt;
        let escape_rate = state.tagged_escape_rate(model);

        // Record any checkpoints interior to this holding interval; the
        // integrand is constant on it, so the advance is exact.
        while next_cp < checkpoint_times.len() && checkpoint_times[next_cp] <= t_next {
            let t_cp = checkpoint_times[next_cp];
            checkpoints.push(Checkpoint {
                time: t_cp,
                position: state.tagged_pos.clone(),
                escape_integral: state.escape_integral + (t_cp - state.clock) * escape_rate,
                shift_counts: state.shift_counts.clone(),
            });
            next_cp += 1;
        }

        if t_next >= horizon {
            // Advance exactly to the horizon and stop without applying the
            // pending jump (it happens after T).
            state.escape_integral += (horizon - state.clock) * escape_rate;
            state.clock = horizon;
            break;
        }

        state.escape_integral += dt * escape_rate;
        state.clock = t_next;
        state.draw_jump(model, rng)?;
        if state.events >= model.event_budget {
            return Err(SimError::EventBudgetExceeded(model.event_budget));
        }
    }

    Ok(TaggedTrajectory {
        checkpoints,
        final_frame: state.frame_configuration(model),
        events: state.events,
    })
}
