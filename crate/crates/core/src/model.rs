//! Domain types for rates, kernels, lattices, and occupancy configurations.
//!
//! Everything here is validated once and immutable afterwards, except
//! [`Configuration`], which is a single-writer value type.

use crate::rate_expr::{EvalError, RateExpr};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("rate must vanish at k = 0 (found {0})")]
    NonzeroAtZero(f64),
    #[error("rate is zero at k = {0} >= 1")]
    ZeroAtPositive(u64),
    #[error("negative rate at k = {k}: {value}")]
    NegativeRate { k: u64, value: f64 },
    #[error("rate evaluation failed: {0}")]
    RateEval(#[from] EvalError),
    #[error("probe_max must be at least 8 (got {0})")]
    ProbeTooSmall(u64),
    #[error("kernel probabilities sum to {0}, expected 1 within 1e-12")]
    NotNormalized(f64),
    #[error("kernel puts mass {0} on the zero offset")]
    ZeroOffsetMass(f64),
    #[error("kernel probability for offset {offset:?} is negative: {p}")]
    NegativeProbability { offset: Vec<i64>, p: f64 },
    #[error("symmetrized kernel support does not generate the full lattice")]
    ReducibleSymmetrization,
    #[error("kernel offset {offset:?} has dimension {got}, expected {expected}")]
    OffsetDimension {
        offset: Vec<i64>,
        got: usize,
        expected: usize,
    },
    #[error("kernel is empty")]
    EmptyKernel,
    #[error("kernel line {line}: {message}")]
    KernelText { line: usize, message: String },
    #[error("torus side {side} must exceed twice the kernel range {range}")]
    SideTooSmall { side: usize, range: i64 },
    #[error("site {0} is empty; cannot move a particle out of it")]
    EmptySource(usize),
    #[error("occupancy overflow at site {0}")]
    OccupancyOverflow(usize),
}

/// Rate spec: either an expression in the DSL or an explicit table.
///
/// Tabulated rates extend beyond their last entry by repeating it.
#[derive(Debug, Clone)]
pub enum RateSpec {
    Expr(RateExpr),
    Table(Vec<f64>),
}

impl RateSpec {
    fn eval(&self, k: u64) -> Result<f64, ModelError> {
        match self {
            RateSpec::Expr(e) => Ok(e.eval(k)?),
            RateSpec::Table(t) => {
                let idx = (k as usize).min(t.len() - 1);
                Ok(t[idx])
            }
        }
    }
}

/// Validated occupancy rate `g(k)` with structural metadata.
#[derive(Debug, Clone)]
pub struct RateFunction {
    spec: RateSpec,
    /// Cached values for k = 0..=probe_max.
    table: Vec<f64>,
    pub lipschitz_bound: f64,
    /// Minimum of `g` over the probe tail `[probe_max/2, probe_max]`.
    pub liminf_estimate: f64,
    /// `g` nondecreasing and `g(k)/k` nonincreasing over the probe range.
    pub is_id: bool,
    /// `(a, b)` with `g(k+a) - g(k) >= b > 0` across the probe range, if any.
    pub gap_class: Option<(u64, f64)>,
    pub probe_max: u64,
}

/// Probe the rate spec on `0..=probe_max`, reject structural violations,
/// and freeze the validated table.
pub fn validate_rate(spec: RateSpec, probe_max: u64) -> Result<RateFunction, ModelError> {
    if probe_max < 8 {
        return Err(ModelError::ProbeTooSmall(probe_max));
    }
    let mut table = Vec::with_capacity(probe_max as usize + 1);
    for k in 0..=probe_max {
        let v = spec.eval(k)?;
        if !v.is_finite() || v < 0.0 {
            return Err(ModelError::NegativeRate { k, value: v });
        }
        table.push(v);
    }
    if table[0] != 0.0 {
        return Err(ModelError::NonzeroAtZero(table[0]));
    }
    for k in 1..=probe_max {
        if table[k as usize] == 0.0 {
            return Err(ModelError::ZeroAtPositive(k));
        }
    }

    let lipschitz_bound = table
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max);
    let tail_start = (probe_max / 2) as usize;
    let liminf_estimate = table[tail_start..]
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);

    let nondecreasing = table.windows(2).all(|w| w[1] >= w[0]);
    let ratio_nonincreasing = (1..probe_max).all(|k| {
        let a = table[k as usize] / k as f64;
        let b = table[k as usize + 1] / (k + 1) as f64;
        b <= a + 1e-12 * a.abs()
    });
    let is_id = nondecreasing && ratio_nonincreasing;

    let mut gap_class = None;
    for a in 1..=4u64 {
        if a >= probe_max {
            break;
        }
        let b = (0..=probe_max - a)
            .map(|k| table[(k + a) as usize] - table[k as usize])
            .fold(f64::INFINITY, f64::min);
        if b > 0.0 {
            gap_class = Some((a, b));
            break;
        }
    }

    Ok(RateFunction {
        spec,
        table,
        lipschitz_bound,
        liminf_estimate,
        is_id,
        gap_class,
        probe_max,
    })
}

impl RateFunction {
    /// `g(k)`; table lookup on the probed range, spec evaluation beyond it.
    #[inline]
    pub fn value(&self, k: u64) -> f64 {
        if let Some(v) = self.table.get(k as usize) {
            *v
        } else {
            self.value_cold(k)
        }
    }

    #[cold]
    fn value_cold(&self, k: u64) -> f64 {
        match self.spec.eval(k) {
            Ok(v) if v.is_finite() && v >= 0.0 => v,
            other => panic!("rate invalid beyond probe range at k = {k}: {other:?}"),
        }
    }

    /// `g(k)/k` for `k >= 1`, the per-particle escape rate.
    #[inline]
    pub fn per_particle(&self, k: u64) -> f64 {
        debug_assert!(k >= 1);
        self.value(k) / k as f64
    }

}

/// Finite-range jump distribution on lattice offsets.
#[derive(Debug, Clone)]
pub struct JumpKernel {
    pub dim: usize,
    /// `(offset, probability)` sorted lexicographically by offset.
    pub entries: Vec<(Vec<i64>, f64)>,
    /// Smallest `R` with `p(j) = 0` whenever `max_c |j_c| >= R`.
    pub range: i64,
    /// Mean displacement `sum_j j p(j)`.
    pub drift: Vec<f64>,
    /// `sum_j j_a j_b p(j)`, row-major `dim x dim`.
    pub second_moment: Vec<f64>,
}

/// Validate offsets and probabilities, compute moments, and check that the
/// symmetrization generates the full lattice.
pub fn validate_kernel(
    entries: Vec<(Vec<i64>, f64)>,
    dim: usize,
) -> Result<JumpKernel, ModelError> {
    if entries.is_empty() {
        return Err(ModelError::EmptyKernel);
    }
    for (offset, p) in &entries {
        if offset.len() != dim {
            return Err(ModelError::OffsetDimension {
                offset: offset.clone(),
                got: offset.len(),
                expected: dim,
            });
        }
        if *p < 0.0 || !p.is_finite() {
            return Err(ModelError::NegativeProbability {
                offset: offset.clone(),
                p: *p,
            });
        }
        if offset.iter().all(|&c| c == 0) && *p > 0.0 {
            return Err(ModelError::ZeroOffsetMass(*p));
        }
    }
    let total: f64 = entries.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(ModelError::NotNormalized(total));
    }

    let mut entries: Vec<(Vec<i64>, f64)> = entries.into_iter().filter(|(_, p)| *p > 0.0).collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let range = entries
        .iter()
        .flat_map(|(j, _)| j.iter().map(|c| c.abs()))
        .max()
        .unwrap_or(0)
        + 1;

    let mut drift = vec![0.0; dim];
    let mut second_moment = vec![0.0; dim * dim];
    for (j, p) in &entries {
        for a in 0..dim {
            drift[a] += j[a] as f64 * p;
            for b in 0..dim {
                second_moment[a * dim + b] += (j[a] * j[b]) as f64 * p;
            }
        }
    }

    // Symmetrization support: s(j) = (p(j) + p(-j))/2 > 0 iff p(j) > 0 or
    // p(-j) > 0, so the support of s is the support of p closed under
    // negation; the span test only needs the positive-p offsets.
    let support: Vec<&[i64]> = entries.iter().map(|(j, _)| j.as_slice()).collect();
    if !spans_lattice(&support, dim) {
        return Err(ModelError::ReducibleSymmetrization);
    }

    Ok(JumpKernel {
        dim,
        entries,
        range,
        drift,
        second_moment,
    })
}

// Do the vectors (together with their negations) generate Z^dim as a group?
// Reduce the stacked vectors to a triangular integer basis by a Hermite-style
// elimination and test |det| == 1.
fn spans_lattice(vectors: &[&[i64]], dim: usize) -> bool {
    let mut rows: Vec<Vec<i64>> = vectors.iter().map(|v| v.to_vec()).collect();
    let mut det: i64 = 1;
    for col in 0..dim {
        loop {
            let mut pivot: Option<usize> = None;
            for (r, row) in rows.iter().enumerate() {
                if row[col] != 0
                    && (pivot.is_none() || row[col].abs() < rows[pivot.unwrap()][col].abs())
                {
                    pivot = Some(r);
                }
            }
            let Some(p) = pivot else { return false };
            let pivot_val = rows[p][col];
            let mut finished = true;
            let pivot_row = rows[p].clone();
            for (r, row) in rows.iter_mut().enumerate() {
                if r == p || row[col] == 0 {
                    continue;
                }
                let q = row[col].div_euclid(pivot_val);
                for c in 0..dim {
                    row[c] -= q * pivot_row[c];
                }
                if row[col] != 0 {
                    finished = false;
                }
            }
            if finished {
                det = det.saturating_mul(pivot_val);
                rows.swap_remove(p);
                break;
            }
        }
    }
    det.abs() == 1
}

/// Parse the kernel table text format: one `offset probability` pair per
/// line, offsets comma-separated for dim > 1; `#` starts a comment.
pub fn parse_kernel_text(text: &str, dim: usize) -> Result<Vec<(Vec<i64>, f64)>, ModelError> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ModelError::KernelText {
            line: idx + 1,
            message,
        };
        let mut parts = line.split_whitespace();
        let offset_text = parts.next().ok_or_else(|| err("missing offset".into()))?;
        let prob_text = parts
            .next()
            .ok_or_else(|| err("missing probability".into()))?;
        if parts.next().is_some() {
            return Err(err("expected exactly `offset probability`".into()));
        }
        let offset: Vec<i64> = offset_text
            .split(',')
            .map(|c| c.trim().parse::<i64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(format!("bad offset `{offset_text}`: {e}")))?;
        if offset.len() != dim {
            return Err(err(format!(
                "offset `{offset_text}` has {} coordinates, expected {dim}",
                offset.len()
            )));
        }
        let p: f64 = prob_text
            .parse()
            .map_err(|e| err(format!("bad probability `{prob_text}`: {e}")))?;
        entries.push((offset, p));
    }
    if entries.is_empty() {
        return Err(ModelError::EmptyKernel);
    }
    Ok(entries)
}

/// Periodic lattice `(Z/LZ)^d` with row-major site indexing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Torus {
    pub dim: usize,
    pub side: usize,
}

impl Torus {
    pub fn new(dim: usize, side: usize, kernel_range: i64) -> Result<Self, ModelError> {
        if side as i64 <= 2 * kernel_range {
            return Err(ModelError::SideTooSmall {
                side,
                range: kernel_range,
            });
        }
        Ok(Torus { dim, side })
    }

    /// Unchecked constructor for contexts without a kernel.
    pub fn unchecked(dim: usize, side: usize) -> Self {
        Torus { dim, side }
    }

    pub fn num_sites(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    /// Site index of coordinates (each taken mod side).
    pub fn index(&self, coords: &[i64]) -> usize {
        let mut idx = 0usize;
        for &c in coords {
            let wrapped = c.rem_euclid(self.side as i64) as usize;
            idx = idx * self.side + wrapped;
        }
        idx
    }

    pub fn coords(&self, mut idx: usize) -> Vec<i64> {
        let mut out = vec![0i64; self.dim];
        for c in (0..self.dim).rev() {
            out[c] = (idx % self.side) as i64;
            idx /= self.side;
        }
        out
    }

    /// Site reached from `idx` by displacement `offset` with periodic wrap.
    pub fn neighbor(&self, idx: usize, offset: &[i64]) -> usize {
        let mut coords = self.coords(idx);
        for (c, &o) in coords.iter_mut().zip(offset) {
            *c += o;
        }
        self.index(&coords)
    }
}

/// Occupancy counts on a torus. In reference-frame mode the tagged particle
/// occupies the origin, so `occupancy(0) >= 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    pub torus: Torus,
    occ: Vec<u32>,
    total: u64,
}

impl Configuration {
    pub fn new(torus: Torus, occ: Vec<u32>) -> Self {
        assert_eq!(occ.len(), torus.num_sites());
        let total = occ.iter().map(|&n| n as u64).sum();
        Configuration { torus, occ, total }
    }

    pub fn empty(torus: Torus) -> Self {
        let occ = vec![0; torus.num_sites()];
        Configuration {
            torus,
            occ,
            total: 0,
        }
    }

    #[inline]
    pub fn occupancy(&self, site: usize) -> u32 {
        self.occ[site]
    }

    pub fn occupancies(&self) -> &[u32] {
        &self.occ
    }

    pub fn total_particles(&self) -> u64 {
        self.total
    }

    pub fn add_particle(&mut self, site: usize) -> Result<(), ModelError> {
        self.occ[site] = self.occ[site]
            .checked_add(1)
            .ok_or(ModelError::OccupancyOverflow(site))?;
        self.total += 1;
        Ok(())
    }

    /// Move one particle from site `i` by lattice offset `j` (periodic wrap).
    pub fn move_particle(&mut self, i: usize, j: &[i64]) -> Result<usize, ModelError> {
        if self.occ[i] == 0 {
            return Err(ModelError::EmptySource(i));
        }
        let target = self.torus.neighbor(i, j);
        self.occ[i] -= 1;
        self.occ[target] = self.occ[target]
            .checked_add(1)
            .ok_or(ModelError::OccupancyOverflow(target))?;
        Ok(target)
    }

    /// Relabel sites so that `new[k] = old[k + j]`.
    pub fn shift_frame(&mut self, j: &[i64]) {
        let torus = self.torus;
        let mut shifted = vec![0u32; self.occ.len()];
        for (idx, slot) in shifted.iter_mut().enumerate() {
            *slot = self.occ[torus.neighbor(idx, j)];
        }
        self.occ = shifted;
    }

    /// Tagged move by `j`: move a particle from the origin by `j`, then
    /// recentre the frame on it. Leaves `occupancy(0) >= 1`.
    pub fn tagged_move(&mut self, j: &[i64]) -> Result<(), ModelError> {
        self.move_particle(0, j)?;
        self.shift_frame(j);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate_expr::RateExpr;

    fn rate(text: &str, probe: u64) -> Result<RateFunction, ModelError> {
        validate_rate(RateSpec::Expr(RateExpr::parse(text).unwrap()), probe)
    }

    #[test]
    fn identity_rate_classified() {
        let g = rate("k", 64).unwrap();
        assert_eq!(g.lipschitz_bound, 1.0);
        assert!(g.is_id);
        assert_eq!(g.gap_class, Some((1, 1.0)));
        assert_eq!(g.liminf_estimate, 32.0);
    }

    #[test]
    fn constant_rate_classified() {
        let g = rate("ind(k>=1)", 64).unwrap();
        assert_eq!(g.lipschitz_bound, 1.0);
        assert!(g.is_id);
        assert_eq!(g.gap_class, None);
        assert_eq!(g.liminf_estimate, 1.0);
    }

    #[test]
    fn capped_rate_is_id() {
        // Direct enumeration over k = 1..64: min(k,3) nondecreasing and
        // min(k,3)/k nonincreasing.
        let g = rate("min(k,3)", 64).unwrap();
        assert!(g.is_id);
        assert_eq!(g.gap_class, None);
        for k in 1..64 {
            let a = g.value(k).min(3.0);
            assert!(g.value(k + 1) >= g.value(k));
            assert!(g.value(k + 1) / (k + 1) as f64 <= a / k as f64 + 1e-15);
        }
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(matches!(rate("k+1", 8), Err(ModelError::NonzeroAtZero(_))));
        assert!(matches!(
            rate("ind(k>=2)", 8),
            Err(ModelError::ZeroAtPositive(1))
        ));
        assert!(matches!(rate("0-k", 8), Err(ModelError::RateEval(_))));
        assert!(matches!(rate("k", 4), Err(ModelError::ProbeTooSmall(4))));
    }

    #[test]
    fn table_rate_extends_by_last_value() {
        let g = validate_rate(RateSpec::Table(vec![0.0, 1.0, 2.0]), 8).unwrap();
        assert_eq!(g.value(2), 2.0);
        assert_eq!(g.value(100), 2.0);
    }

    #[test]
    fn totally_asymmetric_kernel() {
        let k = validate_kernel(vec![(vec![1], 1.0)], 1).unwrap();
        assert_eq!(k.drift, vec![1.0]);
        assert_eq!(k.range, 2);
        assert_eq!(k.second_moment, vec![1.0]);
    }

    #[test]
    fn symmetric_walk_kernel() {
        let k = validate_kernel(vec![(vec![1], 0.5), (vec![-1], 0.5)], 1).unwrap();
        assert_eq!(k.drift, vec![0.0]);
        assert_eq!(k.second_moment, vec![1.0]);
    }

    #[test]
    fn even_sublattice_rejected() {
        assert!(matches!(
            validate_kernel(vec![(vec![2], 1.0)], 1),
            Err(ModelError::ReducibleSymmetrization)
        ));
    }

    #[test]
    fn kernel_validation_errors() {
        assert!(matches!(
            validate_kernel(vec![(vec![1], 0.5)], 1),
            Err(ModelError::NotNormalized(_))
        ));
        assert!(matches!(
            validate_kernel(vec![(vec![0], 0.5), (vec![1], 0.5)], 1),
            Err(ModelError::ZeroOffsetMass(_))
        ));
    }

    #[test]
    fn two_dimensional_span() {
        // Nearest-neighbor 2d walk spans the lattice.
        let k = validate_kernel(
            vec![
                (vec![1, 0], 0.25),
                (vec![-1, 0], 0.25),
                (vec![0, 1], 0.25),
                (vec![0, -1], 0.25),
            ],
            2,
        )
        .unwrap();
        assert_eq!(k.range, 2);
        // Diagonal-only moves generate the even sublattice: reducible.
        assert!(matches!(
            validate_kernel(vec![(vec![1, 1], 0.5), (vec![1, -1], 0.5)], 2),
            Err(ModelError::ReducibleSymmetrization)
        ));
    }

    #[test]
    fn kernel_text_roundtrip() {
        let entries = parse_kernel_text("1 0.75\n-1 0.25 # back-step\n", 1).unwrap();
        assert_eq!(entries, vec![(vec![1], 0.75), (vec![-1], 0.25)]);
        let entries2 = parse_kernel_text("0,1 0.5\n1,0 0.5\n", 2).unwrap();
        assert_eq!(entries2.len(), 2);
        assert!(matches!(
            parse_kernel_text("1 0.5 extra\n", 1),
            Err(ModelError::KernelText { line: 1, .. })
        ));
    }

    #[test]
    fn move_particle_examples() {
        let torus = Torus::unchecked(1, 3);
        let mut eta = Configuration::new(torus, vec![2, 0, 1]);
        eta.move_particle(0, &[1]).unwrap();
        assert_eq!(eta.occupancies(), &[1, 1, 1]);
        assert_eq!(eta.total_particles(), 3);
    }

    #[test]
    fn move_particle_wraps() {
        let torus = Torus::unchecked(1, 2);
        let mut eta = Configuration::new(torus, vec![1, 1]);
        eta.move_particle(1, &[1]).unwrap();
        assert_eq!(eta.occupancies(), &[2, 0]);
    }

    #[test]
    fn move_from_empty_site_fails() {
        let torus = Torus::unchecked(1, 2);
        let mut eta = Configuration::new(torus, vec![0, 3]);
        assert!(matches!(
            eta.move_particle(0, &[1]),
            Err(ModelError::EmptySource(0))
        ));
    }

    #[test]
    fn shift_frame_examples() {
        let torus = Torus::unchecked(1, 3);
        let mut eta = Configuration::new(torus, vec![1, 2, 0]);
        eta.shift_frame(&[1]);
        assert_eq!(eta.occupancies(), &[2, 0, 1]);
    }

    #[test]
    fn lone_tagged_particle_frame_invariant() {
        let torus = Torus::unchecked(1, 2);
        let mut eta = Configuration::new(torus, vec![1, 0]);
        eta.tagged_move(&[1]).unwrap();
        assert_eq!(eta.occupancies(), &[1, 0]);
    }

    #[test]
    fn tagged_move_delta_algebra() {
        // tau_1(eta^{0,1}) with eta = (2,5,0) -> (6,0,1).
        let torus = Torus::unchecked(1, 3);
        let mut eta = Configuration::new(torus, vec![2, 5, 0]);
        eta.tagged_move(&[1]).unwrap();
        assert_eq!(eta.occupancies(), &[6, 0, 1]);
        assert_eq!(eta.total_particles(), 7);
    }
}
