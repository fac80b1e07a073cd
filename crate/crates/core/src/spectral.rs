//! Exact finite-state spectral machinery on one-dimensional site segments
//! and tori: canonical fixed-particle state spaces, the symmetric zero-range
//! generator with its stationary weights, spectral gaps (dense below a size
//! threshold, restarted Lanczos above), resolvent quadratic forms, the
//! non-reversible tagged-frame generator with its size-biased stationary
//! vector, and exact additive-functional variances.

use crate::equilibrium::{MarginalKind, ModelParams};
use crate::model::{JumpKernel, RateFunction};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("state space has {states} states, above the cap {cap}")]
    StateSpaceTooLarge { states: u64, cap: u64 },
    #[error("gap undefined: the space has {0} state(s)")]
    GapUndefined(u64),
    #[error("eigensolver failed to converge within {iters} iterations (residual {residual})")]
    ConvergenceFailure { iters: usize, residual: f64 },
    #[error("linear solve failed to converge (residual {0})")]
    SolveFailure(f64),
    #[error("spectral tools require a one-dimensional kernel (got dim {0})")]
    NotOneDimensional(usize),
    #[error("function must be centered (mean {0} under the stationary weights)")]
    NotCentered(f64),
}

/// All occupancy vectors on `n_sites` sites holding exactly `particles`
/// particles, with an exact rank/unrank bijection (lexicographic order).
#[derive(Debug, Clone)]
pub struct CanonicalSpace {
    pub n_sites: usize,
    pub particles: u64,
    states: Vec<Vec<u32>>,
    /// compositions(m, parts) = C(m + parts - 1, parts - 1), saturating.
    comp: Vec<Vec<u64>>,
}

/// Number of occupancy vectors of `parts` sites summing to `m` (saturating).
fn composition_counts(max_m: u64, max_parts: usize) -> Vec<Vec<u64>> {
    // comp[p][m]: compositions of m into p parts; comp[1][m] = 1.
    let mut comp = vec![vec![0u64; max_m as usize + 1]; max_parts + 1];
    for m in 0..=max_m as usize {
        comp[1][m] = 1;
    }
    for p in 2..=max_parts {
        let mut acc = 0u64;
        for m in 0..=max_m as usize {
            acc = acc.saturating_add(comp[p - 1][m]);
            comp[p][m] = acc;
        }
    }
    comp
}

impl CanonicalSpace {
    pub fn size_of(n_sites: usize, particles: u64) -> u64 {
        let comp = composition_counts(particles, n_sites);
        comp[n_sites][particles as usize]
    }

    pub fn new(n_sites: usize, particles: u64, cap: u64) -> Result<Self, SpectralError> {
        assert!(n_sites >= 1);
        let comp = composition_counts(particles, n_sites);
        let count = comp[n_sites][particles as usize];
        if count > cap {
            return Err(SpectralError::StateSpaceTooLarge { states: count, cap });
        }
        let mut states = Vec::with_capacity(count as usize);
        let mut current = vec![0u32; n_sites];
        enumerate_states(&mut current, 0, particles, &mut states);
        debug_assert_eq!(states.len() as u64, count);
        Ok(CanonicalSpace {
            n_sites,
            particles,
            states,
            comp,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, idx: usize) -> &[u32] {
        &self.states[idx]
    }

    pub fn states(&self) -> impl Iterator<Item = &[u32]> {
        self.states.iter().map(Vec::as_slice)
    }

    /// Lexicographic rank of an occupancy vector; inverse of [`state`].
    pub fn rank(&self, occ: &[u32]) -> usize {
        debug_assert_eq!(occ.len(), self.n_sites);
        let mut rank = 0u64;
        let mut remaining = self.particles;
        for (i, &v) in occ.iter().enumerate().take(self.n_sites - 1) {
            let parts_left = self.n_sites - i - 1;
            // States with a smaller value at position i come first.
            for smaller in 0..v as u64 {
                rank += self.comp[parts_left][(remaining - smaller) as usize];
            }
            remaining -= v as u64;
        }
        rank as usize
    }
}

fn enumerate_states(current: &mut Vec<u32>, pos: usize, remaining: u64, out: &mut Vec<Vec<u32>>) {
    if pos == current.len() - 1 {
        current[pos] = remaining as u32;
        out.push(current.clone());
        return;
    }
    for v in 0..=remaining {
        current[pos] = v as u32;
        enumerate_states(current, pos + 1, remaining - v, out);
    }
    current[pos] = 0;
}

/// Compressed sparse rows with an explicit diagonal included.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(n: usize, triplets: &mut [(u32, u32, f64)]) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        for &(r, c, v) in triplets.iter() {
            // Merge duplicates.
            if let (Some(&last_c), true) = (cols.last(), row_ptr[r as usize + 1] > 0) {
                if last_c == c && cols.len() > row_ptr[r as usize] {
                    *vals.last_mut().expect("parallel arrays") += v;
                    continue;
                }
            }
            cols.push(c);
            vals.push(v);
            row_ptr[r as usize + 1] = cols.len();
        }
        // Fill empty rows.
        for r in 1..=n {
            if row_ptr[r] < row_ptr[r - 1] {
                row_ptr[r] = row_ptr[r - 1];
            }
        }
        Csr {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        self.cols[lo..hi]
            .iter()
            .zip(&self.vals[lo..hi])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn entry(&self, r: usize, c: usize) -> f64 {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        match self.cols[lo..hi].binary_search(&(c as u32)) {
            Ok(pos) => self.vals[lo + pos],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for (c, v) in self.row(r) {
                acc += v * x[c];
            }
            y[r] = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }
}

/// Symmetric zero-range generator on a closed segment of sites with its
/// stationary weights.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub space: CanonicalSpace,
    pub q: Csr,
    /// Stationary weights, normalized to sum 1; detailed balance holds.
    pub pi: Vec<f64>,
}

/// Assemble the symmetric generator: from each state, a particle at site `i`
/// hops to `i + d` (inside the segment, no wrap) at rate `g(eta_i) s(d)`.
pub fn build_generator(
    g: &RateFunction,
    s_offsets: &[(i64, f64)],
    n_sites: usize,
    particles: u64,
    cap: u64,
) -> Result<GeneratorMatrix, SpectralError> {
    let space = CanonicalSpace::new(n_sites, particles, cap)?;
    if space.len() < 2 {
        return Err(SpectralError::GapUndefined(space.len() as u64));
    }
    let mut triplets: Vec<(u32, u32, f64)> = Vec::new();
    let mut scratch = vec![0u32; n_sites];
    for idx in 0..space.len() {
        let state = space.state(idx);
        let mut diag = 0.0;
        for i in 0..n_sites {
            if state[i] == 0 {
                continue;
            }
            let rate_base = g.value(state[i] as u64);
            for &(d, s) in s_offsets {
                let j = i as i64 + d;
                if j < 0 || j >= n_sites as i64 {
                    continue;
                }
                let rate = rate_base * s;
                scratch.copy_from_slice(state);
                scratch[i] -= 1;
                scratch[j as usize] += 1;
                let target = space.rank(&scratch);
                triplets.push((idx as u32, target as u32, rate));
                diag -= rate;
            }
        }
        triplets.push((idx as u32, idx as u32, diag));
    }
    let q = Csr::from_triplets(space.len(), &mut triplets);

    // pi(state) ∝ prod_i 1/(g(1)...g(eta_i)).
    let mut log_w = vec![0.0f64; particles as usize + 1];
    for k in 1..=particles {
        log_w[k as usize] = log_w[k as usize - 1] - g.value(k).ln();
    }
    let mut pi: Vec<f64> = space
        .states()
        .map(|st| st.iter().map(|&k| log_w[k as usize]).sum::<f64>().exp())
        .collect();
    let total: f64 = pi.iter().sum();
    for p in pi.iter_mut() {
        *p /= total;
    }
    Ok(GeneratorMatrix { space, q, pi })
}

/// `max |pi_r q_rc - pi_c q_cr|` over stored entries.
pub fn reversibility_residual(gen: &GeneratorMatrix) -> f64 {
    let mut res = 0.0f64;
    for r in 0..gen.q.n {
        for (c, v) in gen.q.row(r) {
            if c == r {
                continue;
            }
            let forward = gen.pi[r] * v;
            let backward = gen.pi[c] * gen.q.entry(c, r);
            res = res.max((forward - backward).abs());
        }
    }
    res
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapMethod {
    Dense,
    Lanczos,
}

#[derive(Debug, Clone, Copy)]
pub struct SpectralGap {
    pub gap: f64,
    /// Inverse gap.
    pub w: f64,
    pub method: GapMethod,
}

pub const DEFAULT_DENSE_THRESHOLD: usize = 2000;

/// Smallest nonzero eigenvalue of `-Q` in the pi-weighted inner product.
///
/// Dense symmetrized eigensolve below `dense_threshold` states, restarted
/// Lanczos with full reorthogonalization above it; relative tolerance 1e-8.
pub fn spectral_gap(
    gen: &GeneratorMatrix,
    dense_threshold: usize,
) -> Result<SpectralGap, SpectralError> {
    let n = gen.q.n;
    if n < 2 {
        return Err(SpectralError::GapUndefined(n as u64));
    }
    let sym = symmetrized(&gen.q, &gen.pi);
    if n <= dense_threshold {
        let dense = sym.to_dense();
        // Symmetrize residual rounding before the eigensolve.
        let dense = (&dense + dense.transpose()) * 0.5;
        let mut eigs: Vec<f64> = (-dense).symmetric_eigenvalues().iter().copied().collect();
        eigs.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
        let scale = eigs.last().copied().unwrap_or(1.0).max(1.0);
        debug_assert!(
            eigs[0].abs() <= 1e-9 * scale,
            "kernel eigenvalue {}",
            eigs[0]
        );
        let gap = eigs[1];
        Ok(SpectralGap {
            gap,
            w: 1.0 / gap,
            method: GapMethod::Dense,
        })
    } else {
        let kernel: Vec<f64> = {
            let mut v: Vec<f64> = gen.pi.iter().map(|p| p.sqrt()).collect();
            normalize(&mut v);
            v
        };
        let gap = lanczos_smallest_nonzero(&sym, &kernel, 1e-8, 6000)?;
        Ok(SpectralGap {
            gap,
            w: 1.0 / gap,
            method: GapMethod::Lanczos,
        })
    }
}

/// `D^{1/2} Q D^{-1/2}` with `D = diag(pi)`; symmetric under reversibility.
fn symmetrized(q: &Csr, pi: &[f64]) -> Csr {
    let mut triplets: Vec<(u32, u32, f64)> = Vec::with_capacity(q.nnz());
    for r in 0..q.n {
        for (c, v) in q.row(r) {
            let scaled = v * (pi[r] / pi[c]).sqrt();
            triplets.push((r as u32, c as u32, scaled));
        }
    }
    Csr::from_triplets(q.n, &mut triplets)
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// Smallest nonzero eigenvalue of -B for symmetric negative-semidefinite B
// with known kernel vector. Works on A = sigma I + B (so the target becomes
// the largest eigenvalue after deflating the kernel), with plain restarts
// seeded by the best Ritz vector.
fn lanczos_smallest_nonzero(
    b: &Csr,
    kernel: &[f64],
    rel_tol: f64,
    max_iters: usize,
) -> Result<f64, SpectralError> {
    let n = b.n;
    // Gershgorin upper bound for the spectrum of -B.
    let mut sigma = 0.0f64;
    for r in 0..n {
        let mut radius = 0.0;
        let mut diag = 0.0;
        for (c, v) in b.row(r) {
            if c == r {
                diag = -v;
            } else {
                radius += v.abs();
            }
        }
        sigma = sigma.max(diag + radius);
    }
    sigma = sigma.max(1e-300);

    let max_basis = 160.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1a2c);
    let mut start: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut last_residual = f64::INFINITY;
    let mut iters_used = 0usize;

    while iters_used < max_iters {
        // Orthogonalize the start vector against the kernel.
        let k_dot = dot(&start, kernel);
        for (s, k) in start.iter_mut().zip(kernel) {
            *s -= k_dot * k;
        }
        if normalize(&mut start) == 0.0 {
            start = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
            continue;
        }

        let mut basis: Vec<Vec<f64>> = vec![start.clone()];
        let mut alphas: Vec<f64> = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        let mut w = vec![0.0f64; n];

        for step in 0..max_basis {
            iters_used += 1;
            let v = &basis[step];
            b.matvec(v, &mut w);
            // A v = sigma v + B v.
            for (wi, vi) in w.iter_mut().zip(v) {
                *wi += sigma * vi;
            }
            let alpha = dot(&w, v);
            alphas.push(alpha);
            // Full reorthogonalization against the kernel and the basis.
            // Two passes: one pass leaves a residue proportional to the
            // basis defect and the defect compounds geometrically.
            for _ in 0..2 {
                for u in std::iter::once(kernel).chain(basis.iter().map(Vec::as_slice)) {
                    let c = dot(&w, u);
                    for (wi, ui) in w.iter_mut().zip(u) {
                        *wi -= c * ui;
                    }
                }
            }
            let beta = normalize(&mut w);
            betas.push(beta);

            let k = alphas.len();
            if k >= 2 || beta < 1e-14 * sigma {
                // Ritz extraction from the k x k tridiagonal.
                let mut tri = DMatrix::zeros(k, k);
                for i in 0..k {
                    tri[(i, i)] = alphas[i];
                    if i + 1 < k {
                        tri[(i, i + 1)] = betas[i];
                        tri[(i + 1, i)] = betas[i];
                    }
                }
                let eig = nalgebra::SymmetricEigen::new(tri);
                let (mut top_idx, mut top_val) = (0usize, f64::MIN);
                for (i, &val) in eig.eigenvalues.iter().enumerate() {
                    if val > top_val {
                        top_val = val;
                        top_idx = i;
                    }
                }
                let s_last = eig.eigenvectors[(k - 1, top_idx)];
                let residual = beta * s_last.abs();
                let gap_estimate = sigma - top_val;
                // Ritz value error is about residual^2 / separation; stop
                // once that clears the relative tolerance on the gap, or
                // when the Krylov space is exhausted.
                let floor = gap_estimate.max(1e-12);
                if residual * residual / floor <= rel_tol * floor || beta < 1e-14 * sigma {
                    return Ok(gap_estimate);
                }
                if step + 1 == max_basis || beta < 1e-14 * sigma {
                    // Restart from the best Ritz vector.
                    let mut next = vec![0.0f64; n];
                    for (i, basis_vec) in basis.iter().enumerate() {
                        let c = eig.eigenvectors[(i, top_idx)];
                        for (ni, bi) in next.iter_mut().zip(basis_vec) {
                            *ni += c * bi;
                        }
                    }
                    last_residual = residual;
                    start = next;
                    break;
                }
            }
            if beta < 1e-14 * sigma {
                break;
            }
            basis.push(w.clone());
        }
    }
    Err(SpectralError::ConvergenceFailure {
        iters: iters_used,
        residual: last_residual,
    })
}

/// Gap of a single particle hopping on the closed segment with rates
/// `g(1) s(d)`; the independent-particle reference value.
pub fn one_particle_gap(
    n_sites: usize,
    s_offsets: &[(i64, f64)],
    g_one: f64,
) -> Result<f64, SpectralError> {
    if n_sites < 2 {
        return Err(SpectralError::GapUndefined(n_sites as u64));
    }
    let mut m = DMatrix::zeros(n_sites, n_sites);
    for i in 0..n_sites {
        for &(d, s) in s_offsets {
            let j = i as i64 + d;
            if j < 0 || j >= n_sites as i64 {
                continue;
            }
            let rate = g_one * s;
            m[(i, j as usize)] += rate;
            m[(i, i)] -= rate;
        }
    }
    let m = (&m + m.transpose()) * 0.5;
    let mut eigs: Vec<f64> = (-m).symmetric_eigenvalues().iter().copied().collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(eigs[1])
}

fn pi_dot(pi: &[f64], a: &[f64], b: &[f64]) -> f64 {
    pi.iter()
        .zip(a.iter().zip(b))
        .map(|(p, (x, y))| p * x * y)
        .sum()
}

/// Center `f` to zero pi-mean (in place); returns the subtracted mean.
pub fn center(pi: &[f64], f: &mut [f64]) -> f64 {
    let mean = pi.iter().zip(f.iter()).map(|(p, x)| p * x).sum::<f64>();
    for x in f.iter_mut() {
        *x -= mean;
    }
    mean
}

// Conjugate gradients for (lambda - Q) u = f in the pi inner product; Q must
// be self-adjoint w.r.t. pi and lambda - Q positive definite (lambda > 0, or
// lambda = 0 with mean-zero data on an ergodic chain, kept deflated).
fn cg_resolvent(
    q: &Csr,
    pi: &[f64],
    f: &[f64],
    lambda: f64,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>, SpectralError> {
    let n = q.n;
    let deflate = lambda == 0.0;
    let apply = |x: &[f64], out: &mut Vec<f64>, scratch: &mut Vec<f64>| {
        q.matvec(x, scratch);
        for i in 0..n {
            out[i] = lambda * x[i] - scratch[i];
        }
    };
    let project = |v: &mut Vec<f64>| {
        if deflate {
            let mean = pi.iter().zip(v.iter()).map(|(p, x)| p * x).sum::<f64>();
            for x in v.iter_mut() {
                *x -= mean;
            }
        }
    };

    let mut u = vec![0.0f64; n];
    let mut r = f.to_vec();
    project(&mut r);
    let mut p = r.clone();
    let mut ap = vec![0.0f64; n];
    let mut scratch = vec![0.0f64; n];
    let f_norm = pi_dot(pi, f, f).sqrt().max(1e-300);
    let mut rs = pi_dot(pi, &r, &r);
    for _ in 0..max_iters {
        if rs.sqrt() <= tol * f_norm {
            return Ok(u);
        }
        apply(&p, &mut ap, &mut scratch);
        project(&mut ap);
        let denom = pi_dot(pi, &p, &ap);
        if denom <= 0.0 {
            return Err(SpectralError::SolveFailure(rs.sqrt()));
        }
        let alpha = rs / denom;
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        project(&mut r);
        let rs_new = pi_dot(pi, &r, &r);
        let beta = rs_new / rs;
        rs = rs_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rs.sqrt() <= tol * f_norm * 10.0 {
        return Ok(u);
    }
    Err(SpectralError::SolveFailure(rs.sqrt() / f_norm))
}

/// Resolvent quadratic form `<f, (lambda - Q)^{-1} f>_pi` for a reversible
/// generator, with the variational cross-check: random probes `g` must give
/// `2<f,g> - ||g||^2_{1,lambda} <= value`, with equality at the solver's `u`.
pub fn resolvent_norm(
    gen: &GeneratorMatrix,
    f: &[f64],
    lambda: f64,
    probe_count: usize,
    seed: u64,
) -> Result<f64, SpectralError> {
    resolvent_norm_on(&gen.q, &gen.pi, f, lambda, probe_count, seed)
}

/// As [`resolvent_norm`] for a raw `(Q, pi)` pair (Q self-adjoint in pi).
pub fn resolvent_norm_on(
    q: &Csr,
    pi: &[f64],
    f: &[f64],
    lambda: f64,
    probe_count: usize,
    seed: u64,
) -> Result<f64, SpectralError> {
    let mean = pi.iter().zip(f.iter()).map(|(p, x)| p * x).sum::<f64>();
    if mean.abs() > 1e-9 * pi_dot(pi, f, f).sqrt().max(1e-300) {
        return Err(SpectralError::NotCentered(mean));
    }
    let u = cg_resolvent(q, pi, f, lambda, 1e-13, 20 * q.n + 200)?;
    let value = pi_dot(pi, f, &u);

    // Variational faces: sup_g 2<f,g> - <g,(lambda - Q)g> equals the solve.
    let n = q.n;
    let mut scratch = vec![0.0f64; n];
    let mut quad = |g: &[f64]| -> f64 {
        q.matvec(g, &mut scratch);
        let mut qform = 0.0;
        for i in 0..n {
            qform += pi[i] * g[i] * (lambda * g[i] - scratch[i]);
        }
        2.0 * pi_dot(pi, f, g) - qform
    };
    let scale = value.abs().max(pi_dot(pi, f, f)).max(1e-30);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..probe_count {
        let g: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let probe = quad(&g);
        assert!(
            probe <= value + 1e-8 * scale,
            "variational probe {probe} exceeds resolvent value {value}"
        );
    }
    let at_solution = quad(&u);
    assert!(
        (at_solution - value).abs() <= 1e-8 * scale,
        "variational equality at the solution: {at_solution} vs {value}"
    );
    Ok(value)
}

/// `||f||^2_{-1} = <f, (-S)^{-1} f>_pi` on the mean-zero subspace.
pub fn h_minus_one_norm(q: &Csr, pi: &[f64], f: &[f64]) -> Result<f64, SpectralError> {
    let mut f = f.to_vec();
    center(pi, &mut f);
    let u = cg_resolvent(q, pi, &f, 0.0, 1e-13, 20 * q.n + 200)?;
    Ok(pi_dot(pi, &f, &u))
}

/// Tagged-frame generator on a periodic torus with a fixed particle count
/// and the tagged particle's site always occupied.
#[derive(Debug, Clone)]
pub struct ReferenceGenerator {
    pub side: usize,
    pub particles: u64,
    /// Occupancy vectors with occ[0] >= 1, lexicographic in (occ[0]-1, rest).
    states: Vec<Vec<u32>>,
    pub q: Csr,
    /// Size-biased stationary vector: pi(eta) ∝ eta_0 prod_i w(eta_i).
    pub pi: Vec<f64>,
    /// Symmetric part S = (Q + Q*)/2 in the pi inner product.
    pub s: Csr,
}

impl ReferenceGenerator {
    pub fn state(&self, idx: usize) -> &[u32] {
        &self.states[idx]
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &[u32]> {
        self.states.iter().map(Vec::as_slice)
    }

    /// `max_r |sum_c pi_c Q_cr|`: invariance residual of pi.
    pub fn invariance_residual(&self) -> f64 {
        let n = self.q.n;
        let mut acc = vec![0.0f64; n];
        for r in 0..n {
            for (c, v) in self.q.row(r) {
                acc[c] += self.pi[r] * v;
            }
        }
        acc.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// `<g, A g>_pi` for the antisymmetric part; zero for every vector.
    pub fn antisymmetric_form(&self, g: &[f64]) -> f64 {
        // <g, A g> = <g, Q g> - <g, S g>.
        let n = self.q.n;
        let mut qg = vec![0.0f64; n];
        self.q.matvec(g, &mut qg);
        let mut sg = vec![0.0f64; n];
        self.s.matvec(g, &mut sg);
        pi_dot(&self.pi, g, &qg) - pi_dot(&self.pi, g, &sg)
    }

    /// The escape-rate observable `g(eta_0)/eta_0 - alpha/rho` on states.
    pub fn escape_observable(&self, g: &RateFunction, alpha_over_rho: f64) -> Vec<f64> {
        self.states
            .iter()
            .map(|st| g.value(st[0] as u64) / st[0] as f64 - alpha_over_rho)
            .collect()
    }
}

/// Build the full (non-reversible) tagged-frame generator on the torus.
pub fn build_reference_generator(
    g: &RateFunction,
    kernel: &JumpKernel,
    side: usize,
    particles: u64,
    cap: u64,
) -> Result<ReferenceGenerator, SpectralError> {
    if kernel.dim != 1 {
        return Err(SpectralError::NotOneDimensional(kernel.dim));
    }
    assert!(particles >= 1);
    // States are indexed through compositions of (particles - 1) with the
    // extra tagged particle pinned at the origin.
    let inner = CanonicalSpace::new(side, particles - 1, cap)?;
    let states: Vec<Vec<u32>> = inner
        .states()
        .map(|st| {
            let mut occ = st.to_vec();
            occ[0] += 1;
            occ
        })
        .collect();
    let n = states.len();
    if n < 2 {
        return Err(SpectralError::GapUndefined(n as u64));
    }
    let rank_of = |occ: &[u32]| -> usize {
        let mut inner_occ = occ.to_vec();
        debug_assert!(inner_occ[0] >= 1);
        inner_occ[0] -= 1;
        inner.rank(&inner_occ)
    };

    let wrap = |x: i64| -> usize { x.rem_euclid(side as i64) as usize };
    let mut triplets: Vec<(u32, u32, f64)> = Vec::new();
    let mut scratch = vec![0u32; side];
    for (idx, occ) in states.iter().enumerate() {
        let mut diag = 0.0;
        for (offset, p) in &kernel.entries {
            let j = offset[0];
            // Environment particles away from the origin.
            for i in 1..side {
                if occ[i] == 0 {
                    continue;
                }
                let rate = g.value(occ[i] as u64) * p;
                scratch.copy_from_slice(occ);
                scratch[i] -= 1;
                scratch[wrap(i as i64 + j)] += 1;
                triplets.push((idx as u32, rank_of(&scratch) as u32, rate));
                diag -= rate;
            }
            // Non-tagged movers at the origin.
            let k0 = occ[0] as u64;
            let g0 = g.value(k0);
            if k0 >= 2 {
                let rate = g0 * (k0 as f64 - 1.0) / k0 as f64 * p;
                scratch.copy_from_slice(occ);
                scratch[0] -= 1;
                scratch[wrap(j)] += 1;
                triplets.push((idx as u32, rank_of(&scratch) as u32, rate));
                diag -= rate;
            }
            // The tagged mover: displace and recentre the frame.
            {
                let rate = g0 / k0 as f64 * p;
                for m in 0..side {
                    scratch[m] = occ[wrap(m as i64 + j)];
                }
                scratch[wrap(-j)] -= 1;
                scratch[0] += 1;
                triplets.push((idx as u32, rank_of(&scratch) as u32, rate));
                diag -= rate;
            }
        }
        triplets.push((idx as u32, idx as u32, diag));
    }
    let q = Csr::from_triplets(n, &mut triplets);

    let mut log_w = vec![0.0f64; particles as usize + 1];
    for k in 1..=particles {
        log_w[k as usize] = log_w[k as usize - 1] - g.value(k).ln();
    }
    let mut pi: Vec<f64> = states
        .iter()
        .map(|st| {
            let base: f64 = st.iter().map(|&k| log_w[k as usize]).sum::<f64>().exp();
            st[0] as f64 * base
        })
        .collect();
    let total: f64 = pi.iter().sum();
    for p in pi.iter_mut() {
        *p /= total;
    }

    // S = (Q + Q*)/2 with Q*[r][c] = pi_c Q[c][r] / pi_r.
    let mut s_triplets: Vec<(u32, u32, f64)> = Vec::with_capacity(2 * q.nnz());
    for r in 0..n {
        for (c, v) in q.row(r) {
            s_triplets.push((r as u32, c as u32, 0.5 * v));
            s_triplets.push((c as u32, r as u32, 0.5 * pi[r] * v / pi[c]));
        }
    }
    let s = Csr::from_triplets(n, &mut s_triplets);

    Ok(ReferenceGenerator {
        side,
        particles,
        states,
        q,
        pi,
        s,
    })
}

/// Variance of the time integral of `f` over `[0, t]` in stationarity:
/// `sigma_t^2(f) = 2 int_0^t (t-s) <f, e^{sQ} f>_pi ds`.
///
/// Reversible generators go through the eigendecomposition; general ones
/// through adaptive integration of the semigroup action with tolerance 1e-10.
pub fn sigma_t_exact(
    q: &Csr,
    pi: &[f64],
    f: &[f64],
    t: f64,
    reversible: bool,
) -> Result<f64, SpectralError> {
    let mut f = f.to_vec();
    center(pi, &mut f);
    if reversible {
        sigma_t_eigen(q, pi, &f, t)
    } else {
        sigma_t_ode(q, pi, &f, t, 1e-10)
    }
}

fn sigma_t_eigen(q: &Csr, pi: &[f64], f: &[f64], t: f64) -> Result<f64, SpectralError> {
    let n = q.n;
    let sym = symmetrized(q, pi).to_dense();
    let sym = (&sym + sym.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(-sym);
    // f_tilde = D^{1/2} f expanded in the eigenbasis.
    let f_tilde = nalgebra::DVector::from_iterator(n, (0..n).map(|i| pi[i].sqrt() * f[i]));
    let coeffs = eig.eigenvectors.transpose() * f_tilde;
    let mut total = 0.0;
    for (k, &mu) in eig.eigenvalues.iter().enumerate() {
        let c2 = coeffs[k] * coeffs[k];
        total += 2.0 * c2 * phi_integral(mu.max(0.0), t);
    }
    Ok(total)
}

// int_0^t (t-s) e^{-mu s} ds, stable for small mu t.
fn phi_integral(mu: f64, t: f64) -> f64 {
    let x = mu * t;
    if x < 1e-4 {
        // Series of (e^{-x} - 1 + x)/mu^2 around 0.
        t * t * (0.5 - x / 6.0 + x * x / 24.0)
    } else {
        ((-x).exp() - 1.0 + x) / (mu * mu)
    }
}

// Adaptive Cash-Karp RK45 on the augmented system
//   u' = Q u,  q0' = <f,u>_pi,  q1' = s <f,u>_pi,
// then sigma_t^2 = 2 (t q0(t) - q1(t)).
fn sigma_t_ode(q: &Csr, pi: &[f64], f: &[f64], t: f64, tol: f64) -> Result<f64, SpectralError> {
    let n = q.n;
    let mut u = f.to_vec();
    let mut q0 = 0.0f64;
    let mut q1 = 0.0f64;
    let mut s = 0.0f64;
    // Stiffness scale from the Gershgorin bound.
    let mut lam_max = 1.0f64;
    for r in 0..n {
        let mut sum = 0.0;
        for (_, v) in q.row(r) {
            sum += v.abs();
        }
        lam_max = lam_max.max(sum);
    }
    let mut h = (1.0 / lam_max).min(t / 8.0);
    let deriv = |s: f64, u: &[f64], du: &mut Vec<f64>, dq: &mut [f64; 2]| {
        q.matvec(u, du);
        let c = pi_dot(pi, f, u);
        dq[0] = c;
        dq[1] = s * c;
    };

    let a = [
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
        [3.0 / 10.0, -9.0 / 10.0, 6.0 / 5.0, 0.0, 0.0],
        [-11.0 / 54.0, 5.0 / 2.0, -70.0 / 27.0, 35.0 / 27.0, 0.0],
        [
            1631.0 / 55296.0,
            175.0 / 512.0,
            575.0 / 13824.0,
            44275.0 / 110592.0,
            253.0 / 4096.0,
        ],
    ];
    let c_nodes = [0.0, 1.0 / 5.0, 3.0 / 10.0, 3.0 / 5.0, 1.0, 7.0 / 8.0];
    let b5 = [
        37.0 / 378.0,
        0.0,
        250.0 / 621.0,
        125.0 / 594.0,
        0.0,
        512.0 / 1771.0,
    ];
    let b4 = [
        2825.0 / 27648.0,
        0.0,
        18575.0 / 48384.0,
        13525.0 / 55296.0,
        277.0 / 14336.0,
        1.0 / 4.0,
    ];

    let mut ks_u: Vec<Vec<f64>> = vec![vec![0.0; n]; 6];
    let mut ks_q: Vec<[f64; 2]> = vec![[0.0; 2]; 6];
    let mut stage_u = vec![0.0f64; n];
    let mut steps = 0usize;
    while s < t {
        if s + h > t {
            h = t - s;
        }
        for stage in 0..6 {
            for i in 0..n {
                let mut acc = u[i];
                for (prev, a_coef) in a[stage].iter().enumerate().take(stage) {
                    acc += h * a_coef * ks_u[prev][i];
                }
                stage_u[i] = acc;
            }
            let (_, tail) = ks_u.split_at_mut(stage);
            let mut dq = [0.0f64; 2];
            deriv(s + c_nodes[stage] * h, &stage_u, &mut tail[0], &mut dq);
            ks_q[stage] = dq;
        }
        // 5th and embedded 4th order combinations; error on all components.
        let mut err: f64 = 0.0;
        let mut u5 = vec![0.0f64; n];
        let mut scale_max: f64 = 1e-12;
        for i in 0..n {
            let mut acc5 = 0.0;
            let mut acc4 = 0.0;
            for stage in 0..6 {
                acc5 += b5[stage] * ks_u[stage][i];
                acc4 += b4[stage] * ks_u[stage][i];
            }
            u5[i] = u[i] + h * acc5;
            let e = h * (acc5 - acc4);
            let scale = u[i].abs().max(u5[i].abs()).max(1e-8);
            err = err.max((e / scale).abs());
            scale_max = scale_max.max(scale);
        }
        let mut q5 = [q0, q1];
        let mut q4 = [q0, q1];
        for stage in 0..6 {
            q5[0] += h * b5[stage] * ks_q[stage][0];
            q5[1] += h * b5[stage] * ks_q[stage][1];
            q4[0] += h * b4[stage] * ks_q[stage][0];
            q4[1] += h * b4[stage] * ks_q[stage][1];
        }
        for c in 0..2 {
            let scale = q5[c].abs().max(1e-8);
            err = err.max(((q5[c] - q4[c]) / scale).abs());
        }

        if err <= tol {
            s += h;
            u = u5;
            q0 = q5[0];
            q1 = q5[1];
        }
        let factor = if err > 0.0 {
            0.9 * (tol / err).powf(0.2)
        } else {
            4.0
        };
        h *= factor.clamp(0.2, 4.0);
        steps += 1;
        if steps > 4_000_000 {
            return Err(SpectralError::ConvergenceFailure {
                iters: steps,
                residual: err,
            });
        }
    }
    Ok(2.0 * (t * q0 - q1))
}

// Dense solve of (lambda - Q) u = f for the non-symmetric generator.
fn dense_resolvent(q: &Csr, f: &[f64], lambda: f64) -> Result<Vec<f64>, SpectralError> {
    let n = q.n;
    let mut m = DMatrix::zeros(n, n);
    for r in 0..n {
        m[(r, r)] += lambda;
        for (c, v) in q.row(r) {
            m[(r, c)] -= v;
        }
    }
    let rhs = nalgebra::DVector::from_column_slice(f);
    let lu = m.lu();
    let u = lu
        .solve(&rhs)
        .ok_or(SpectralError::SolveFailure(f64::NAN))?;
    Ok(u.iter().copied().collect())
}

/// One row of the additive-functional variance bound table.
#[derive(Debug, Clone, Copy)]
pub struct VarianceBoundRow {
    pub t: f64,
    pub sigma_t_sq: f64,
    /// `<f, (1/t - Q)^{-1} f>_pi` for the full generator.
    pub resolvent_full: f64,
    /// `<f, (1/t - S)^{-1} f>_pi`.
    pub resolvent_sym: f64,
    /// `||f||^2_{-1}` from the symmetric part.
    pub h_minus_one: f64,
    /// `sigma_t^2 / (t resolvent_full)`: the measured leading constant.
    pub c_one: f64,
    /// Exact resolvent orderings held to 1e-10.
    pub ordering_ok: bool,
}

/// Variance-vs-resolvent table: for each `t`, the exact `sigma_t^2`, the
/// three nested resolvent forms at `lambda = 1/t`, the measured leading
/// ratio, and the verdict on the exact orderings
/// `<f,(λ-Q)^{-1}f> <= <f,(λ-S)^{-1}f> <= ||f||^2_{-1}`.
pub fn variance_bound_table(
    gen: &ReferenceGenerator,
    f: &[f64],
    t_list: &[f64],
) -> Result<Vec<VarianceBoundRow>, SpectralError> {
    if gen.q.n > 10_000 {
        return Err(SpectralError::StateSpaceTooLarge {
            states: gen.q.n as u64,
            cap: 10_000,
        });
    }
    let mut f = f.to_vec();
    center(&gen.pi, &mut f);
    let h_minus_one = h_minus_one_norm(&gen.s, &gen.pi, &f)?;
    let mut rows = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let lambda = 1.0 / t;
        let sigma_t_sq = sigma_t_ode(&gen.q, &gen.pi, &f, t, 1e-10)?;
        let u_full = dense_resolvent(&gen.q, &f, lambda)?;
        let resolvent_full = pi_dot(&gen.pi, &f, &u_full);
        let u_sym = cg_resolvent(&gen.s, &gen.pi, &f, lambda, 1e-13, 20 * gen.q.n + 200)?;
        let resolvent_sym = pi_dot(&gen.pi, &f, &u_sym);
        let scale = resolvent_sym.abs().max(h_minus_one.abs()).max(1e-30);
        let ordering_ok = resolvent_full <= resolvent_sym + 1e-10 * scale
            && resolvent_sym <= h_minus_one + 1e-10 * scale;
        rows.push(VarianceBoundRow {
            t,
            sigma_t_sq,
            resolvent_full,
            resolvent_sym,
            h_minus_one,
            c_one: sigma_t_sq / (t * resolvent_full),
            ordering_ok,
        });
    }
    Ok(rows)
}

/// One row of the inverse-gap moment scan.
#[derive(Debug, Clone, Copy)]
pub struct GapScanRow {
    pub n_sites: usize,
    /// Monte Carlo mean of `W(n, N)^2` over equilibrium draws of `N`.
    pub mean_w_sq: f64,
    pub normalized: f64,
    pub draws_used: usize,
    /// Fraction of draws skipped because the state space exceeded the cap.
    pub truncated_mass: f64,
}

/// Estimate `E[W(n, N_n)^2] / n^4` with `N_n` a sum of `n` independent bulk
/// occupancies; gaps are solved exactly per particle count and memoized.
#[allow(clippy::too_many_arguments)]
pub fn sp_assumption_scan(
    g: &RateFunction,
    params: &ModelParams,
    s_offsets: &[(i64, f64)],
    n_list: &[usize],
    draws: usize,
    cap: u64,
    dense_threshold: usize,
    seed: u64,
) -> Result<Vec<GapScanRow>, SpectralError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_list.len());
    for &n_sites in n_list {
        let mut cache: std::collections::HashMap<u64, Option<f64>> =
            std::collections::HashMap::new();
        let mut sum = 0.0f64;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for _ in 0..draws {
            let total: u64 = (0..n_sites)
                .map(|_| params.sample_marginal(MarginalKind::Bulk, &mut rng))
                .sum();
            let w = match cache.entry(total) {
                std::collections::hash_map::Entry::Occupied(e) => *e.get(),
                std::collections::hash_map::Entry::Vacant(slot) => {
                    let value = if total == 0 {
                        // No particles, nothing to relax: skip the draw.
                        None
                    } else if CanonicalSpace::size_of(n_sites, total) > cap {
                        None
                    } else {
                        let gen = build_generator(g, s_offsets, n_sites, total, cap)?;
                        Some(spectral_gap(&gen, dense_threshold)?.w)
                    };
                    *slot.insert(value)
                }
            };
            match w {
                Some(w) => {
                    sum += w * w;
                    used += 1;
                }
                None => skipped += 1,
            }
        }
        let mean_w_sq = if used > 0 {
            sum / used as f64
        } else {
            f64::NAN
        };
        rows.push(GapScanRow {
            n_sites,
            mean_w_sq,
            normalized: mean_w_sq / (n_sites as f64).powi(4),
            draws_used: used,
            truncated_mass: skipped as f64 / draws as f64,
        });
    }
    Ok(rows)
}
