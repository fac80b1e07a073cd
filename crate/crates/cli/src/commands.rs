//! Subcommand implementations. Each command builds its model objects from
//! the config, runs the experiment, writes its reports under the output
//! directory, and returns the gate rows; the process exit code is decided
//! by the caller from the verdicts.

use crate::build::{self, ModelBundle};
use crate::config::{Config, ConfigError};
use crate::report::{self, DumpRecord, JsonlWriter};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;
use zrp_core::coupling::{self, CoupledModel, CoupledState};
use zrp_core::equilibrium::{EnsembleKind, MarginalKind};
use zrp_core::estimators::{self, local_fn_library, EnsembleSpec, EnsembleStats, GateReport};
use zrp_core::sim;
use zrp_core::spectral;
use zrp_core::stats;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Module(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

macro_rules! module_err {
    ($expr:expr) => {
        $expr.map_err(|e| CliError::Module(e.to_string()))
    };
}

pub struct CommandOutput {
    pub gates: Vec<GateReport>,
    pub passed: bool,
}

fn finish(
    outdir: &Path,
    name: &str,
    gates: Vec<GateReport>,
    hash: &str,
) -> Result<CommandOutput, CliError> {
    let passed = gates.iter().all(|g| g.pass);
    report::write_gate_csv(&report::out_path(outdir, name), &gates, hash)?;
    Ok(CommandOutput { gates, passed })
}

fn info_row(test: &str, estimate: f64) -> GateReport {
    GateReport {
        test: test.to_string(),
        time: 0.0,
        estimate,
        se: 0.0,
        target: estimate,
        pass: true,
    }
}

fn experiment_sigma(cfg: &Config) -> Result<f64, ConfigError> {
    cfg.get_f64_or("experiment", "sigma", 3.0)
}

fn ensemble_spec(cfg: &Config, bundle: &ModelBundle) -> Result<EnsembleSpec, ConfigError> {
    let horizon = cfg.get_f64("experiment", "horizon")?;
    let times = cfg.get_f64_list("experiment", "checkpoints")?;
    let replicas = cfg.get_usize("experiment", "replicas")?;
    let seed = cfg.get_u64_or("experiment", "seed", 1)?;
    let mut spec = EnsembleSpec::new(horizon, times, replicas, seed);
    spec.blocks = cfg.get_usize_or("experiment", "blocks", 100)?;
    spec.ensemble = bundle.ensemble;
    Ok(spec)
}

/// `validate`: check the rate and kernel, report their structural metadata.
pub fn cmd_validate(cfg: &Config, outdir: &Path) -> Result<CommandOutput, CliError> {
    let bundle = build::build_model(cfg)?;
    let hash = report::config_hash(&cfg.raw);
    let mut rows = vec![
        info_row("rate_lipschitz", bundle.g.lipschitz_bound),
        info_row("rate_liminf_estimate", bundle.g.liminf_estimate),
        info_row("rate_is_id", bundle.g.is_id as u8 as f64),
        info_row("kernel_range", bundle.kernel.range as f64),
        info_row("z", bundle.params.z),
        info_row("rho", bundle.params.rho),
        info_row("rho_star_estimate", bundle.params.rho_star_estimate),
        info_row("k_max", bundle.params.k_max as f64),
    ];
    if let Some((a, b)) = bundle.g.gap_class {
        rows.push(info_row("gap_class_a", a as f64));
        rows.push(info_row("gap_class_b", b));
    }
    for (c, d) in bundle.kernel.drift.iter().enumerate() {
        rows.push(info_row(&format!("kernel_drift[{c}]"), *d));
    }
    rows.push(info_row(
        "kernel_second_moment_trace",
        bundle.sim.second_moment_trace(),
    ));
    finish(outdir, "validate.csv", rows, &hash)
}

/// `sample`: draw configurations and hold the empirical marginals against
/// the exact tables.
pub fn cmd_sample(cfg: &Config, outdir: &Path) -> Result<CommandOutput, CliError> {
    let bundle = build::build_model(cfg)?;
    let hash = report::config_hash(&cfg.raw);
    let replicas = cfg.get_usize_or("experiment", "replicas", 10_000)?;
    let seed = cfg.get_u64_or("experiment", "seed", 1)?;
    let sigma = experiment_sigma(cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sites = bundle.torus.num_sites();
    let mut origin_acc = estimators::MomentAccumulator::new(1);
    let mut bulk_acc = estimators::MomentAccumulator::new(1);
    let mut origin_occupied = true;
    for _ in 0..replicas {
        let conf = bundle
            .params
            .sample_configuration(bundle.ensemble, bundle.torus, &mut rng);
        let k0 = conf.occupancy(0) as f64;
        origin_acc.push(&[k0]);
        bulk_acc.push(&[(conf.total_particles() as f64 - k0) / (n_sites as f64 - 1.0)]);
        if bundle.ensemble != EnsembleKind::Product && conf.occupancy(0) == 0 {
            origin_occupied = false;
        }
    }
    let n = replicas as f64;
    let origin_mean = origin_acc.mean(0);
    let origin_se = (origin_acc.covariance(0, 0) / n).sqrt();
    let origin_target: f64 = match bundle.ensemble {
        EnsembleKind::Product => bundle.params.rho,
        EnsembleKind::Palm => (1..=bundle.params.k_max)
            .map(|k| k as f64 * bundle.params.palm_pmf(k))
            .sum(),
        EnsembleKind::Primed => (1..=bundle.params.k_max + 1)
            .map(|k| k as f64 * bundle.params.primed_pmf(k))
            .sum(),
    };
    let bulk_mean = bulk_acc.mean(0);
    let bulk_se = (bulk_acc.covariance(0, 0) / n).sqrt();

    let mut rows = vec![
        GateReport {
            test: "origin_mean".into(),
            time: 0.0,
            estimate: origin_mean,
            se: origin_se,
            target: origin_target,
            pass: (origin_mean - origin_target).abs() <= sigma * origin_se,
        },
        GateReport {
            test: "bulk_mean".into(),
            time: 0.0,
            estimate: bulk_mean,
            se: bulk_se,
            target: bundle.params.rho,
            pass: (bulk_mean - bundle.params.rho).abs() <= sigma * bulk_se,
        },
    ];
    if bundle.ensemble != EnsembleKind::Product {
        rows.push(GateReport {
            test: "origin_occupied".into(),
            time: 0.0,
            estimate: origin_occupied as u8 as f64,
            se: 0.0,
            target: 1.0,
            pass: origin_occupied,
        });
    }
    finish(outdir, "sample.csv", rows, &hash)
}

/// `simulate`: ensemble run with drift gates, optional stationarity check
/// of a watched frame site, and optional JSONL trajectory dump.
pub fn cmd_simulate(
    cfg: &Config,
    outdir: &Path,
    dump: Option<&Path>,
) -> Result<CommandOutput, CliError> {
    let bundle = build::build_model(cfg)?;
    let hash = report::config_hash(&cfg.raw);
    let sigma = experiment_sigma(cfg)?;
    let mut spec = ensemble_spec(cfg, &bundle)?;
    let watch_site = if cfg.has("experiment", "watch_site") {
        Some(vec![cfg.get_i64_or("experiment", "watch_site", 5)?])
    } else {
        None
    };
    spec.watch_frame_site = watch_site.clone();

    let data = if let Some(dump_path) = dump {
        dump_and_collect(&bundle, &spec, dump_path)?
    } else {
        module_err!(estimators::run_ensemble(&bundle.sim, &bundle.params, &spec))?
    };

    let mut rows = estimators::drift_check(&data.stats, &bundle.sim, sigma);
    // Absolute-mean rows alongside the per-time drift rates.
    for (t_idx, &t) in data.stats.times.iter().enumerate() {
        let (est, se) = data.stats.jackknife(|accs| accs[t_idx].mean(0));
        let target = bundle.sim.mean_velocity()[0] * t;
        rows.push(GateReport {
            test: "mean_x".into(),
            time: t,
            estimate: est,
            se,
            target,
            pass: (est - target).abs() <= sigma * se,
        });
    }

    if let Some(occupancies) = &data.watched_occupancy {
        // Chi-square of the watched site's occupancy law against the bulk
        // marginal (stationarity of the reference ensemble).
        let level = cfg.get_f64_or("experiment", "ks_level", 0.01)?;
        let k_max = bundle.params.k_max;
        let mut counts = vec![0u64; k_max + 2];
        for &k in occupancies {
            counts[(k as usize).min(k_max + 1)] += 1;
        }
        let probs: Vec<f64> = (0..=k_max).map(|k| bundle.params.bulk_pmf(k)).collect();
        let gof = module_err!(stats::chi_square_gof(&counts, &probs, 5.0))?;
        rows.push(GateReport {
            test: "stationarity_chi_square_p".into(),
            time: spec.horizon,
            estimate: gof.p_value,
            se: 0.0,
            target: level,
            pass: gof.p_value > level,
        });
    }
    finish(outdir, "simulate.csv", rows, &hash)
}

// Sequential replica loop that both feeds the accumulators and writes the
// JSONL dump; replica streams match the parallel path bit for bit.
fn dump_and_collect(
    bundle: &ModelBundle,
    spec: &EnsembleSpec,
    dump_path: &Path,
) -> Result<estimators::EnsembleData, CliError> {
    let mut writer = JsonlWriter::create(dump_path)?;
    let dim = bundle.torus.dim;
    let mut rows: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.replicas);
    let mut watched = Vec::new();
    let mut total_events = 0u64;
    for r in 0..spec.replicas {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(r as u64);
        let initial = bundle
            .params
            .sample_configuration(spec.ensemble, bundle.torus, &mut rng);
        let traj = module_err!(sim::run(
            &initial,
            &bundle.sim,
            spec.horizon,
            &spec.times,
            &mut rng
        ))?;
        let mut row = Vec::with_capacity(spec.times.len());
        for (i, cp) in traj.checkpoints.iter().enumerate() {
            let a = traj.compensator(&bundle.sim, i);
            let mut obs = Vec::with_capacity(2 * dim);
            obs.extend(cp.position.iter().map(|&x| x as f64));
            obs.extend(a.iter().copied());
            row.push(obs);
            let shifts: BTreeMap<String, u64> = bundle
                .kernel
                .entries
                .iter()
                .zip(&cp.shift_counts)
                .map(|((offset, _), &count)| {
                    let label = offset
                        .iter()
                        .map(|c| c.to_string())
                        .collect::<Vec<_>>()
                        .join(",");
                    (label, count)
                })
                .collect();
            writer.write(&DumpRecord {
                replica: r,
                t: cp.time,
                x: &cp.position,
                a: &a,
                shifts: &shifts,
            })?;
        }
        if let Some(site) = &spec.watch_frame_site {
            watched.push(traj.final_frame.occupancy(bundle.torus.index(site)));
        }
        total_events += traj.events;
        rows.push(row);
    }
    writer.finish()?;
    let stats =
        EnsembleStats::from_rows(spec.times.clone(), dim, &rows, spec.blocks, spec.keep_raw);
    Ok(estimators::EnsembleData {
        stats,
        watched_occupancy: if spec.watch_frame_site.is_some() {
            Some(watched)
        } else {
            None
        },
        total_events,
    })
}

/// `variance`: diffusive lower bound, variance identity, boundedness ratio,
/// and the superadditivity scan.
pub fn cmd_variance(cfg: &Config, outdir: &Path) -> Result<CommandOutput, CliError> {
    let bundle = build::build_model(cfg)?;
    let hash = report::config_hash(&cfg.raw);
    let sigma = experiment_sigma(cfg)?;
    let ratio_gate = cfg.get_f64_or("experiment", "ratio_gate", 2.0)?;
    let spec = ensemble_spec(cfg, &bundle)?;
    let window = if cfg.has("experiment", "window") {
        let w = cfg.get_f64_list("experiment", "window")?;
        if w.len() != 2 {
            return Err(CliError::Module(
                "experiment.window must be `low, high`".into(),
            ));
        }
        (w[0], w[1])
    } else {
        (10.0, 100.0)
    };
    let data = module_err!(estimators::run_ensemble(&bundle.sim, &bundle.params, &spec))?;
    let mut rows =
        estimators::variance_bounds_check(&data.stats, &bundle.sim, sigma, ratio_gate, window);
    let (superadd, sup) = estimators::superadditivity_scan(&data.stats, sigma);
    rows.extend(superadd);
    rows.push(info_row("sup_v_over_t", sup));
    finish(outdir, "variance.csv", rows, &hash)
}

/// `clt`: KS normality of the standardized position plus the diffusivity
/// confidence interval against alpha/rho.
pub fn cmd_clt(cfg: &Config, outdir: &Path) -> Result<CommandOutput, CliError> {
    let bundle = build::build_model(cfg)?;
    build::enforce_id(cfg, &bundle.g)?;
    let hash = report::config_hash(&cfg.raw);
    let level = cfg.get_f64_or("experiment", "ks_level", 0.01)?;
    let min_samples = cfg.get_usize_or("experiment", "min_samples", 10_000)?;
    let mut spec = ensemble_spec(cfg, &bundle)?;
    spec.keep_raw = true;
    let data = module_err!(estimators::run_ensemble(&bundle.sim, &bundle.params, &spec))?;
    let t = *spec.times.last().expect("checkpoints nonempty");
    let t_idx = spec.times.len() - 1;
    let xs = module_err!(data.stats.raw_positions(t_idx))?;
    let ratio = bundle.params.alpha / bundle.params.rho;
    let skip_strict = bundle.sim.compensator_vanishes();
    let clt = module_err!(estimators::clt_test(
        xs,
        t,
        ratio,
        skip_strict,
        level,
        spec.blocks,
        min_samples,
        spec.seed,
    ))?;
    let mut rows = vec![
        GateReport {
            test: "clt_ks_p".into(),
            time: t,
            estimate: clt.ks_p_value,
            se: 0.0,
            target: level,
            pass: clt.ks_pass,
        },
        GateReport {
            test: "sigma_sq".into(),
            time: t,
            estimate: clt.sigma_sq,
            se: clt.sigma_sq_se,
            target: ratio,
            pass: true,
        },
    ];
    match clt.ci_above_ratio {
        Some(above) => rows.push(GateReport {
            test: "sigma_sq_ci_above_ratio".into(),
            time: t,
            estimate: clt.ci.0,
            se: clt.sigma_sq_se,
            target: ratio,
            pass: above,
        }),
        None => rows.push(info_row("sigma_sq_ci_strictness_skipped", 1.0)),
    }
    finish(outdir, "clt.csv", rows, &hash)
}

/// `coupling-check`: coupled runs with one extra particle at the origin;
/// exact order invariants, per-replica CSV of minimum gaps.
pub fn cmd_coupling_check(cfg: &Config, outdir: &Path) -> Result<CommandOutput, CliError> {
    let g = build::build_rate(cfg)?;
    let side = cfg.get_usize("model", "side")?;
    let params = build::build_params(cfg, &g)?;
    let hash = report::config_hash(&cfg.raw);
    let replicas = cfg.get_usize("experiment", "replicas")?;
    let horizon = cfg.get_f64("experiment", "horizon")?;
    let seed = cfg.get_u64_or("experiment", "seed", 1)?;
    let model = module_err!(CoupledModel::new(g, side))?;

    let mut per_replica = Vec::with_capacity(replicas);
    let mut violations = 0u64;
    let mut negative_rates = 0u64;
    let mut min_gap = i64::MAX;
    for r in 0..replicas {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut occ1 = vec![0u32; side];
        for (site, slot) in occ1.iter_mut().enumerate() {
            let kind = if site == 0 {
                MarginalKind::Palm
            } else {
                MarginalKind::Bulk
            };
            *slot = params.sample_marginal(kind, &mut rng) as u32;
        }
        let mut occ2 = occ1.clone();
        occ2[0] += 1;
        let state = module_err!(CoupledState::new(occ1, occ2, &model))?;
        match coupling::run_coupled(state, &model, horizon, &[horizon], &mut rng) {
            Ok(report) => {
                if report.violation.is_some() {
                    violations += 1;
                }
                min_gap = min_gap.min(report.min_gap);
                per_replica.push(format!(
                    "{r},{},{},{}",
                    report.min_gap,
                    report.violation.is_some() as u8,
                    report.events
                ));
            }
            Err(coupling::CouplingError::NegativeCouplingRate { .. }) => {
                negative_rates += 1;
                per_replica.push(format!("{r},,1,"));
            }
            Err(e) => return Err(CliError::Module(e.to_string())),
        }
    }
    report::write_table_csv(
        &report::out_path(outdir, "coupling_replicas.csv"),
        "replica,min_gap,violation,events",
        &per_replica,
        &hash,
    )?;
    let rows = vec![
        GateReport {
            test: "order_violations".into(),
            time: horizon,
            estimate: violations as f64,
            se: 0.0,
            target: 0.0,
            pass: violations == 0,
        },
        GateReport {
            test: "negative_rates".into(),
            time: horizon,
            estimate: negative_rates as f64,
            se: 0.0,
            target: 0.0,
            pass: negative_rates == 0,
        },
        GateReport {
            test: "min_gap".into(),
            time: horizon,
            estimate: if min_gap == i64::MAX {
                0.0
            } else {
                min_gap as f64
            },
            se: 0.0,
            target: 0.0,
            pass: min_gap >= 0,
        },
    ];
    finish(outdir, "coupling.csv", rows, &hash)
}

/// `association`: covariance gates between monotone functions of an
/// increment and of the running position, over adjacent checkpoint pairs.
pub fn cmd_association(cfg: &Config, outdir: &Path) -> Result<CommandOutput, CliError> {
    let bundle = build::build_model(cfg)?;
    let hash = report::config_hash(&cfg.raw);
    let sigma = experiment_sigma(cfg)?;
    let mut spec = ensemble_spec(cfg, &bundle)?;
    spec.keep_raw = true;
    if spec.times.len() < 2 {
        return Err(CliError::Module(
            "association needs at least two checkpoints".into(),
        ));
    }
    let data = module_err!(estimators::run_ensemble(&bundle.sim, &bundle.params, &spec))?;
    let mut rows = Vec::new();
    for i in 0..spec.times.len() - 1 {
        let base = module_err!(data.stats.raw_positions(i))?;
        let later = module_err!(data.stats.raw_positions(i + 1))?;
        rows.extend(estimators::association_test(
            base,
            later,
            spec.blocks,
            sigma,
            spec.times[i],
        ));
    }
    finish(outdir, "association.csv", rows, &hash)
}

/// `identities`: Monte Carlo residuals of the four equilibrium adjoint
/// identities over the bounded test-function library.
pub fn cmd_identities(cfg: &Config, outdir: &Path) -> Result<CommandOutput, CliError> {
    let g = build::build_rate(cfg)?;
    let params = build::build_params(cfg, &g)?;
    let hash = report::config_hash(&cfg.raw);
    let sigma = experiment_sigma(cfg)?;
    let samples = cfg.get_usize_or("experiment", "samples", 1_000_000)?;
    let k_site = cfg.get_i64_or("experiment", "k_site", 2)?;
    let j_off = cfg.get_i64_or("experiment", "j_offset", 1)?;
    let psi_site = cfg.get_i64_or("experiment", "psi_site", k_site)?;
    let seed = cfg.get_u64_or("experiment", "seed", 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for psi in local_fn_library(psi_site) {
        rows.extend(estimators::adjoint_identity_check(
            &g, &params, &psi, k_site, j_off, samples, sigma, &mut rng,
        ));
    }
    finish(outdir, "identities.csv", rows, &hash)
}

/// `spectral-gap`: exact gaps over an (n, M) grid with reversibility gates.
pub fn cmd_spectral_gap(cfg: &Config, outdir: &Path) -> Result<CommandOutput, CliError> {
    let g = build::build_rate(cfg)?;
    let kernel = build::build_kernel(cfg)?;
    if kernel.dim != 1 {
        return Err(CliError::Module(
            "spectral-gap supports one-dimensional kernels".into(),
        ));
    }
    let hash = report::config_hash(&cfg.raw);
    let s_offsets = symmetrize(&kernel);
    let n_list = cfg.get_usize_list_or("experiment", "n_list", &[3, 4, 5])?;
    let m_list = cfg.get_usize_list_or("experiment", "m_list", &[1, 2, 3, 4])?;
    let cap = cfg.get_u64_or("experiment", "state_cap", 200_000)?;
    let dense_threshold = cfg.get_usize_or(
        "experiment",
        "dense_threshold",
        spectral::DEFAULT_DENSE_THRESHOLD,
    )?;

    let mut rows = Vec::new();
    let mut table = Vec::new();
    for &n in &n_list {
        for &m in &m_list {
            let gen = module_err!(spectral::build_generator(&g, &s_offsets, n, m as u64, cap))?;
            let residual = spectral::reversibility_residual(&gen);
            let gap = module_err!(spectral::spectral_gap(&gen, dense_threshold))?;
            let states = gen.q.n;
            table.push(format!(
                "{n},{m},{states},{},{},{}",
                gap.gap,
                gap.w,
                gap.w * gap.w / (n as f64).powi(4)
            ));
            rows.push(GateReport {
                test: format!("reversibility n={n} M={m}"),
                time: 0.0,
                estimate: residual,
                se: 0.0,
                target: 1e-12,
                pass: residual < 1e-12,
            });
        }
    }
    report::write_table_csv(
        &report::out_path(outdir, "spectral_table.csv"),
        "n,M,states,gap,W,W_sq_over_n4",
        &table,
        &hash,
    )?;
    finish(outdir, "spectral.csv", rows, &hash)
}

/// `sp-scan`: equilibrium-averaged squared inverse gaps against n^4.
pub fn cmd_sp_scan(cfg: &Config, outdir: &Path) -> Result<CommandOutput, CliError> {
    let g = build::build_rate(cfg)?;
    let kernel = build::build_kernel(cfg)?;
    let params = build::build_params(cfg, &g)?;
    let hash = report::config_hash(&cfg.raw);
    let s_offsets = symmetrize(&kernel);
    let n_list = cfg.get_usize_list_or("experiment", "n_list", &[2, 3, 4])?;
    let draws = cfg.get_usize_or("experiment", "draws", 200)?;
    let cap = cfg.get_u64_or("experiment", "state_cap", 200_000)?;
    let dense_threshold = cfg.get_usize_or(
        "experiment",
        "dense_threshold",
        spectral::DEFAULT_DENSE_THRESHOLD,
    )?;
    let seed = cfg.get_u64_or("experiment", "seed", 1)?;
    let scan = module_err!(spectral::sp_assumption_scan(
        &g,
        &params,
        &s_offsets,
        &n_list,
        draws,
        cap,
        dense_threshold,
        seed,
    ))?;
    let table: Vec<String> = scan
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                r.n_sites, r.mean_w_sq, r.normalized, r.draws_used, r.truncated_mass
            )
        })
        .collect();
    report::write_table_csv(
        &report::out_path(outdir, "sp_scan_table.csv"),
        "n,mean_w_sq,w_sq_over_n4,draws_used,truncated_mass",
        &table,
        &hash,
    )?;
    // Bounded-trend gate: the normalized sequence must not grow.
    let first = scan.first().map(|r| r.normalized).unwrap_or(f64::NAN);
    let last = scan.last().map(|r| r.normalized).unwrap_or(f64::NAN);
    let gate = cfg.get_f64_or("experiment", "trend_gate", 1.5)?;
    let rows = vec![GateReport {
        test: "sp_trend".into(),
        time: 0.0,
        estimate: last,
        se: 0.0,
        target: first * gate,
        pass: last <= first * gate,
    }];
    finish(outdir, "sp_scan.csv", rows, &hash)
}

/// `ub1`: exact additive-functional variance against the nested resolvent
/// forms on the tagged-frame toy generator.
pub fn cmd_ub1(cfg: &Config, outdir: &Path) -> Result<CommandOutput, CliError> {
    let g = build::build_rate(cfg)?;
    let kernel = build::build_kernel(cfg)?;
    let params = build::build_params(cfg, &g)?;
    let hash = report::config_hash(&cfg.raw);
    let side = cfg.get_usize_or("experiment", "n_sites", 4)?;
    let particles = cfg.get_u64_or("experiment", "particles", 3)?;
    let cap = cfg.get_u64_or("experiment", "state_cap", 200_000)?;
    let t_list = if cfg.has("experiment", "t_list") {
        cfg.get_f64_list("experiment", "t_list")?
    } else {
        vec![1.0, 2.0, 5.0, 10.0]
    };
    let gen = module_err!(spectral::build_reference_generator(
        &g, &kernel, side, particles, cap
    ))?;
    let f = gen.escape_observable(&g, params.alpha / params.rho);
    let rows_data = module_err!(spectral::variance_bound_table(&gen, &f, &t_list))?;
    let table: Vec<String> = rows_data
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.t,
                r.sigma_t_sq,
                r.resolvent_full,
                r.resolvent_sym,
                r.h_minus_one,
                r.c_one,
                if r.ordering_ok { "pass" } else { "FAIL" }
            )
        })
        .collect();
    report::write_table_csv(
        &report::out_path(outdir, "ub1_table.csv"),
        "t,sigma_t_sq,resolvent_full,resolvent_sym,h_minus_one,c_one,ordering",
        &table,
        &hash,
    )?;
    let mut rows: Vec<GateReport> = rows_data
        .iter()
        .map(|r| GateReport {
            test: "resolvent_ordering".into(),
            time: r.t,
            estimate: r.resolvent_full,
            se: 0.0,
            target: r.resolvent_sym,
            pass: r.ordering_ok,
        })
        .collect();
    let c_max = rows_data.iter().map(|r| r.c_one).fold(f64::MIN, f64::max);
    rows.push(GateReport {
        test: "c_one_finite".into(),
        time: 0.0,
        estimate: c_max,
        se: 0.0,
        target: f64::INFINITY,
        pass: c_max.is_finite(),
    });
    let residual = gen.invariance_residual();
    rows.push(GateReport {
        test: "stationarity_residual".into(),
        time: 0.0,
        estimate: residual,
        se: 0.0,
        target: 1e-12,
        pass: residual < 1e-12,
    });
    finish(outdir, "ub1.csv", rows, &hash)
}

fn symmetrize(kernel: &zrp_core::model::JumpKernel) -> Vec<(i64, f64)> {
    let mut map: BTreeMap<i64, f64> = BTreeMap::new();
    for (offset, p) in &kernel.entries {
        let j = offset[0];
        *map.entry(j).or_insert(0.0) += 0.5 * p;
        *map.entry(-j).or_insert(0.0) += 0.5 * p;
    }
    map.into_iter().filter(|(_, s)| *s > 0.0).collect()
}
