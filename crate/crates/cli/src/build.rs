//! Construct validated model objects from the `[model]` config section.

use crate::config::{Config, ConfigError};
use zrp_core::equilibrium::{EnsembleKind, ModelParams};
use zrp_core::model::{
    parse_kernel_text, validate_kernel, validate_rate, JumpKernel, RateFunction, RateSpec, Torus,
};
use zrp_core::rate_expr::RateExpr;
use zrp_core::sim::{DriftFormula, SimModel};

pub struct ModelBundle {
    pub g: RateFunction,
    pub kernel: JumpKernel,
    pub torus: Torus,
    pub params: ModelParams,
    pub ensemble: EnsembleKind,
    pub sim: SimModel,
}

fn config_err(cfg: &Config, section: &str, key: &str, message: String) -> ConfigError {
    ConfigError {
        file: cfg.path.clone(),
        line: cfg.line_of(section, key),
        message,
    }
}

pub fn build_rate(cfg: &Config) -> Result<RateFunction, ConfigError> {
    let text = cfg.get_str("model", "rate")?;
    let probe_max = cfg.get_u64_or("model", "probe_max", 64)?;
    let expr = RateExpr::parse(text)
        .map_err(|e| config_err(cfg, "model", "rate", format!("rate `{text}`: {e}")))?;
    validate_rate(RateSpec::Expr(expr), probe_max)
        .map_err(|e| config_err(cfg, "model", "rate", format!("rate `{text}`: {e}")))
}

pub fn build_kernel(cfg: &Config) -> Result<JumpKernel, ConfigError> {
    let dim = cfg.get_usize_or("model", "dim", 1)?;
    let text = if cfg.has("model", "kernel_file") {
        let path = cfg.get_str("model", "kernel_file")?;
        std::fs::read_to_string(path).map_err(|e| {
            config_err(
                cfg,
                "model",
                "kernel_file",
                format!("cannot read kernel file `{path}`: {e}"),
            )
        })?
    } else {
        // Inline form: semicolons separate table lines.
        cfg.get_str("model", "kernel")?.replace(';', "\n")
    };
    let entries = parse_kernel_text(&text, dim)
        .map_err(|e| config_err(cfg, "model", "kernel", e.to_string()))?;
    validate_kernel(entries, dim).map_err(|e| config_err(cfg, "model", "kernel", e.to_string()))
}

pub fn build_params(cfg: &Config, g: &RateFunction) -> Result<ModelParams, ConfigError> {
    let tail_tol = cfg.get_f64_or("model", "tail_tol", 1e-12)?;
    let has_alpha = cfg.has("model", "alpha");
    let has_rho = cfg.has("model", "rho");
    if has_alpha == has_rho {
        return Err(config_err(
            cfg,
            "model",
            if has_alpha { "alpha" } else { "rho" },
            "exactly one of `alpha` or `rho` must be set in [model]".into(),
        ));
    }
    if has_alpha {
        let alpha = cfg.get_f64("model", "alpha")?;
        ModelParams::new(g, alpha, tail_tol)
            .map_err(|e| config_err(cfg, "model", "alpha", e.to_string()))
    } else {
        let rho = cfg.get_f64("model", "rho")?;
        ModelParams::from_density(g, rho, tail_tol)
            .map_err(|e| config_err(cfg, "model", "rho", e.to_string()))
    }
}

pub fn build_ensemble(cfg: &Config) -> Result<EnsembleKind, ConfigError> {
    match cfg.get_str_or("model", "ensemble", "Q") {
        "R" => Ok(EnsembleKind::Product),
        "Q" => Ok(EnsembleKind::Palm),
        "Qprime" => Ok(EnsembleKind::Primed),
        other => Err(config_err(
            cfg,
            "model",
            "ensemble",
            format!("ensemble must be R, Q, or Qprime (got `{other}`)"),
        )),
    }
}

pub fn build_model(cfg: &Config) -> Result<ModelBundle, ConfigError> {
    let g = build_rate(cfg)?;
    let kernel = build_kernel(cfg)?;
    let dim = kernel.dim;
    let side = cfg.get_usize("model", "side")?;
    let torus = Torus::new(dim, side, kernel.range)
        .map_err(|e| config_err(cfg, "model", "side", e.to_string()))?;
    let params = build_params(cfg, &g)?;
    let ensemble = build_ensemble(cfg)?;
    let mut sim = SimModel::new(g.clone(), kernel.clone(), torus, &params);
    if cfg.get_bool_or("model", "f_literal", false)? {
        sim.drift_formula = DriftFormula::Literal;
    }
    sim.event_budget = cfg.get_u64_or("experiment", "event_cap", 1_000_000_000)?;
    Ok(ModelBundle {
        g,
        kernel,
        torus,
        params,
        ensemble,
        sim,
    })
}

/// Enforce `require_id = true` preconditions.
pub fn enforce_id(cfg: &Config, g: &RateFunction) -> Result<(), ConfigError> {
    if cfg.get_bool_or("model", "require_id", false)? && !g.is_id {
        return Err(config_err(
            cfg,
            "model",
            "require_id",
            "rate is not (ID): needs g nondecreasing and g(k)/k nonincreasing".into(),
        ));
    }
    Ok(())
}
