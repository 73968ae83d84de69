//! Subcommand drivers: each turns a resolved config into a [`Report`].

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use mdgmm::diagnostics::{
    conditioning_summary, md_bias_bound, selection_report, BoundReport, ResidualKind,
};
use mdgmm::first_stage::{
    estimate_group_alt, estimate_groups, AuxiliaryDesign, AuxiliarySource, GroupEstimate,
};
use mdgmm::gmm_estimator::{fit_gmm_from_estimates, GmmWeights};
use mdgmm::linalg::singular_value_range;
use mdgmm::md_estimator::{fit_md, FitResult, OracleSpec};
use mdgmm::simlab::{
    gmm_identity_plim, md_plim, omitted_variable_bias, run_monte_carlo, tsls_bias, tsls_pooled,
    DesignKind, EstimatorTag, McResult, ScenarioConfig,
};
use nalgebra::DVector;

use crate::config::{Method, RunConfig};
use crate::error::{CliError, Result};
use crate::export::export_replication;
use crate::ingest::{ingest_auxiliary, load_dataset, Dataset, MomentKind};
use crate::report::{
    BoundCheckSummary, CoefficientRow, Conditioning, EnumeratedLimits, GroupRow, Report,
    SimulationBlock,
};

pub const DEFAULT_REPLICATIONS: usize = 100;

/// Slack allowed when checking simulated distances against the bound.
pub const BOUND_SLACK: f64 = 1e-9;

fn load(cfg: &RunConfig) -> Result<(Dataset, OracleSpec)> {
    let paths = cfg.require_data()?;
    let data = load_dataset(&paths.units, &paths.policies)?;
    let k = data.units.samples[0].k().unwrap_or(2);
    let p = data.policies[0].len();
    let spec = cfg.design.spec(k, p, data.units.weights.as_deref())?;
    Ok((data, spec))
}

fn conditioning(estimates: &[GroupEstimate]) -> Conditioning {
    let selected: Vec<GroupEstimate> = estimates.iter().filter(|e| e.omega).cloned().collect();
    let summary = conditioning_summary(&selected);
    let mut sigma: Vec<f64> = selected
        .iter()
        .map(|e| singular_value_range(&e.h2_hat).0)
        .collect();
    sigma.sort_by(f64::total_cmp);
    let median = match sigma.len() {
        0 => None,
        n if n % 2 == 1 => Some(sigma[n / 2]),
        n => Some(0.5 * (sigma[n / 2 - 1] + sigma[n / 2])),
    };
    Conditioning {
        selected: selected.len(),
        min_sigma: sigma.first().copied(),
        median_sigma: median,
        min_inverse_condition: summary
            .min_inverse_condition
            .is_finite()
            .then_some(summary.min_inverse_condition),
        median_inverse_condition: summary
            .median_inverse_condition
            .is_finite()
            .then_some(summary.median_inverse_condition),
        ill_conditioned: summary.ill_conditioned,
    }
}

/// Bound with residuals of a plug-in MD fit standing in for the oracle ones.
fn proxy_bound(
    estimates: &[GroupEstimate],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
    md: Option<&FitResult>,
) -> std::result::Result<BoundReport, mdgmm::Error> {
    let owned;
    let fit = match md {
        Some(f) => f,
        None => {
            owned = fit_md(estimates, policies, spec)?;
            &owned
        }
    };
    let residuals: Vec<DVector<f64>> = fit
        .groups
        .iter()
        .filter_map(|g| g.residual.clone())
        .collect();
    let omegas: Vec<bool> = estimates.iter().map(|e| e.omega).collect();
    md_bias_bound(policies, &omegas, &residuals, spec, ResidualKind::Proxy)
}

fn group_rows(estimates: &[GroupEstimate], fit: Option<&FitResult>) -> Vec<GroupRow> {
    let residuals: HashMap<usize, &DVector<f64>> = fit
        .map(|f| {
            f.groups
                .iter()
                .filter_map(|g| g.residual.as_ref().map(|r| (g.index, r)))
                .collect()
        })
        .unwrap_or_default();
    estimates
        .iter()
        .enumerate()
        .map(|(i, e)| GroupRow {
            group_id: e.group_id.clone(),
            n_g: e.n_g,
            omega: e.omega,
            theta_hat: e.theta_hat.as_ref().map(|t| t.iter().copied().collect()),
            residual: residuals.get(&i).map(|r| r.iter().copied().collect()),
        })
        .collect()
}

fn alt_estimates(cfg: &RunConfig, data: &Dataset, k: usize) -> Result<Vec<GroupEstimate>> {
    let path = cfg.require_data()?.auxiliary.as_ref().ok_or_else(|| {
        CliError::Config("method md_alt needs `data.auxiliary` with population Jacobians".into())
    })?;
    let table = ingest_auxiliary(path, k)?;
    data.units
        .samples
        .iter()
        .map(|s| {
            let h2 = table.get(s.group_id()).ok_or_else(|| CliError::Schema {
                file: path.display().to_string(),
                message: format!("group `{}` has no auxiliary row", s.group_id()),
            })?;
            let aux = AuxiliaryDesign::new(h2.clone(), AuxiliarySource::Supplied, cfg.rank_tol)?;
            Ok(estimate_group_alt(s, &aux)?)
        })
        .collect()
}

pub fn cmd_estimate(cfg: RunConfig) -> Result<Report> {
    let start = Instant::now();
    let method = cfg.require_method()?;
    let (data, spec) = load(&cfg)?;
    let plug_in = estimate_groups(&data.units.samples, cfg.rank_tol)?;
    let policies = &data.policies;

    let md_fit = match method {
        Method::Md => Some(fit_md(&plug_in, policies, &spec)?),
        _ => None,
    };
    let (fit, table_estimates) = match method {
        Method::Md => (md_fit.clone().expect("fitted"), plug_in.clone()),
        Method::MdAlt => {
            let alt = alt_estimates(&cfg, &data, spec.k())?;
            (fit_md(&alt, policies, &spec)?, alt)
        }
        Method::Gmm => (
            fit_gmm_from_estimates(&plug_in, policies, &spec, &GmmWeights::Identity)?,
            plug_in.clone(),
        ),
        Method::Tsls => {
            if data.units.kind != MomentKind::Iv {
                return Err(CliError::Config(
                    "method tsls needs an instrument column `z` in the units file".into(),
                ));
            }
            (
                tsls_pooled(&data.units.samples, policies, &spec)?,
                plug_in.clone(),
            )
        }
    };

    let mut report = Report::new("estimate", cfg.clone());
    report.method = Some(method.as_str().to_string());
    report.coefficients = fit
        .coefficients(&spec)
        .into_iter()
        .map(|c| CoefficientRow {
            name: c.name,
            estimate: c.estimate,
            std_error: c.std_error,
        })
        .collect();
    report.pseudo_inverse = fit.pseudo_inverse;
    report.selection = Some(selection_report(&plug_in));
    match proxy_bound(&plug_in, policies, &spec, md_fit.as_ref()) {
        Ok(b) => report.bias_bound = Some(b),
        Err(e) => report.warnings.push(format!("bias bound unavailable: {e}")),
    }
    report.conditioning = Some(conditioning(&plug_in));
    if cfg.per_group {
        report.groups = Some(group_rows(&table_estimates, Some(&fit)));
    }
    report.timing.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

pub fn cmd_diagnose(cfg: RunConfig) -> Result<Report> {
    let start = Instant::now();
    let (data, spec) = load(&cfg)?;
    let estimates = estimate_groups(&data.units.samples, cfg.rank_tol)?;
    let mut report = Report::new("diagnose", cfg.clone());
    report.selection = Some(selection_report(&estimates));
    report.conditioning = Some(conditioning(&estimates));
    let md = fit_md(&estimates, &data.policies, &spec);
    match md
        .as_ref()
        .map_err(Clone::clone)
        .and_then(|f| proxy_bound(&estimates, &data.policies, &spec, Some(f)))
    {
        Ok(b) => report.bias_bound = Some(b),
        Err(e) => report.warnings.push(format!("bias bound unavailable: {e}")),
    }
    if cfg.per_group {
        report.groups = Some(group_rows(&estimates, md.as_ref().ok()));
    }
    report.timing.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

pub fn default_estimators(design: DesignKind) -> Vec<EstimatorTag> {
    match design {
        DesignKind::Iv => vec![
            EstimatorTag::Md,
            EstimatorTag::MdAlt,
            EstimatorTag::TslsPooled,
            EstimatorTag::Oracle,
        ],
        _ => vec![
            EstimatorTag::Md,
            EstimatorTag::MdAlt,
            EstimatorTag::Gmm,
            EstimatorTag::Oracle,
        ],
    }
}

/// Scenario named or defined by the config, with the run seed applied.
pub fn resolve_scenario(cfg: &RunConfig) -> Result<ScenarioConfig> {
    let choice = cfg.scenario.as_ref().ok_or_else(|| {
        CliError::Config("`scenario` is required: a preset name or a scenario object".into())
    })?;
    let mut scenario = choice.resolve()?;
    if let Some(seed) = cfg.seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

fn enumerated(scenario: &ScenarioConfig) -> EnumeratedLimits {
    let coefs = |v: &DVector<f64>| v.iter().copied().collect::<Vec<_>>();
    EnumeratedLimits {
        md_bias: md_plim(scenario).ok().map(|p| coefs(&p.bias_coefficients)),
        gmm_bias: gmm_identity_plim(scenario)
            .ok()
            .map(|p| coefs(&p.bias_coefficients)),
        tsls_bias: tsls_bias(scenario).ok().map(|t| t.bias),
        omitted_variable_bias: omitted_variable_bias(scenario).ok().map(|o| o.bias),
    }
}

fn bound_summary(mc: &McResult) -> BoundCheckSummary {
    let checked = mc.bound_checks.iter().filter(|b| b.bound.is_some()).count();
    let max_ratio = mc
        .bound_checks
        .iter()
        .filter_map(|b| b.bound.filter(|v| *v > 0.0).map(|v| b.realized / v))
        .fold(None, |acc: Option<f64>, r| {
            Some(acc.map_or(r, |a| a.max(r)))
        });
    BoundCheckSummary {
        checked,
        skipped: mc.bound_checks.len() - checked,
        violations: mc.bound_violations(BOUND_SLACK),
        max_ratio,
    }
}

pub fn cmd_simulate(cfg: RunConfig, export_dir: Option<&Path>) -> Result<Report> {
    let start = Instant::now();
    let scenario = resolve_scenario(&cfg)?;
    let replications = cfg.replications.unwrap_or(DEFAULT_REPLICATIONS);
    let estimators = cfg
        .estimators
        .clone()
        .unwrap_or_else(|| default_estimators(scenario.design));
    let mc = run_monte_carlo(&scenario, &estimators, replications)?;
    if let Some(dir) = export_dir {
        export_replication(&scenario, 0, dir)?;
    }
    let mut report = Report::new("simulate", cfg.clone());
    report.simulation = Some(SimulationBlock {
        bound_checks: bound_summary(&mc),
        enumerated: enumerated(&scenario),
        replications: mc.replications,
        truth: mc.truth,
        summaries: mc.summaries,
        scenario,
    });
    report.timing.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
