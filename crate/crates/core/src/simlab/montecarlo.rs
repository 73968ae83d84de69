//! Deterministic Monte Carlo driver.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DesignKind, ScenarioConfig};
use super::dgp::{simulate, SimDataset};
use super::enumerate::{second_stage_spec, true_coefficients};
use super::tsls::{oracle_estimates, tsls_pooled_from_averages};
use crate::diagnostics::{md_bias_bound, ResidualKind};
use crate::error::{Error, Result};
use crate::first_stage::{
    estimate_alt_from_averages, AuxiliaryDesign, AuxiliarySource, GroupEstimate,
};
use crate::gmm_estimator::{fit_gmm_from_estimates, GmmWeights};
use crate::md_estimator::{fit_md, FitResult, OracleSpec};
use crate::moments::{MomentAverages, DEFAULT_RANK_TOL};

/// Estimators the driver can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    /// Plug-in first stage, MD second stage (group-wise TSLS for IV data).
    Md,
    /// Known population Jacobian first stage, MD second stage.
    MdAlt,
    /// Identity-weighted pooled GMM.
    Gmm,
    TslsPooled,
    /// MD on the true group parameters.
    Oracle,
}

impl EstimatorTag {
    pub const ALL: [EstimatorTag; 5] = [
        EstimatorTag::Md,
        EstimatorTag::MdAlt,
        EstimatorTag::Gmm,
        EstimatorTag::TslsPooled,
        EstimatorTag::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorTag::Md => "md",
            EstimatorTag::MdAlt => "md_alt",
            EstimatorTag::Gmm => "gmm",
            EstimatorTag::TslsPooled => "tsls_pooled",
            EstimatorTag::Oracle => "oracle",
        }
    }
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = EstimatorTag::ALL.iter().map(|t| t.as_str()).collect();
                Error::Config(format!(
                    "unknown estimator `{s}`; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Summary of one coefficient of one estimator over all replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub estimator: EstimatorTag,
    pub coefficient: String,
    pub replications: usize,
    /// Replications in which the estimator failed; excluded from the moments.
    pub failures: usize,
    pub mean: f64,
    pub sd: f64,
    pub mc_se: f64,
    pub truth: f64,
    pub bias: f64,
    /// Share of 95% intervals (HC0 standard errors) covering the truth.
    pub coverage: f64,
    pub mean_dropped_share: f64,
    /// Mean absolute distance to the oracle estimate.
    pub mean_abs_diff_oracle: f64,
}

/// One estimator's output in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationDraw {
    pub replication: usize,
    pub estimator: EstimatorTag,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub dropped_share: f64,
    pub error: Option<String>,
}

/// Selected-versus-all fit on the true group parameters, against the bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub replication: usize,
    pub dropped_share: f64,
    /// `||(d alpha, d B)||_F`.
    pub realized: f64,
    /// `None` when the selected groups do not identify the fit.
    pub bound: Option<f64>,
}

impl BoundCheck {
    pub fn violated(&self, slack: f64) -> bool {
        self.bound.is_some_and(|b| self.realized > b + slack)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub scenario: String,
    pub replications: usize,
    pub truth: Vec<f64>,
    pub summaries: Vec<McSummary>,
    pub draws: Vec<ReplicationDraw>,
    pub bound_checks: Vec<BoundCheck>,
}

impl McResult {
    pub fn summary(&self, estimator: EstimatorTag, coefficient: usize) -> Option<&McSummary> {
        self.summaries
            .iter()
            .filter(|s| s.estimator == estimator)
            .nth(coefficient)
    }

    pub fn bound_violations(&self, slack: f64) -> usize {
        self.bound_checks
            .iter()
            .filter(|c| c.violated(slack))
            .count()
    }
}

fn check_estimators(cfg: &ScenarioConfig, estimators: &[EstimatorTag]) -> Result<()> {
    if estimators.is_empty() {
        return Err(Error::Config("no estimators requested".into()));
    }
    for e in estimators {
        match e {
            EstimatorTag::TslsPooled if cfg.design != DesignKind::Iv => {
                return Err(Error::Config(format!(
                    "tsls_pooled needs an IV scenario, `{}` is not",
                    cfg.name
                )))
            }
            EstimatorTag::Gmm if cfg.design == DesignKind::Iv => {
                return Err(Error::Config(
                    "gmm is run on difference designs only".into(),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

struct Outcome {
    draws: Vec<ReplicationDraw>,
    oracle: Option<DVector<f64>>,
    bound: BoundCheck,
}

fn run_estimator(
    tag: EstimatorTag,
    data: &SimDataset,
    avgs: &[MomentAverages],
    estimates: &[GroupEstimate],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
    oracle: &Result<FitResult>,
) -> Result<FitResult> {
    match tag {
        EstimatorTag::Md => fit_md(estimates, policies, spec),
        EstimatorTag::MdAlt => {
            let alt = avgs
                .iter()
                .enumerate()
                .map(|(g, a)| {
                    let aux = AuxiliaryDesign::new(
                        data.population_h2(g),
                        AuxiliarySource::Modeled,
                        DEFAULT_RANK_TOL,
                    )?;
                    estimate_alt_from_averages(
                        &data.group_ids[g],
                        data.groups[g].n(),
                        a.clone(),
                        &aux,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            fit_md(&alt, policies, spec)
        }
        EstimatorTag::Gmm => {
            fit_gmm_from_estimates(estimates, policies, spec, &GmmWeights::Identity)
        }
        EstimatorTag::TslsPooled => {
            let records: Vec<_> = data
                .group_ids
                .iter()
                .zip(&data.groups)
                .zip(avgs)
                .map(|((id, g), a)| (id.clone(), g.n(), a.clone()))
                .collect();
            tsls_pooled_from_averages(&records, policies, spec)
        }
        EstimatorTag::Oracle => oracle.clone(),
    }
}

fn replicate(
    cfg: &ScenarioConfig,
    estimators: &[EstimatorTag],
    spec: &OracleSpec,
    r: usize,
) -> Result<Outcome> {
    let data = simulate(cfg, r as u64)?;
    let used = cfg.used_policies();
    let policies = data.policy_columns(&used);
    let avgs = data.moment_averages();
    let estimates = avgs
        .iter()
        .zip(&data.group_ids)
        .zip(&data.groups)
        .map(|((a, id), g)| {
            GroupEstimate::from_averages(id.as_str(), g.n(), a.clone(), DEFAULT_RANK_TOL)
        })
        .collect::<Result<Vec<_>>>()?;
    let oracle = fit_md(&oracle_estimates(&data.true_thetas, None), &policies, spec);

    let g = data.groups.len() as f64;
    let draws = estimators
        .iter()
        .map(
            |&tag| match run_estimator(tag, &data, &avgs, &estimates, &policies, spec, &oracle) {
                Ok(fit) => ReplicationDraw {
                    replication: r,
                    estimator: tag,
                    estimates: fit.b_coefficients.iter().cloned().collect(),
                    std_errors: fit.coefficient_std_errors(spec).iter().cloned().collect(),
                    dropped_share: fit.n_dropped as f64 / g,
                    error: None,
                },
                Err(e) => ReplicationDraw {
                    replication: r,
                    estimator: tag,
                    estimates: vec![],
                    std_errors: vec![],
                    dropped_share: f64::NAN,
                    error: Some(e.to_string()),
                },
            },
        )
        .collect();

    let omegas: Vec<bool> = estimates.iter().map(|e| e.omega).collect();
    let bound = bound_check(r, &data, &omegas, &policies, spec, &oracle);
    Ok(Outcome {
        draws,
        oracle: oracle.ok().map(|f| f.b_coefficients),
        bound,
    })
}

fn bound_check(
    r: usize,
    data: &SimDataset,
    omegas: &[bool],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
    full: &Result<FitResult>,
) -> BoundCheck {
    let dropped = omegas.iter().filter(|o| !**o).count();
    let dropped_share = dropped as f64 / omegas.len() as f64;
    let mut check = BoundCheck {
        replication: r,
        dropped_share,
        realized: 0.0,
        bound: None,
    };
    let Ok(full) = full else { return check };
    let residuals: Vec<DVector<f64>> = full
        .groups
        .iter()
        .filter_map(|g| g.residual.clone())
        .collect();
    let Ok(report) = md_bias_bound(policies, omegas, &residuals, spec, ResidualKind::Oracle) else {
        return check;
    };
    if dropped == 0 {
        check.bound = Some(report.bound_value);
        return check;
    }
    let Ok(selected) = fit_md(
        &oracle_estimates(&data.true_thetas, Some(omegas)),
        policies,
        spec,
    ) else {
        return check;
    };
    let da = (&selected.alpha_hat - &full.alpha_hat).norm_squared();
    let db = (&selected.b_hat - &full.b_hat).norm_squared();
    check.realized = (da + db).sqrt();
    check.bound = Some(report.bound_value);
    check
}

/// Runs `replications` draws of a scenario through each estimator.
/// Replication `r` uses its own generator stream, and every reduction runs in
/// replication order, so results do not depend on the thread count.
pub fn run_monte_carlo(
    cfg: &ScenarioConfig,
    estimators: &[EstimatorTag],
    replications: usize,
) -> Result<McResult> {
    cfg.validate()?;
    if replications == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    check_estimators(cfg, estimators)?;
    let spec = second_stage_spec(cfg)?;
    let truth = true_coefficients(cfg)?;

    let outcomes: Vec<Outcome> = (0..replications)
        .into_par_iter()
        .map(|r| replicate(cfg, estimators, &spec, r))
        .collect::<Result<_>>()?;

    let names: Vec<String> = (0..spec.m()).map(|j| format!("beta_{}", j + 1)).collect();
    let mut summaries = Vec::new();
    for (e_idx, &tag) in estimators.iter().enumerate() {
        for (j, name) in names.iter().enumerate() {
            summaries.push(summarize(tag, name, j, truth[j], &outcomes, e_idx));
        }
    }
    let mut draws = Vec::with_capacity(replications * estimators.len());
    let mut bound_checks = Vec::with_capacity(replications);
    for o in outcomes {
        draws.extend(o.draws);
        bound_checks.push(o.bound);
    }
    Ok(McResult {
        scenario: cfg.name.clone(),
        replications,
        truth: truth.iter().cloned().collect(),
        summaries,
        draws,
        bound_checks,
    })
}

fn summarize(
    tag: EstimatorTag,
    name: &str,
    j: usize,
    truth: f64,
    outcomes: &[Outcome],
    e_idx: usize,
) -> McSummary {
    let mut values = Vec::new();
    let mut covered = 0usize;
    let mut dropped = 0.0;
    let mut abs_diff = 0.0;
    let mut with_oracle = 0usize;
    for o in outcomes {
        let d = &o.draws[e_idx];
        if d.error.is_some() {
            continue;
        }
        let est = d.estimates[j];
        values.push(est);
        if (est - truth).abs() <= 1.959_963_984_540_054 * d.std_errors[j] {
            covered += 1;
        }
        dropped += d.dropped_share;
        if let Some(or) = &o.oracle {
            abs_diff += (est - or[j]).abs();
            with_oracle += 1;
        }
    }
    let ok = values.len();
    let nan = f64::NAN;
    let mean = if ok > 0 {
        values.iter().sum::<f64>() / ok as f64
    } else {
        nan
    };
    let sd = match ok {
        0 => nan,
        1 => 0.0,
        _ => (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (ok - 1) as f64).sqrt(),
    };
    McSummary {
        estimator: tag,
        coefficient: name.to_string(),
        replications: outcomes.len(),
        failures: outcomes.len() - ok,
        mean,
        sd,
        mc_se: if ok > 0 { sd / (ok as f64).sqrt() } else { nan },
        truth,
        bias: mean - truth,
        coverage: if ok > 0 {
            covered as f64 / ok as f64
        } else {
            nan
        },
        mean_dropped_share: if ok > 0 { dropped / ok as f64 } else { nan },
        mean_abs_diff_oracle: if with_oracle > 0 {
            abs_diff / with_oracle as f64
        } else {
            nan
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlab::presets::preset;

    fn small(name: &str) -> ScenarioConfig {
        let mut cfg = preset(name).unwrap();
        cfg.groups = 60;
        cfg
    }

    #[test]
    fn single_replication_has_zero_sd() {
        let cfg = small("gmm_bias_demo");
        let res = run_monte_carlo(&cfg, &[EstimatorTag::Md, EstimatorTag::Oracle], 1).unwrap();
        let s = res.summary(EstimatorTag::Md, 0).unwrap();
        assert_eq!(s.sd, 0.0);
        assert_eq!(s.mc_se, 0.0);
        assert_eq!(s.mean, res.draws[0].estimates[0]);
        assert!(s.coverage == 0.0 || s.coverage == 1.0);
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let cfg = small("selection_demo");
        let tags = [
            EstimatorTag::Md,
            EstimatorTag::MdAlt,
            EstimatorTag::Gmm,
            EstimatorTag::Oracle,
        ];
        let serial = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| run_monte_carlo(&cfg, &tags, 12).unwrap());
        let parallel = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| run_monte_carlo(&cfg, &tags, 12).unwrap());
        assert_eq!(serial, parallel);
    }

    #[test]
    fn mismatched_estimator_is_a_config_error() {
        let cfg = small("gmm_bias_demo");
        assert!(matches!(
            run_monte_carlo(&cfg, &[EstimatorTag::TslsPooled], 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_monte_carlo(&cfg, &[EstimatorTag::Md], 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            run_monte_carlo(&cfg, &[], 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tags_round_trip_through_strings() {
        for t in EstimatorTag::ALL {
            assert_eq!(t.as_str().parse::<EstimatorTag>().unwrap(), t);
        }
        assert!("ols".parse::<EstimatorTag>().is_err());
    }

    #[test]
    fn noiseless_constant_take_up_matches_oracle() {
        let mut cfg = small("asymptotic_demo");
        cfg.noise.sigma2 = 0.0;
        let res = run_monte_carlo(&cfg, &[EstimatorTag::Md, EstimatorTag::Oracle], 3).unwrap();
        let s = res.summary(EstimatorTag::Md, 0).unwrap();
        assert!(s.mean_abs_diff_oracle < 1e-10);
    }
}
