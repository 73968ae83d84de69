//! Exact probability limits of the simulated estimators, obtained by
//! enumerating the finite support of a scenario.

use nalgebra::{DMatrix, DVector};

use super::config::{DesignKind, ScenarioConfig};
use super::dgp::{composition_take_up, composition_treated_mean};
use crate::error::{Error, Result};
use crate::gmm_estimator::{gmm_plim, DiscreteScenario, PlimResult, ScenarioState};
use crate::md_estimator::OracleSpec;

/// Second-stage design used for a scenario: effect coordinate moved by the
/// used policy columns, group-specific first coordinate.
pub fn second_stage_spec(cfg: &ScenarioConfig) -> Result<OracleSpec> {
    OracleSpec::did_effect(cfg.used_policies().len())
}

/// Slope of the group effect on every policy column. Composition scenarios
/// add the shift of the treated-unit mean trait effect, which is linear in the
/// binary `W1`.
pub fn true_effect_slopes(cfg: &ScenarioConfig) -> Result<DVector<f64>> {
    cfg.validate()?;
    let mut b = DVector::from_column_slice(&cfg.beta);
    if cfg.design == DesignKind::Composition {
        if !matches!(
            cfg.policy_law,
            super::config::PolicyLaw::CorrelatedPair { .. }
        ) {
            return Err(Error::UnsupportedScenario(
                "composition truth needs binary W1".into(),
            ));
        }
        b[0] += composition_treated_mean(cfg, &[1.0, 0.0])?
            - composition_treated_mean(cfg, &[0.0, 0.0])?;
    }
    Ok(b)
}

/// True coefficients of the used policy columns.
pub fn true_coefficients(cfg: &ScenarioConfig) -> Result<DVector<f64>> {
    let b = true_effect_slopes(cfg)?;
    let used = cfg.used_policies();
    Ok(DVector::from_fn(used.len(), |i, _| b[used[i]]))
}

/// One point of the group-level support.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub delta: f64,
    pub alpha: f64,
    pub w: Vec<f64>,
    pub n: usize,
    /// Unit take-up probability (treatment, or compliance for IV).
    pub pi: f64,
    /// Group effect among the treated.
    pub tau: f64,
    pub prob: f64,
}

/// Enumerates `(delta, alpha, W, n)` with probabilities.
pub fn group_states(cfg: &ScenarioConfig) -> Result<Vec<GroupState>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let sizes = cfg.n_law.support();
    let policies = cfg.policy_law.support();
    for (delta, pd) in cfg.lambda_law.support() {
        for (alpha, pa) in cfg.alpha_law.support() {
            for (w, pw) in &policies {
                let direct: f64 = cfg.beta.iter().zip(w).map(|(b, x)| b * x).sum();
                let (pi, tau) = match cfg.design {
                    DesignKind::Composition => (
                        composition_take_up(cfg, w),
                        alpha + direct + composition_treated_mean(cfg, w)?,
                    ),
                    _ => (cfg.selection.prob(alpha, w, 0.0), alpha + direct),
                };
                for &(n, pn) in &sizes {
                    out.push(GroupState {
                        delta,
                        alpha,
                        w: w.clone(),
                        n,
                        pi,
                        tau,
                        prob: pd * pa * pw * pn,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Probability that a group of `n` units with take-up `pi` has both treated
/// and untreated units.
pub fn selection_probability(pi: f64, n: usize) -> f64 {
    (1.0 - pi.powi(n as i32) - (1.0 - pi).powi(n as i32)).clamp(0.0, 1.0)
}

fn used_w(cfg: &ScenarioConfig, w: &[f64]) -> DVector<f64> {
    let used = cfg.used_policies();
    DVector::from_fn(used.len(), |i, _| w[used[i]])
}

/// `(delta, tau - b' W_used)`: everything not explained by the used columns.
fn state_alpha(s: &GroupState, b_used: &DVector<f64>, w_used: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![s.delta, s.tau - b_used.dot(w_used)])
}

fn scenario_from(cfg: &ScenarioConfig, states: Vec<ScenarioState>) -> Result<DiscreteScenario> {
    let spec = second_stage_spec(cfg)?;
    let b_used = true_coefficients(cfg)?;
    let total: f64 = states.iter().map(|s| s.prob).sum();
    let states = states
        .into_iter()
        .filter(|s| s.prob > 0.0)
        .map(|mut s| {
            s.prob /= total;
            s
        })
        .collect();
    DiscreteScenario::new(states, spec.b_from_coefficients(b_used.as_slice()), spec)
}

/// Population scenario faced by plug-in MD: a group enters with the
/// probability that its sample Jacobian is invertible.
pub fn induced_md_scenario(cfg: &ScenarioConfig) -> Result<DiscreteScenario> {
    if cfg.design == DesignKind::Iv {
        return Err(Error::UnsupportedScenario(
            "selection probabilities are enumerated for difference designs only".into(),
        ));
    }
    let b_used = true_coefficients(cfg)?;
    let states = group_states(cfg)?
        .into_iter()
        .map(|s| {
            let w = used_w(cfg, &s.w);
            let p_sel = selection_probability(s.pi, s.n);
            ScenarioState {
                alpha: state_alpha(&s, &b_used, &w),
                w,
                a_tilde: DMatrix::identity(2, 2) * p_sel,
                prob: s.prob,
            }
        })
        .collect();
    scenario_from(cfg, states)
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    if p <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    (ln_binomial(n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p()).exp()
}

/// Population scenario faced by identity-weighted pooled GMM in a difference
/// design: the effective weight of a group is `H2' H2` at its realised
/// treated share, so states also range over the number treated.
pub fn induced_gmm_scenario(cfg: &ScenarioConfig) -> Result<DiscreteScenario> {
    if cfg.design != DesignKind::Did {
        return Err(Error::UnsupportedScenario(
            "GMM limits are enumerated for the plain difference design".into(),
        ));
    }
    let b_used = true_coefficients(cfg)?;
    let mut states = Vec::new();
    for s in group_states(cfg)? {
        let w = used_w(cfg, &s.w);
        let alpha = state_alpha(&s, &b_used, &w);
        for n1 in 0..=s.n {
            let prob = s.prob * binomial_pmf(s.n, n1, s.pi);
            if prob == 0.0 {
                continue;
            }
            let f = n1 as f64 / s.n as f64;
            let h2 = DMatrix::from_row_slice(2, 2, &[1.0, f, f, f]);
            states.push(ScenarioState {
                w: w.clone(),
                alpha: alpha.clone(),
                a_tilde: h2.transpose() * &h2,
                prob,
            });
        }
    }
    scenario_from(cfg, states)
}

/// Limit of plug-in MD.
pub fn md_plim(cfg: &ScenarioConfig) -> Result<PlimResult> {
    gmm_plim(&induced_md_scenario(cfg)?)
}

/// Limit of identity-weighted pooled GMM.
pub fn gmm_identity_plim(cfg: &ScenarioConfig) -> Result<PlimResult> {
    gmm_plim(&induced_gmm_scenario(cfg)?)
}

/// Pooled-TSLS slope bias as a ratio of weighted covariances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TslsBias {
    /// `Cov^C[alpha, Z] / Cov^C[W, Z]`.
    pub bias: f64,
    /// `E[C]`.
    pub mean_weight: f64,
    /// `E[C Z] / E[C]`.
    pub tilde_mean_z: f64,
    pub tilde_mean_alpha: f64,
}

/// Weighted-covariance representation of the pooled-TSLS bias with group
/// weight `C_g = E[S_ze,g] = (n - 1) pi / 4` and instrument `Z_g = W_g`.
pub fn tsls_bias(cfg: &ScenarioConfig) -> Result<TslsBias> {
    if cfg.design != DesignKind::Iv {
        return Err(Error::UnsupportedScenario(
            "TSLS bias needs an IV scenario".into(),
        ));
    }
    if cfg.used_policies().len() != 1 {
        return Err(Error::UnsupportedScenario(
            "TSLS bias formula needs one policy column".into(),
        ));
    }
    let b_used = true_coefficients(cfg)?;
    let states = group_states(cfg)?;
    let rows: Vec<(f64, f64, f64, f64)> = states
        .iter()
        .map(|s| {
            let w = used_w(cfg, &s.w);
            let c = (s.n as f64 - 1.0) * s.pi / 4.0;
            (s.prob, c, w[0], s.tau - b_used[0] * w[0])
        })
        .collect();
    let ec: f64 = rows.iter().map(|(p, c, _, _)| p * c).sum();
    if !(ec > 0.0) {
        return Err(Error::DegenerateScenario(
            "no group has a first stage".into(),
        ));
    }
    let mz = rows.iter().map(|(p, c, z, _)| p * c * z).sum::<f64>() / ec;
    let ma = rows.iter().map(|(p, c, _, a)| p * c * a).sum::<f64>() / ec;
    let cov_az = rows
        .iter()
        .map(|(p, c, z, a)| p * c * (a - ma) * (z - mz))
        .sum::<f64>()
        / ec;
    let cov_wz = rows
        .iter()
        .map(|(p, c, z, _)| p * c * (z - mz) * (z - mz))
        .sum::<f64>()
        / ec;
    if !(cov_wz > 0.0) {
        return Err(Error::DegenerateScenario(
            "policy has no weighted variation".into(),
        ));
    }
    Ok(TslsBias {
        bias: cov_az / cov_wz,
        mean_weight: ec,
        tilde_mean_z: mz,
        tilde_mean_alpha: ma,
    })
}

/// Omitted-variable projection for a scenario whose second stage keeps one of
/// two policy columns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmittedVariable {
    /// Slope of the omitted column on the kept one.
    pub delta: f64,
    /// Bias of the kept coefficient.
    pub bias: f64,
}

type Row = (f64, f64, f64, f64);

/// Closed-form omitted-variable bias on the discrete support, with groups
/// weighted by their selection probability.
pub fn omitted_variable_bias(cfg: &ScenarioConfig) -> Result<OmittedVariable> {
    let used = cfg.used_policies();
    if cfg.policy_dim() != 2 || used.len() != 1 || cfg.design == DesignKind::Iv {
        return Err(Error::UnsupportedScenario(
            "needs a two-column difference design keeping one column".into(),
        ));
    }
    let (kept, omitted) = (used[0], 1 - used[0]);
    let slopes = true_effect_slopes(cfg)?;
    let mut rows = Vec::new();
    for s in group_states(cfg)? {
        let weight = s.prob * selection_probability(s.pi, s.n);
        let rest = s.tau - slopes.dot(&DVector::from_column_slice(&s.w));
        rows.push((weight, s.w[kept], s.w[omitted], rest));
    }
    let total: f64 = rows.iter().map(|r| r.0).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateScenario(
            "no group is ever selected".into(),
        ));
    }
    let mean = |f: &dyn Fn(&Row) -> f64| rows.iter().map(|r| r.0 * f(r)).sum::<f64>() / total;
    let mk = mean(&|r| r.1);
    let mo = mean(&|r| r.2);
    let mr = mean(&|r| r.3);
    let var_k = mean(&|r| (r.1 - mk) * (r.1 - mk));
    if !(var_k > 0.0) {
        return Err(Error::DegenerateScenario(
            "kept policy column is constant".into(),
        ));
    }
    let delta = mean(&|r| (r.2 - mo) * (r.1 - mk)) / var_k;
    let from_rest = mean(&|r| (r.3 - mr) * (r.1 - mk)) / var_k;
    Ok(OmittedVariable {
        delta,
        bias: slopes[omitted] * delta + from_rest,
    })
}
