//! Selection accounting, the finite-sample bias bound for dropped groups,
//! first-stage conditioning and the two-bank-type weighting formulas.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::first_stage::GroupEstimate;
use crate::linalg::{min_eigenvalue, singular_value_range};
use crate::md_estimator::OracleSpec;

/// How many groups the standard estimator had to drop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub groups: usize,
    pub dropped: usize,
    pub share: f64,
    /// `1 / sqrt(G)`.
    pub heuristic_threshold: f64,
    /// `share > heuristic_threshold`.
    pub flag: bool,
}

pub fn selection_report(estimates: &[GroupEstimate]) -> SelectionReport {
    selection_report_from_omegas(&estimates.iter().map(|e| e.omega).collect::<Vec<_>>())
}

pub fn selection_report_from_omegas(omegas: &[bool]) -> SelectionReport {
    let groups = omegas.len();
    let dropped = omegas.iter().filter(|o| !**o).count();
    let (share, threshold) = if groups == 0 {
        (0.0, 1.0)
    } else {
        (dropped as f64 / groups as f64, 1.0 / (groups as f64).sqrt())
    };
    SelectionReport {
        groups,
        dropped,
        share,
        heuristic_threshold: threshold,
        flag: share > threshold,
    }
}

/// Whether the residuals fed to the bound are the true oracle residuals
/// (simulation) or feasible stand-ins (real data).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualKind {
    Oracle,
    Proxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundComponents {
    pub kappa: f64,
    pub lambda_min_m: f64,
    pub max_policy_norm: f64,
    pub max_residual_norm: f64,
    pub dropped_share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_value: f64,
    pub components: BoundComponents,
    pub residuals: ResidualKind,
}

impl BoundComponents {
    pub fn bound(&self) -> f64 {
        (1.0 / self.kappa.min(1.0))
            * ((1.0 + self.max_policy_norm.powi(2)).sqrt() / self.lambda_min_m)
            * self.max_residual_norm
            * self.dropped_share
    }
}

/// Upper bound on the Frobenius distance between the fit on selected groups
/// and the fit on all groups, given residuals of the all-group fit.
///
/// `residuals` is the set the maximum is taken over; it need not be aligned
/// with `policies`.
pub fn md_bias_bound(
    policies: &[DVector<f64>],
    omegas: &[bool],
    residuals: &[DVector<f64>],
    spec: &OracleSpec,
    kind: ResidualKind,
) -> Result<BoundReport> {
    let g = policies.len();
    if omegas.len() != g {
        return Err(Error::InvalidInput(format!(
            "{} selection indicators for {g} groups",
            omegas.len()
        )));
    }
    if g == 0 {
        return Err(Error::NoData);
    }
    let p = spec.p();
    let mut m = DMatrix::zeros(p + 1, p + 1);
    let mut max_w: f64 = 0.0;
    for (w, &o) in policies.iter().zip(omegas) {
        if w.len() != p {
            return Err(Error::InvalidInput(format!(
                "policy has dimension {}, expected {p}",
                w.len()
            )));
        }
        max_w = max_w.max(w.norm());
        if o {
            let x = DVector::from_fn(p + 1, |i, _| if i == 0 { 1.0 } else { w[i - 1] });
            m += &x * x.transpose();
        }
    }
    m /= g as f64;
    let lambda_min = min_eigenvalue(&m);
    let scale = m.amax();
    if !(lambda_min > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::DesignDeficient(
            "policy moment matrix M of selected groups is singular".into(),
        ));
    }
    let mut max_r: f64 = 0.0;
    for r in residuals {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite residual".into()));
        }
        max_r = max_r.max(r.norm());
    }
    let components = BoundComponents {
        kappa: spec.kappa(),
        lambda_min_m: lambda_min,
        max_policy_norm: max_w,
        max_residual_norm: max_r,
        dropped_share: omegas.iter().filter(|o| !**o).count() as f64 / g as f64,
    };
    Ok(BoundReport {
        bound_value: components.bound(),
        components,
        residuals: kind,
    })
}

/// Spread of the first-stage Jacobian condition (`sigma_min / sigma_max` of
/// each `H2_hat`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditioningSummary {
    pub groups: usize,
    pub min_inverse_condition: f64,
    pub median_inverse_condition: f64,
    /// Groups with inverse condition below `1e-6`.
    pub ill_conditioned: usize,
}

pub fn conditioning_summary(estimates: &[GroupEstimate]) -> ConditioningSummary {
    let mut rc: Vec<f64> = estimates
        .iter()
        .map(|e| {
            let (min, max) = singular_value_range(&e.h2_hat);
            if max > 0.0 {
                min / max
            } else {
                0.0
            }
        })
        .collect();
    rc.sort_by(f64::total_cmp);
    let median = match rc.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => rc[n / 2],
        n => 0.5 * (rc[n / 2 - 1] + rc[n / 2]),
    };
    ConditioningSummary {
        groups: rc.len(),
        min_inverse_condition: rc.first().copied().unwrap_or(f64::NAN),
        median_inverse_condition: median,
        ill_conditioned: rc.iter().filter(|v| **v < 1e-6).count(),
    }
}

/// `pA pB / (pA + pB)^2`.
pub fn banking_weight(p_a: f64, p_b: f64) -> Result<f64> {
    for p in [p_a, p_b] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("share {p} is outside [0, 1]")));
        }
    }
    if p_a + p_b <= 0.0 {
        return Err(Error::InvalidInput("shares sum to zero".into()));
    }
    Ok(p_a * p_b / ((p_a + p_b) * (p_a + p_b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankingState {
    pub delta_u: f64,
    pub delta_w: f64,
    pub p_a: f64,
    pub p_b: f64,
    pub prob: f64,
}

/// `Cov^w[du, dW] / Var^w[dW]` with weights `prob * banking_weight(pA, pB)`.
pub fn banking_bias(states: &[BankingState]) -> Result<f64> {
    let mut weights = Vec::with_capacity(states.len());
    for s in states {
        if !(s.prob >= 0.0) || !s.delta_u.is_finite() || !s.delta_w.is_finite() {
            return Err(Error::InvalidInput(
                "banking state has invalid entries".into(),
            ));
        }
        weights.push(s.prob * banking_weight(s.p_a, s.p_b)?);
    }
    weighted_slope(states.iter().map(|s| (s.delta_u, s.delta_w)).zip(weights))
}

fn weighted_slope(points: impl Iterator<Item = ((f64, f64), f64)> + Clone) -> Result<f64> {
    let total: f64 = points.clone().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateScenario("all weights are zero".into()));
    }
    let mean_u = points.clone().map(|((u, _), w)| w * u).sum::<f64>() / total;
    let mean_w = points.clone().map(|((_, x), w)| w * x).sum::<f64>() / total;
    let cov = points
        .clone()
        .map(|((u, x), w)| w * (u - mean_u) * (x - mean_w))
        .sum::<f64>()
        / total;
    let var = points
        .map(|((_, x), w)| w * (x - mean_w) * (x - mean_w))
        .sum::<f64>()
        / total;
    if !(var > 1e-14 * (1.0 + mean_w * mean_w)) {
        return Err(Error::DegenerateScenario(
            "weighted variance of the policy difference is zero".into(),
        ));
    }
    Ok(cov / var)
}
