//! Within-group and pooled two-stage least squares for the IV design.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::first_stage::GroupEstimate;
use crate::linalg::{min_eigenvalue, spd_inverse};
use crate::md_estimator::{
    check_policies, check_policy_design, ehw_vcov, FitResult, FittedGroup, OracleSpec,
};
use crate::moments::{average_moments, solve_theta, GroupSample, MomentAverages, ThetaSolution};

/// Just-identified IV of the outcome on `(1, E)` with instruments `(1, Z)`
/// inside one group.
pub fn tsls_group(sample: &GroupSample, rank_tol: f64) -> Result<ThetaSolution> {
    let avgs = average_moments(sample)?;
    if avgs.k() != 2 {
        return Err(Error::InvalidInput(format!(
            "group `{}`: IV moments need k = 2",
            sample.group_id()
        )));
    }
    solve_theta(&avgs, rank_tol)
}

/// Within-group cross products `(S_ze, S_zy)` recovered from IV moment
/// averages.
fn within_products(n: usize, avgs: &MomentAverages) -> (f64, f64) {
    let n = n as f64;
    let h1 = &avgs.h1;
    let h2 = &avgs.h2;
    let s_ze = n * (h2[(1, 1)] - h2[(1, 0)] * h2[(0, 1)]);
    let s_zy = n * (h1[1] - h2[(1, 0)] * h1[0]);
    (s_ze, s_zy)
}

/// Pooled TSLS with group fixed effects: the outcome on `E` and `E W_g`,
/// instrumented by `Z` and `Z W_g`. Group dummies are partialled out, so the
/// stacked normal equations reduce to `sum_g S_ze,g x_g x_g' phi = sum_g
/// S_zy,g x_g` with `x_g = (1, W_g)`.
///
/// `spec` must be the two-coordinate effect design.
pub fn tsls_pooled(
    samples: &[GroupSample],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
) -> Result<FitResult> {
    let records = samples
        .iter()
        .map(|s| Ok((s.group_id().to_string(), s.n_g(), average_moments(s)?)))
        .collect::<Result<Vec<_>>>()?;
    tsls_pooled_from_averages(&records, policies, spec)
}

pub(crate) fn tsls_pooled_from_averages(
    groups: &[(String, usize, MomentAverages)],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
) -> Result<FitResult> {
    let reference = OracleSpec::did_effect(spec.p())?;
    if spec.gamma() != reference.gamma() || spec.basis() != reference.basis() {
        return Err(Error::InvalidDesign(
            "pooled TSLS needs the two-coordinate effect design".into(),
        ));
    }
    let p = spec.p();
    check_policies(policies, groups.len(), p)?;
    if groups.is_empty() {
        return Err(Error::NoData);
    }
    if groups.iter().any(|(_, _, a)| a.k() != 2) {
        return Err(Error::InvalidInput(
            "pooled TSLS needs IV moments with k = 2".into(),
        ));
    }
    check_policy_design(policies.iter(), p)?;

    let dim = p + 1;
    let mut hess = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    let products: Vec<(f64, f64)> = groups
        .iter()
        .map(|(_, n, a)| within_products(*n, a))
        .collect();
    for ((s_ze, s_zy), w) in products.iter().zip(policies) {
        let x = regressor(w);
        hess += &x * x.transpose() * *s_ze;
        rhs += &x * *s_zy;
    }
    let scale = hess.amax();
    let sym = (&hess + hess.transpose()) * 0.5;
    let phi = match spd_inverse(&sym) {
        Some(inv) if min_eigenvalue(&sym) > 1e-12 * scale.max(f64::MIN_POSITIVE) => inv * &rhs,
        _ => {
            // S_ze can be negative in a group, so fall back to a general solve
            let lu = hess.clone().lu();
            match lu.solve(&rhs) {
                Some(v)
                    if lu.determinant().abs()
                        > 1e-12 * scale.max(f64::MIN_POSITIVE).powi(dim as i32) =>
                {
                    v
                }
                _ => {
                    return Err(Error::DesignDeficient(
                        "pooled first stage is rank deficient".into(),
                    ))
                }
            }
        }
    };

    let fitted_groups = groups
        .iter()
        .zip(&products)
        .zip(policies)
        .enumerate()
        .map(|(i, (((id, _, _), (s_ze, s_zy)), w))| {
            let x = regressor(w);
            let fit = x.dot(&phi);
            FittedGroup {
                group_id: id.clone(),
                index: i,
                lambda: DVector::zeros(1),
                residual: None,
                score_residual: DVector::from_element(1, s_zy - s_ze * fit),
            }
        })
        .collect();
    let coef = phi.rows(1, p).into_owned();
    let mut fit = FitResult {
        b_hat: spec.b_from_coefficients(coef.as_slice()),
        b_coefficients: coef,
        alpha_hat: DVector::from_vec(vec![0.0, phi[0]]),
        alpha_tilde: DVector::from_element(1, phi[0]),
        groups: fitted_groups,
        vcov: DMatrix::zeros(0, 0),
        n_used: groups.len(),
        n_dropped: 0,
        pseudo_inverse: false,
        hessian: hess,
    };
    fit.vcov = ehw_vcov(&fit, policies, spec, None)?;
    Ok(fit)
}

fn regressor(w: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(w.len() + 1, |i, _| if i == 0 { 1.0 } else { w[i - 1] })
}

/// Second-stage fit on known group parameters with every group selected.
pub fn oracle_fit(
    true_thetas: &[DVector<f64>],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
) -> Result<FitResult> {
    let estimates = oracle_estimates(true_thetas, None);
    crate::md_estimator::fit_md(&estimates, policies, spec)
}

/// Wraps known parameters as first-stage records; `omegas` marks which of
/// them count as selected.
pub(crate) fn oracle_estimates(
    thetas: &[DVector<f64>],
    omegas: Option<&[bool]>,
) -> Vec<GroupEstimate> {
    thetas
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let omega = omegas.is_none_or(|o| o[i]);
            GroupEstimate {
                group_id: format!("g{i:05}"),
                theta_hat: omega.then(|| t.clone()),
                omega,
                n_g: 1,
                h1_hat: t.clone(),
                h2_hat: DMatrix::identity(t.len(), t.len()),
            }
        })
        .collect()
}
