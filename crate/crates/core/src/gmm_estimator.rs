//! One-step pooled GMM, its effective-weight form and exact probability
//! limits on finite-support scenarios.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::first_stage::GroupEstimate;
use crate::linalg::{
    all_finite_vector, matrix_from_rows, min_eigenvalue, rows_of, spd_inverse, symmetric_pinv,
};
use crate::md_estimator::{
    check_estimates, check_policies, check_policy_design, check_weight_matrices, finish_fit,
    BasisChoice, FitResult, GammaChoice, OracleSpec,
};
use crate::moments::{GroupSample, DEFAULT_RANK_TOL};
use crate::solver::{solve_blocks, QuadBlock, Solution};

/// Moment weighting matrices `A_g`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum GmmWeights {
    #[default]
    Identity,
    /// One symmetric PSD `k x k` matrix per group.
    Custom(Vec<DMatrix<f64>>),
}

/// `H2' A H2`.
pub fn effective_weight(h2: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    h2.transpose() * a * h2
}

/// Pooled GMM on raw group samples. Groups with a singular sample Jacobian
/// stay in the objective.
pub fn fit_gmm_pooled(
    samples: &[GroupSample],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
    weights: &GmmWeights,
) -> Result<FitResult> {
    let estimates: Vec<GroupEstimate> = samples
        .par_iter()
        .map(|s| crate::first_stage::estimate_group(s, DEFAULT_RANK_TOL))
        .collect::<Result<_>>()?;
    fit_gmm_from_estimates(&estimates, policies, spec, weights)
}

/// Pooled GMM from first-stage records, which carry the averaged moments.
pub fn fit_gmm_from_estimates(
    estimates: &[GroupEstimate],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
    weights: &GmmWeights,
) -> Result<FitResult> {
    check_policies(policies, estimates.len(), spec.p())?;
    check_estimates(estimates, spec)?;
    if estimates.is_empty() {
        return Err(Error::NoData);
    }
    let k = spec.k();
    if let GmmWeights::Custom(ws) = weights {
        if ws.len() != estimates.len() {
            return Err(Error::InvalidInput(format!(
                "{} weight matrices for {} groups",
                ws.len(),
                estimates.len()
            )));
        }
        check_weight_matrices(ws, k)?;
    }
    check_policy_design(policies.iter(), spec.p())?;
    let sizes: Vec<usize> = estimates.iter().map(|e| e.n_g).collect();
    let w = spec.weights().resolve(&sizes)?;

    let blocks: Vec<QuadBlock> = estimates
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let a_h2 = match weights {
                GmmWeights::Identity => e.h2_hat.clone(),
                GmmWeights::Custom(ws) => &ws[i] * &e.h2_hat,
            };
            let a = e.h2_hat.transpose() * &a_h2 * w[i];
            let b = e.h2_hat.transpose()
                * match weights {
                    GmmWeights::Identity => e.h1_hat.clone(),
                    GmmWeights::Custom(ws) => &ws[i] * &e.h1_hat,
                }
                * w[i];
            QuadBlock {
                index: i,
                a: (&a + a.transpose()) * 0.5,
                b,
            }
        })
        .collect();
    let sol = solve_blocks(&blocks, policies, spec)?;
    finish_fit(estimates, &blocks, sol, policies, spec)
}

/// One support point of a finite-support population of groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioState {
    pub w: DVector<f64>,
    pub alpha: DVector<f64>,
    pub a_tilde: DMatrix<f64>,
    pub prob: f64,
}

/// Finite-support population: groups draw a state with probability `prob`
/// and have `theta = alpha + B0 W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteScenario {
    states: Vec<ScenarioState>,
    b0_true: DMatrix<f64>,
    spec: OracleSpec,
}

/// Serialisable form of [`DiscreteScenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteScenarioFile {
    pub k: usize,
    pub p: usize,
    pub gamma: GammaChoice,
    pub b0_basis: BasisChoice,
    pub b0_true: Vec<Vec<f64>>,
    pub states: Vec<ScenarioStateFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioStateFile {
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    pub a_tilde: Vec<Vec<f64>>,
    pub prob: f64,
}

impl DiscreteScenario {
    pub fn new(
        states: Vec<ScenarioState>,
        b0_true: DMatrix<f64>,
        spec: OracleSpec,
    ) -> Result<Self> {
        let (k, p) = (spec.k(), spec.p());
        if states.is_empty() {
            return Err(Error::InvalidInput("scenario has no states".into()));
        }
        if b0_true.nrows() != k || b0_true.ncols() != p {
            return Err(Error::InvalidInput(format!("B0 must be {k}x{p}")));
        }
        if spec.coefficients_of(&b0_true).is_none() {
            return Err(Error::InvalidInput(
                "B0 is not in the span of the effect basis".into(),
            ));
        }
        let mut total = 0.0;
        for (i, s) in states.iter().enumerate() {
            if s.w.len() != p
                || s.alpha.len() != k
                || !all_finite_vector(&s.w)
                || !all_finite_vector(&s.alpha)
            {
                return Err(Error::InvalidInput(format!(
                    "state {i}: W must have {p} and alpha {k} finite entries"
                )));
            }
            if !(s.prob >= 0.0) || !s.prob.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "state {i}: negative or non-finite probability"
                )));
            }
            total += s.prob;
        }
        check_weight_matrices(
            &states.iter().map(|s| s.a_tilde.clone()).collect::<Vec<_>>(),
            k,
        )?;
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "state probabilities sum to {total}"
            )));
        }
        Ok(Self {
            states,
            b0_true,
            spec,
        })
    }

    pub fn from_file(file: &DiscreteScenarioFile) -> Result<Self> {
        let spec = OracleSpec::from_choices(file.k, file.p, &file.gamma, &file.b0_basis)?;
        let b0 = if file.p == 0 {
            DMatrix::zeros(file.k, 0)
        } else {
            matrix_from_rows(&file.b0_true, "b0_true")?
        };
        let states = file
            .states
            .iter()
            .map(|s| {
                Ok(ScenarioState {
                    w: DVector::from_column_slice(&s.w),
                    alpha: DVector::from_column_slice(&s.alpha),
                    a_tilde: matrix_from_rows(&s.a_tilde, "a_tilde")?,
                    prob: s.prob,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(states, b0, spec)
    }

    pub fn to_file(&self) -> DiscreteScenarioFile {
        DiscreteScenarioFile {
            k: self.spec.k(),
            p: self.spec.p(),
            gamma: GammaChoice::Matrix(rows_of(self.spec.gamma())),
            b0_basis: BasisChoice::Matrices(self.spec.basis().iter().map(rows_of).collect()),
            b0_true: rows_of(&self.b0_true),
            states: self
                .states
                .iter()
                .map(|s| ScenarioStateFile {
                    w: s.w.iter().cloned().collect(),
                    alpha: s.alpha.iter().cloned().collect(),
                    a_tilde: rows_of(&s.a_tilde),
                    prob: s.prob,
                })
                .collect(),
        }
    }

    pub fn states(&self) -> &[ScenarioState] {
        &self.states
    }

    pub fn b0_true(&self) -> &DMatrix<f64> {
        &self.b0_true
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    /// `theta_s = alpha_s + B0 W_s`.
    pub fn theta(&self, s: &ScenarioState) -> DVector<f64> {
        &s.alpha + &self.b0_true * &s.w
    }
}

/// Limit of the weighted second stage on a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct PlimResult {
    pub b_lim: DMatrix<f64>,
    pub alpha_lim: DVector<f64>,
    /// Weighted GLS population intercept.
    pub alpha0: DVector<f64>,
    pub bias: DMatrix<f64>,
    /// Bias in basis coordinates.
    pub bias_coefficients: DVector<f64>,
}

/// `a* = A - A Gamma (Gamma' A Gamma)^+ Gamma' A`: the weight left after
/// profiling out `lambda`.
fn profiled_weight(spec: &OracleSpec, a: &DMatrix<f64>) -> DMatrix<f64> {
    let gamma = spec.gamma();
    if gamma.ncols() == 0 {
        return a.clone();
    }
    let ga = gamma.transpose() * a;
    let gag = &ga * gamma;
    let inv = spd_inverse(&gag).unwrap_or_else(|| symmetric_pinv(&gag, 1e-12));
    let out = a - ga.transpose() * inv * &ga;
    (&out + out.transpose()) * 0.5
}

struct Population {
    a_star: Vec<DMatrix<f64>>,
    alpha0: DVector<f64>,
    h11_inv: DMatrix<f64>,
}

fn population(scn: &DiscreteScenario) -> Result<Population> {
    let spec = &scn.spec;
    let u = spec.complement();
    let kp = spec.k_prime();
    let a_star: Vec<DMatrix<f64>> = scn
        .states
        .iter()
        .map(|s| profiled_weight(spec, &s.a_tilde))
        .collect();
    let mut h11 = DMatrix::zeros(kp, kp);
    let mut rhs = DVector::zeros(kp);
    for (s, a) in scn.states.iter().zip(&a_star) {
        let ac = u.transpose() * a * u;
        h11 += ac * s.prob;
        rhs += u.transpose() * (a * &s.alpha) * s.prob;
    }
    let scale = h11.amax().max(f64::MIN_POSITIVE);
    let h11_inv = match spd_inverse(&h11) {
        Some(inv) if min_eigenvalue(&h11) > 1e-12 * scale => inv,
        _ => {
            return Err(Error::DegenerateScenario(
                "population intercept block is singular".into(),
            ))
        }
    };
    let alpha0 = u * (&h11_inv * rhs);
    Ok(Population {
        a_star,
        alpha0,
        h11_inv,
    })
}

/// Exact limit of the pooled estimator with effective weights `a_tilde`,
/// assembled from the population Schur-complement blocks.
pub fn gmm_plim(scn: &DiscreteScenario) -> Result<PlimResult> {
    let spec = &scn.spec;
    let (kp, p, m) = (spec.k_prime(), spec.p(), spec.m());
    let u = spec.complement();
    let pop = population(scn)?;

    // blocks over vec(B~) of size k' p
    let d = kp * p;
    let mut h21 = DMatrix::zeros(d, kp);
    let mut h22 = DMatrix::zeros(d, d);
    let mut c1 = DVector::zeros(kp);
    let mut c2 = DVector::zeros(d);
    for (s, a) in scn.states.iter().zip(&pop.a_star) {
        let ac = u.transpose() * a * u;
        let ae = u.transpose() * (a * (&s.alpha - &pop.alpha0));
        c1 += &ae * s.prob;
        for i in 0..p {
            let wi = s.w[i] * s.prob;
            for r in 0..kp {
                c2[i * kp + r] += wi * ae[r];
            }
            let mut blk = h21.view_mut((i * kp, 0), (kp, kp));
            blk += &ac * wi;
            for j in 0..p {
                let mut blk = h22.view_mut((i * kp, j * kp), (kp, kp));
                blk += &ac * (wi * s.w[j]);
            }
        }
    }
    let s_mat = &h22 - &h21 * &pop.h11_inv * h21.transpose();
    let s_mat = (&s_mat + s_mat.transpose()) * 0.5;
    let r = &c2 - &h21 * &pop.h11_inv * &c1;

    // basis in vec(B~) coordinates
    let t = DMatrix::from_fn(d, m, |row, j| spec.projected_basis()[j].as_slice()[row]);
    let tst = t.transpose() * &s_mat * &t;
    let tst_scale = tst.amax().max(f64::MIN_POSITIVE);
    let tst_inv = match spd_inverse(&tst) {
        Some(inv) if m == 0 || min_eigenvalue(&tst) > 1e-12 * tst_scale => inv,
        _ => {
            return Err(Error::DegenerateScenario(
                "population Schur complement is singular".into(),
            ))
        }
    };
    let delta_c = match spd_inverse(&s_mat)
        .filter(|_| d > 0 && min_eigenvalue(&s_mat) > 1e-12 * s_mat.amax())
    {
        Some(s_inv) => {
            let unrestricted = s_inv * &r;
            &tst_inv * t.transpose() * &s_mat * unrestricted
        }
        None => &tst_inv * t.transpose() * &r,
    };
    let bias = spec.b_from_coefficients(delta_c.as_slice());
    let mut h12_dc = DVector::zeros(kp);
    if m > 0 {
        h12_dc = h21.transpose() * (&t * &delta_c);
    }
    let alpha_lim = &pop.alpha0 + u * (&pop.h11_inv * (&c1 - h12_dc));
    Ok(PlimResult {
        b_lim: &scn.b0_true + &bias,
        alpha_lim,
        alpha0: pop.alpha0,
        bias,
        bias_coefficients: delta_c,
    })
}

/// The same limit obtained by running the weighted solver on the population
/// itself (each state is one block weighted by its probability).
pub fn plim_by_population_fit(scn: &DiscreteScenario) -> Result<PlimResult> {
    let spec = &scn.spec;
    let blocks: Vec<QuadBlock> = scn
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let a = &s.a_tilde * s.prob;
            let b = &a * scn.theta(s);
            QuadBlock { index: i, a, b }
        })
        .collect();
    let policies: Vec<DVector<f64>> = scn.states.iter().map(|s| s.w.clone()).collect();
    let Solution {
        coef,
        alpha,
        b_hat,
        pseudo_inverse,
        ..
    } = solve_blocks(&blocks, &policies, spec)
        .map_err(|e| Error::DegenerateScenario(e.to_string()))?;
    if pseudo_inverse {
        return Err(Error::DegenerateScenario(
            "population intercept block is singular".into(),
        ));
    }
    let b0_coef = spec.coefficients_of(&scn.b0_true).expect("validated");
    Ok(PlimResult {
        bias: &b_hat - &scn.b0_true,
        b_lim: b_hat,
        alpha_lim: alpha,
        alpha0: population(scn)?.alpha0,
        bias_coefficients: coef - b0_coef,
    })
}

/// `P (E[A eps0 W'] - E[A eps0] E[W]')` with `eps0` the residual from the
/// weighted population intercept and group effects.
pub fn consistency_condition(scn: &DiscreteScenario) -> Result<DMatrix<f64>> {
    let spec = &scn.spec;
    let pop = population(scn)?;
    let (k, p) = (spec.k(), spec.p());
    let mut e_aw = DMatrix::zeros(k, p);
    let mut e_a = DVector::zeros(k);
    let mut e_w = DVector::zeros(p);
    for (s, a) in scn.states.iter().zip(&pop.a_star) {
        let ae = a * (&s.alpha - &pop.alpha0);
        e_aw += &ae * s.w.transpose() * s.prob;
        e_a += ae * s.prob;
        e_w += &s.w * s.prob;
    }
    Ok(spec.projector() * (e_aw - e_a * e_w.transpose()))
}

/// A state of the scalar two-arm weighting model: error `eps` and the weight
/// the group would receive untreated (`sigma2_0`) and treated (`sigma2_1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryPolicyState {
    pub w: f64,
    pub eps: f64,
    pub sigma2_0: f64,
    pub sigma2_1: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasDecomposition {
    pub endogenous: f64,
    pub statistical: f64,
    /// `E[sigma2(1) eps | W=1] - E[sigma2(0) eps | W=0]`, computed directly.
    pub total: f64,
}

/// Splits the weighted error imbalance between treated and untreated groups
/// into the part caused by treatment changing the weights and the part
/// present at baseline weights.
pub fn bias_decomposition(states: &[BinaryPolicyState]) -> Result<BiasDecomposition> {
    let mut p1 = 0.0;
    let mut p0 = 0.0;
    let (mut endo, mut base1, mut base0, mut treated1) = (0.0, 0.0, 0.0, 0.0);
    for (i, s) in states.iter().enumerate() {
        if s.w != 0.0 && s.w != 1.0 {
            return Err(Error::UnsupportedScenario(format!(
                "state {i}: policy {} is not binary",
                s.w
            )));
        }
        if !(s.prob >= 0.0)
            || ![s.eps, s.sigma2_0, s.sigma2_1, s.prob]
                .iter()
                .all(|v| v.is_finite())
        {
            return Err(Error::InvalidInput(format!("state {i}: invalid entries")));
        }
        if s.w == 1.0 {
            p1 += s.prob;
            endo += s.prob * (s.sigma2_1 - s.sigma2_0) * s.eps;
            base1 += s.prob * s.sigma2_0 * s.eps;
            treated1 += s.prob * s.sigma2_1 * s.eps;
        } else {
            p0 += s.prob;
            base0 += s.prob * s.sigma2_0 * s.eps;
        }
    }
    if p1 <= 0.0 || p0 <= 0.0 {
        return Err(Error::DegenerateScenario(
            "both policy arms need positive probability".into(),
        ));
    }
    Ok(BiasDecomposition {
        endogenous: endo / p1,
        statistical: base1 / p1 - base0 / p0,
        total: treated1 / p1 - base0 / p0,
    })
}
