//! Second-stage minimum distance regression of group parameters on policies.
//!
//! The fitted model is `theta_g = alpha + Gamma lambda_g + B W_g` with the
//! normalisation `Gamma' alpha = 0` and `B` restricted to the span of a user
//! supplied basis. Group effects `lambda_g` are profiled out per group, which
//! leaves a weighted least-squares problem in the `k' = k - q` dimensional
//! complement of `Gamma`; that problem is solved through the Schur complement
//! of its normal equations (see [`crate::solver`]).

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::first_stage::GroupEstimate;
use serde::{Deserialize, Serialize};

use crate::linalg::{
    all_finite_matrix, all_finite_vector, matrix_from_rows, min_eigenvalue, singular_value_range,
    symmetric_pinv, vec_of,
};
use crate::solver::{design_block, solve_blocks, QuadBlock, Solution};

/// Per-group weights of the second-stage objective.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum GroupWeights {
    #[default]
    Unit,
    /// Weight each group by its size `n_g`.
    GroupSize,
    /// One nonnegative weight per group, in input order.
    Explicit(Vec<f64>),
}

impl GroupWeights {
    pub(crate) fn resolve(&self, sizes: &[usize]) -> Result<Vec<f64>> {
        match self {
            GroupWeights::Unit => Ok(vec![1.0; sizes.len()]),
            GroupWeights::GroupSize => Ok(sizes.iter().map(|&n| n as f64).collect()),
            GroupWeights::Explicit(w) => {
                if w.len() != sizes.len() {
                    return Err(Error::InvalidInput(format!(
                        "{} explicit weights for {} groups",
                        w.len(),
                        sizes.len()
                    )));
                }
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::InvalidInput(
                        "group weights must be finite and >= 0".into(),
                    ));
                }
                Ok(w.clone())
            }
        }
    }
}

/// Heterogeneity directions `Gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaPreset {
    /// No group effects (`q = 0`).
    None,
    /// Group effect on the first coordinate only (`Gamma = e_1`), the
    /// group-specific time effect of the differenced regression.
    Intercept,
    /// Common shift of all coordinates (`Gamma = iota_k`).
    Ones,
}

/// Policy-effect subspaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisPreset {
    /// Every `k x p` matrix.
    Full,
    /// `beta * I_k`; needs `p = k`.
    Scalar,
    /// Diagonal matrices; needs `p = k`.
    Diagonal,
    /// Policies move only the last (effect) coordinate.
    Effect,
}

/// `Gamma` as a preset name or as `k` rows of `q` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaChoice {
    Preset(GammaPreset),
    Matrix(Vec<Vec<f64>>),
}

/// Policy-effect basis as a preset name or as a list of `k x p` matrices
/// given row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisChoice {
    Preset(BasisPreset),
    Matrices(Vec<Vec<Vec<f64>>>),
}

/// Second-stage design: heterogeneity directions, policy-effect subspace and
/// group weights, together with the derived projector and identification
/// constant.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSpec {
    k: usize,
    p: usize,
    gamma: DMatrix<f64>,
    basis: Vec<DMatrix<f64>>,
    weights: GroupWeights,
    projector: DMatrix<f64>,
    complement: DMatrix<f64>,
    projected_basis: Vec<DMatrix<f64>>,
    kappa: f64,
}

/// Orthogonal projector onto the null space of `Gamma'`.
pub fn gamma_perp_projector(gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = gamma.nrows();
    let q = gamma.ncols();
    if q == 0 {
        return Ok(DMatrix::identity(k, k));
    }
    if !all_finite_matrix(gamma) {
        return Err(Error::InvalidDesign("Gamma has non-finite entries".into()));
    }
    if q > k {
        return Err(Error::InvalidDesign(format!(
            "Gamma is {k}x{q}: more columns than rows"
        )));
    }
    let (min, max) = singular_value_range(gamma);
    if max == 0.0 || min <= 1e-10 * max {
        return Err(Error::InvalidDesign(
            "Gamma does not have full column rank".into(),
        ));
    }
    let gtg = gamma.transpose() * gamma;
    let inv = gtg
        .cholesky()
        .ok_or_else(|| Error::InvalidDesign("Gamma'Gamma is not invertible".into()))?
        .inverse();
    let p = DMatrix::identity(k, k) - gamma * inv * gamma.transpose();
    Ok((&p + p.transpose()) * 0.5)
}

/// Orthonormal basis (columns) of the range of a projector of rank `rank`.
fn range_basis(projector: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let k = projector.nrows();
    if rank == k {
        return DMatrix::identity(k, k);
    }
    let eig = projector.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut u = DMatrix::zeros(k, rank);
    for (col, &i) in idx.iter().take(rank).enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        let pivot = v.iter().cloned().fold(
            0.0_f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if pivot < 0.0 {
            v = -v;
        }
        u.set_column(col, &v);
    }
    u
}

fn unit_matrix(k: usize, p: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(k, p);
    m[(i, j)] = 1.0;
    m
}

impl OracleSpec {
    /// Validates the design. `gamma` is `k x q` (use `k x 0` for no group
    /// effects); each basis element is `k x p`.
    pub fn new(k: usize, p: usize, gamma: DMatrix<f64>, basis: Vec<DMatrix<f64>>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidDesign("k must be at least 1".into()));
        }
        if gamma.nrows() != k {
            return Err(Error::InvalidDesign(format!(
                "Gamma has {} rows, expected {k}",
                gamma.nrows()
            )));
        }
        let q = gamma.ncols();
        if q >= k {
            return Err(Error::InvalidDesign(format!(
                "Gamma spans all {k} coordinates (q = {q}); the policy effect is not identified"
            )));
        }
        for b in &basis {
            if b.nrows() != k || b.ncols() != p {
                return Err(Error::InvalidDesign(format!(
                    "basis element is {}x{}, expected {k}x{p}",
                    b.nrows(),
                    b.ncols()
                )));
            }
            if !all_finite_matrix(b) {
                return Err(Error::InvalidDesign(
                    "basis element has non-finite entries".into(),
                ));
            }
        }
        if !basis.is_empty() {
            let v = DMatrix::from_fn(k * p, basis.len(), |r, c| basis[c].as_slice()[r]);
            let (min, max) = singular_value_range(&v);
            if basis.len() > k * p || max == 0.0 || min <= 1e-10 * max {
                return Err(Error::InvalidDesign(
                    "basis elements are linearly dependent".into(),
                ));
            }
        }
        let projector = gamma_perp_projector(&gamma)?;
        let complement = range_basis(&projector, k - q);
        let projected_basis = basis.iter().map(|b| complement.transpose() * b).collect();
        let kappa = restricted_kappa(&projector, &basis, k, p);
        if !(kappa > 1e-10) {
            return Err(Error::InvalidDesign(format!(
                "policy-effect subspace intersects span(Gamma): kappa = {kappa:e}"
            )));
        }
        Ok(Self {
            k,
            p,
            gamma,
            basis,
            weights: GroupWeights::Unit,
            projector,
            complement,
            projected_basis,
            kappa,
        })
    }

    pub fn from_presets(
        k: usize,
        p: usize,
        gamma: GammaPreset,
        basis: BasisPreset,
    ) -> Result<Self> {
        let gamma = match gamma {
            GammaPreset::None => DMatrix::zeros(k, 0),
            GammaPreset::Intercept => DMatrix::from_fn(k, 1, |i, _| if i == 0 { 1.0 } else { 0.0 }),
            GammaPreset::Ones => DMatrix::from_element(k, 1, 1.0),
        };
        let basis = match basis {
            BasisPreset::Full => {
                let mut v = Vec::with_capacity(k * p);
                for j in 0..p {
                    for i in 0..k {
                        v.push(unit_matrix(k, p, i, j));
                    }
                }
                v
            }
            BasisPreset::Scalar => {
                if p != k {
                    return Err(Error::InvalidDesign(format!(
                        "scalar effects need p = k, got p = {p}, k = {k}"
                    )));
                }
                vec![DMatrix::identity(k, k)]
            }
            BasisPreset::Diagonal => {
                if p != k {
                    return Err(Error::InvalidDesign(format!(
                        "diagonal effects need p = k, got p = {p}, k = {k}"
                    )));
                }
                (0..k).map(|i| unit_matrix(k, k, i, i)).collect()
            }
            BasisPreset::Effect => (0..p).map(|j| unit_matrix(k, p, k - 1, j)).collect(),
        };
        Self::new(k, p, gamma, basis)
    }

    pub fn from_choices(
        k: usize,
        p: usize,
        gamma: &GammaChoice,
        basis: &BasisChoice,
    ) -> Result<Self> {
        let gamma_m = match gamma {
            GammaChoice::Preset(g) => return Self::from_choices_preset(k, p, *g, basis),
            GammaChoice::Matrix(rows) if rows.is_empty() => DMatrix::zeros(k, 0),
            GammaChoice::Matrix(rows) => matrix_from_rows(rows, "gamma")?,
        };
        let basis_m = Self::basis_from_choice(k, p, basis)?;
        Self::new(k, p, gamma_m, basis_m)
    }

    fn from_choices_preset(
        k: usize,
        p: usize,
        gamma: GammaPreset,
        basis: &BasisChoice,
    ) -> Result<Self> {
        match basis {
            BasisChoice::Preset(b) => Self::from_presets(k, p, gamma, *b),
            BasisChoice::Matrices(_) => {
                let g = Self::from_presets(k, 0, gamma, BasisPreset::Full)?.gamma;
                Self::new(k, p, g, Self::basis_from_choice(k, p, basis)?)
            }
        }
    }

    fn basis_from_choice(k: usize, p: usize, basis: &BasisChoice) -> Result<Vec<DMatrix<f64>>> {
        match basis {
            BasisChoice::Preset(b) => Ok(Self::from_presets(k, p, GammaPreset::None, *b)?.basis),
            BasisChoice::Matrices(ms) => ms
                .iter()
                .map(|rows| {
                    let m = matrix_from_rows(rows, "basis element")?;
                    if p == 0 && m.nrows() == 0 {
                        Ok(DMatrix::zeros(k, 0))
                    } else {
                        Ok(m)
                    }
                })
                .collect(),
        }
    }

    /// Two-coordinate `(intercept, effect)` design with group-specific
    /// intercepts and policies acting on the effect coordinate.
    pub fn did_effect(p: usize) -> Result<Self> {
        Self::from_presets(2, p, GammaPreset::Intercept, BasisPreset::Effect)
    }

    pub fn with_weights(mut self, weights: GroupWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.gamma.ncols()
    }

    /// Dimension of the complement of `Gamma`.
    pub fn k_prime(&self) -> usize {
        self.k - self.q()
    }

    /// Number of basis coefficients.
    pub fn m(&self) -> usize {
        self.basis.len()
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn basis(&self) -> &[DMatrix<f64>] {
        &self.basis
    }

    pub fn weights(&self) -> &GroupWeights {
        &self.weights
    }

    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    /// `k x k'` orthonormal basis of the complement of `Gamma`.
    pub fn complement(&self) -> &DMatrix<f64> {
        &self.complement
    }

    pub(crate) fn projected_basis(&self) -> &[DMatrix<f64>] {
        &self.projected_basis
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// `B = sum_j c_j B_j`.
    pub fn b_from_coefficients(&self, coef: &[f64]) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.k, self.p);
        for (c, basis) in coef.iter().zip(&self.basis) {
            b += basis * *c;
        }
        b
    }

    /// Least-squares basis coordinates of `b`, or `None` when `b` is not in
    /// the span of the basis (relative residual above `1e-9`).
    pub fn coefficients_of(&self, b: &DMatrix<f64>) -> Option<DVector<f64>> {
        if b.nrows() != self.k || b.ncols() != self.p {
            return None;
        }
        let m = self.m();
        if m == 0 {
            return (b.norm() <= 1e-9).then(|| DVector::zeros(0));
        }
        let v = DMatrix::from_fn(self.k * self.p, m, |r, c| self.basis[c].as_slice()[r]);
        let target = vec_of(b);
        let coef = v.clone().svd(true, true).solve(&target, 1e-14).ok()?;
        let resid = (&v * &coef - &target).norm();
        (resid <= 1e-9 * (1.0 + target.norm())).then_some(coef)
    }
}

/// `min ||P B||_F / ||B||_F` over nonzero `B` in the span of the basis,
/// computed as the smallest singular value of the projector applied to an
/// orthonormalised basis.
fn restricted_kappa(projector: &DMatrix<f64>, basis: &[DMatrix<f64>], k: usize, p: usize) -> f64 {
    if basis.is_empty() {
        return 1.0;
    }
    let m = basis.len();
    let v = DMatrix::from_fn(k * p, m, |r, c| basis[c].as_slice()[r]);
    let q = v.qr().q();
    let mut mapped = DMatrix::zeros(k * p, m);
    for c in 0..m {
        let bm = DMatrix::from_column_slice(k, p, q.column(c).as_slice());
        let pb = projector * bm;
        mapped.set_column(c, &vec_of(&pb));
    }
    let (min, _) = singular_value_range(&mapped);
    min.min(1.0)
}

/// Identification constant of a validated design.
pub fn kappa(spec: &OracleSpec) -> f64 {
    spec.kappa()
}

/// Fitted quantities for one group that entered the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedGroup {
    pub group_id: String,
    /// Position of the group in the input list.
    pub index: usize,
    pub lambda: DVector<f64>,
    /// `theta_hat_g - alpha - Gamma lambda_g - B W_g` when `theta_hat_g` exists.
    pub residual: Option<DVector<f64>>,
    /// Weighted working residual in the projected space; the group's score
    /// is `X_g' score_residual`.
    pub score_residual: DVector<f64>,
}

/// Output of a second-stage fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub b_hat: DMatrix<f64>,
    /// Coordinates of `b_hat` in the basis of the design.
    pub b_coefficients: DVector<f64>,
    pub alpha_hat: DVector<f64>,
    /// `alpha_hat` in the orthonormal complement coordinates.
    pub alpha_tilde: DVector<f64>,
    pub groups: Vec<FittedGroup>,
    /// Sandwich variance of `(alpha_tilde, b_coefficients)`.
    pub vcov: DMatrix<f64>,
    pub n_used: usize,
    pub n_dropped: usize,
    /// Set when a pseudo-inverse replaced an inverse (weakly identified fit).
    pub pseudo_inverse: bool,
    pub(crate) hessian: DMatrix<f64>,
}

/// Named coefficient with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

impl FitResult {
    /// Intercept entries `alpha_i` and basis coefficients `beta_j`, with
    /// standard errors mapped back from the internal parameterisation.
    pub fn coefficients(&self, spec: &OracleSpec) -> Vec<Coefficient> {
        let kp = spec.k_prime();
        let u = spec.complement();
        let v_alpha = self.vcov.view((0, 0), (kp, kp));
        let alpha_cov = u * v_alpha * u.transpose();
        let mut out = Vec::with_capacity(spec.k() + spec.m());
        for i in 0..spec.k() {
            out.push(Coefficient {
                name: format!("alpha_{}", i + 1),
                estimate: self.alpha_hat[i],
                std_error: alpha_cov[(i, i)].max(0.0).sqrt(),
            });
        }
        for j in 0..spec.m() {
            out.push(Coefficient {
                name: format!("beta_{}", j + 1),
                estimate: self.b_coefficients[j],
                std_error: self.vcov[(kp + j, kp + j)].max(0.0).sqrt(),
            });
        }
        out
    }

    /// Standard errors of the basis coefficients.
    pub fn coefficient_std_errors(&self, spec: &OracleSpec) -> DVector<f64> {
        let kp = spec.k_prime();
        DVector::from_fn(spec.m(), |j, _| self.vcov[(kp + j, kp + j)].max(0.0).sqrt())
    }

    pub fn residuals(&self) -> impl Iterator<Item = (&str, Option<&DVector<f64>>)> {
        self.groups
            .iter()
            .map(|g| (g.group_id.as_str(), g.residual.as_ref()))
    }
}

pub(crate) fn check_policies(policies: &[DVector<f64>], n: usize, p: usize) -> Result<()> {
    if policies.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} policy vectors for {n} groups",
            policies.len()
        )));
    }
    for (i, w) in policies.iter().enumerate() {
        if w.len() != p {
            return Err(Error::InvalidInput(format!(
                "policy {i} has dimension {}, expected {p}",
                w.len()
            )));
        }
        if !all_finite_vector(w) {
            return Err(Error::InvalidInput(format!(
                "policy {i} has non-finite entries"
            )));
        }
    }
    Ok(())
}

/// Checks that `M = (1/G') sum (1, W_g)'(1, W_g)` over the included groups is
/// invertible and that there are at least `p + 1` of them.
pub(crate) fn check_policy_design<'a>(
    included: impl Iterator<Item = &'a DVector<f64>>,
    p: usize,
) -> Result<()> {
    let mut m = DMatrix::zeros(p + 1, p + 1);
    let mut count = 0usize;
    for w in included {
        let x = DVector::from_fn(p + 1, |i, _| if i == 0 { 1.0 } else { w[i - 1] });
        m += &x * x.transpose();
        count += 1;
    }
    if count < p + 1 {
        return Err(Error::DesignDeficient(format!(
            "{count} usable groups for {} policy coefficients plus intercept",
            p
        )));
    }
    m /= count as f64;
    let scale = m.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if min_eigenvalue(&m) <= 1e-12 * scale.max(1.0) {
        return Err(Error::DesignDeficient(
            "policy moment matrix M is singular".into(),
        ));
    }
    Ok(())
}

/// Each weight matrix must be `k x k`, finite, symmetric and positive
/// semidefinite (to `1e-12` relative to its scale).
pub(crate) fn check_weight_matrices(ws: &[DMatrix<f64>], k: usize) -> Result<()> {
    for (i, a) in ws.iter().enumerate() {
        if a.nrows() != k || a.ncols() != k || !all_finite_matrix(a) {
            return Err(Error::InvalidInput(format!(
                "weight matrix {i} must be finite {k}x{k}"
            )));
        }
        let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        if (a - a.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidInput(format!(
                "weight matrix {i} is not symmetric"
            )));
        }
        if min_eigenvalue(a) < -1e-12 * scale {
            return Err(Error::InvalidInput(format!(
                "weight matrix {i} is not positive semidefinite"
            )));
        }
    }
    Ok(())
}

pub(crate) fn check_estimates(estimates: &[GroupEstimate], spec: &OracleSpec) -> Result<()> {
    for e in estimates {
        if e.k() != spec.k() {
            return Err(Error::InvalidInput(format!(
                "group `{}` has k = {}, design expects {}",
                e.group_id,
                e.k(),
                spec.k()
            )));
        }
        if e.omega != e.theta_hat.is_some() {
            return Err(Error::InvalidInput(format!(
                "group `{}`: omega disagrees with theta_hat",
                e.group_id
            )));
        }
    }
    Ok(())
}

/// Weighted MD fit on the selected groups (`omega = 1`); the others are
/// dropped and counted.
pub fn fit_md(
    estimates: &[GroupEstimate],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
) -> Result<FitResult> {
    fit_md_inner(estimates, policies, spec, None)
}

/// MD fit with per-group matrix weights `A_g` (`k x k`, symmetric PSD),
/// combined multiplicatively with the design's scalar group weights.
pub fn fit_md_matrix_weighted(
    estimates: &[GroupEstimate],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
    weights: &[DMatrix<f64>],
) -> Result<FitResult> {
    if weights.len() != estimates.len() {
        return Err(Error::InvalidInput(format!(
            "{} weight matrices for {} groups",
            weights.len(),
            estimates.len()
        )));
    }
    fit_md_inner(estimates, policies, spec, Some(weights))
}

fn fit_md_inner(
    estimates: &[GroupEstimate],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
    matrix_weights: Option<&[DMatrix<f64>]>,
) -> Result<FitResult> {
    check_policies(policies, estimates.len(), spec.p())?;
    check_estimates(estimates, spec)?;
    let sizes: Vec<usize> = estimates.iter().map(|e| e.n_g).collect();
    let w = spec.weights().resolve(&sizes)?;

    let selected: Vec<usize> = (0..estimates.len())
        .filter(|&i| estimates[i].omega)
        .collect();
    if selected.is_empty() {
        return Err(Error::NoData);
    }
    check_policy_design(selected.iter().map(|&i| &policies[i]), spec.p())?;

    let k = spec.k();
    if let Some(ws) = matrix_weights {
        check_weight_matrices(ws, k)?;
    }
    let blocks: Vec<QuadBlock> = selected
        .iter()
        .map(|&i| {
            let theta = estimates[i].theta_hat.as_ref().expect("selected");
            let a = match matrix_weights {
                Some(ws) => &ws[i] * w[i],
                None => DMatrix::identity(k, k) * w[i],
            };
            let b = &a * theta;
            QuadBlock { index: i, a, b }
        })
        .collect();
    let sol = solve_blocks(&blocks, policies, spec)?;
    finish_fit(estimates, &blocks, sol, policies, spec)
}

/// Packs a solver solution into a [`FitResult`] and attaches the HC0 variance.
pub(crate) fn finish_fit(
    estimates: &[GroupEstimate],
    blocks: &[QuadBlock],
    sol: Solution,
    policies: &[DVector<f64>],
    spec: &OracleSpec,
) -> Result<FitResult> {
    let groups = blocks
        .iter()
        .zip(sol.lambdas)
        .zip(sol.fitted)
        .zip(sol.score_residuals)
        .map(|(((blk, lambda), fitted), score_residual)| {
            let e = &estimates[blk.index];
            FittedGroup {
                group_id: e.group_id.clone(),
                index: blk.index,
                lambda,
                residual: e.theta_hat.as_ref().map(|t| t - fitted),
                score_residual,
            }
        })
        .collect();

    let mut fit = FitResult {
        b_hat: sol.b_hat,
        b_coefficients: sol.coef,
        alpha_hat: sol.alpha,
        alpha_tilde: sol.alpha_tilde,
        groups,
        vcov: DMatrix::zeros(0, 0),
        n_used: blocks.len(),
        n_dropped: estimates.len() - blocks.len(),
        pseudo_inverse: sol.pseudo_inverse,
        hessian: sol.hessian,
    };
    fit.vcov = ehw_vcov(&fit, policies, spec, None)?;
    Ok(fit)
}

/// Heteroskedasticity-robust (HC0) sandwich variance of
/// `(alpha_tilde, b_coefficients)`; each group is one observation block.
/// With `clusters`, scores of groups sharing a key are summed first.
pub fn ehw_vcov(
    fit: &FitResult,
    policies: &[DVector<f64>],
    spec: &OracleSpec,
    clusters: Option<&[String]>,
) -> Result<DMatrix<f64>> {
    let dim = spec.k_prime() + spec.m();
    if fit.hessian.nrows() != dim || fit.hessian.ncols() != dim {
        return Err(Error::InvalidInput("fit does not match the design".into()));
    }
    if let Some(c) = clusters {
        if c.len() != policies.len() {
            return Err(Error::InvalidInput(format!(
                "{} cluster keys for {} groups",
                c.len(),
                policies.len()
            )));
        }
    }
    let mut order: Vec<&str> = Vec::new();
    let mut sums: HashMap<&str, DVector<f64>> = HashMap::new();
    let mut meat = DMatrix::zeros(dim, dim);
    for g in &fit.groups {
        let w = policies
            .get(g.index)
            .ok_or_else(|| Error::InvalidInput(format!("no policy for group index {}", g.index)))?;
        if w.len() != spec.p() || g.score_residual.len() != spec.k_prime() {
            return Err(Error::InvalidInput(
                "fit does not match the policies or design".into(),
            ));
        }
        let x = design_block(spec, w);
        let score = x.transpose() * &g.score_residual;
        match clusters {
            None => meat += &score * score.transpose(),
            Some(keys) => {
                let key = keys[g.index].as_str();
                match sums.get_mut(key) {
                    Some(s) => *s += score,
                    None => {
                        order.push(key);
                        sums.insert(key, score);
                    }
                }
            }
        }
    }
    for key in order {
        let s = &sums[key];
        meat += s * s.transpose();
    }
    let bread = if fit.pseudo_inverse {
        symmetric_pinv(&fit.hessian, 1e-12)
    } else {
        crate::linalg::spd_inverse(&fit.hessian)
            .unwrap_or_else(|| symmetric_pinv(&fit.hessian, 1e-12))
    };
    let v = &bread * meat * &bread;
    Ok((&v + v.transpose()) * 0.5)
}
