//! Block-weighted quadratic second-stage objective.
//!
//! Every group contributes `x' a_g x - 2 x' b_g` with
//! `x = alpha + Gamma lambda_g + B W_g`. Profiling `lambda_g` out gives the
//! blocks `a*_g, b*_g`, which live in the complement of `Gamma`; in the
//! orthonormal complement coordinates the remaining problem is linear least
//! squares in `(alpha_tilde, c)` and is solved via the Schur complement of its
//! normal equations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetric_pinv};
use crate::md_estimator::OracleSpec;

pub(crate) struct QuadBlock {
    pub index: usize,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

pub(crate) struct Solution {
    pub coef: DVector<f64>,
    pub alpha_tilde: DVector<f64>,
    pub alpha: DVector<f64>,
    pub b_hat: DMatrix<f64>,
    pub lambdas: Vec<DVector<f64>>,
    /// `alpha + Gamma lambda_g + B W_g`.
    pub fitted: Vec<DVector<f64>>,
    pub score_residuals: Vec<DVector<f64>>,
    pub hessian: DMatrix<f64>,
    pub pseudo_inverse: bool,
}

/// `X_g = [I_k', B~_1 W_g, ..., B~_m W_g]` with `B~_j = U' B_j`.
pub(crate) fn design_block(spec: &OracleSpec, w: &DVector<f64>) -> DMatrix<f64> {
    let kp = spec.k_prime();
    let m = spec.m();
    let mut x = DMatrix::zeros(kp, kp + m);
    x.view_mut((0, 0), (kp, kp)).fill_with_identity();
    for (j, bt) in spec.projected_basis().iter().enumerate() {
        x.set_column(kp + j, &(bt * w));
    }
    x
}

struct Profiled {
    a_check: DMatrix<f64>,
    b_check: DVector<f64>,
    /// `(Gamma' a Gamma)^+ Gamma'`, used to recover `lambda`.
    lambda_map: DMatrix<f64>,
}

fn profile(
    spec: &OracleSpec,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    pinv_flag: &mut bool,
) -> Profiled {
    let gamma = spec.gamma();
    let u = spec.complement();
    if gamma.ncols() == 0 {
        let ac = u.transpose() * a * u;
        return Profiled {
            a_check: (&ac + ac.transpose()) * 0.5,
            b_check: u.transpose() * b,
            lambda_map: DMatrix::zeros(0, spec.k()),
        };
    }
    let ga = gamma.transpose() * a;
    let gag = &ga * gamma;
    let gag_inv = match spd_inverse(&gag) {
        Some(inv) => inv,
        None => {
            *pinv_flag = true;
            symmetric_pinv(&gag, 1e-12)
        }
    };
    let lambda_map = &gag_inv * gamma.transpose();
    let k_mat = ga.transpose() * &gag_inv;
    let a_star = a - &k_mat * &ga;
    let b_star = b - &k_mat * (gamma.transpose() * b);
    let ac = u.transpose() * a_star * u;
    Profiled {
        a_check: (&ac + ac.transpose()) * 0.5,
        b_check: u.transpose() * b_star,
        lambda_map,
    }
}

pub(crate) fn solve_blocks(
    blocks: &[QuadBlock],
    policies: &[DVector<f64>],
    spec: &OracleSpec,
) -> Result<Solution> {
    let kp = spec.k_prime();
    let m = spec.m();
    let dim = kp + m;
    let mut pseudo = false;

    let mut h = DMatrix::zeros(dim, dim);
    let mut r = DVector::zeros(dim);
    let mut profiled = Vec::with_capacity(blocks.len());
    let mut designs = Vec::with_capacity(blocks.len());
    for blk in blocks {
        let pr = profile(spec, &blk.a, &blk.b, &mut pseudo);
        let x = design_block(spec, &policies[blk.index]);
        let xa = x.transpose() * &pr.a_check;
        h += &xa * &x;
        r += x.transpose() * &pr.b_check;
        profiled.push(pr);
        designs.push(x);
    }
    let h = (&h + h.transpose()) * 0.5;

    let h11 = h.view((0, 0), (kp, kp)).clone_owned();
    let h11_inv = match spd_inverse(&h11) {
        Some(inv) => inv,
        None => {
            pseudo = true;
            symmetric_pinv(&h11, 1e-12)
        }
    };
    let r1 = r.rows(0, kp).clone_owned();
    let (alpha_tilde, coef) = if m == 0 {
        (&h11_inv * &r1, DVector::zeros(0))
    } else {
        let h12 = h.view((0, kp), (kp, m)).clone_owned();
        let h22 = h.view((kp, kp), (m, m)).clone_owned();
        let r2 = r.rows(kp, m).clone_owned();
        let s = &h22 - h12.transpose() * &h11_inv * &h12;
        let s = (&s + s.transpose()) * 0.5;
        let s_chol = s.clone().cholesky().ok_or_else(|| {
            Error::DesignDeficient(
                "policy coefficients are not identified (Schur complement is singular)".into(),
            )
        })?;
        let scale = s.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let diag_min = s_chol
            .l()
            .diagonal()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if !(diag_min * diag_min > 1e-13 * scale) {
            return Err(Error::DesignDeficient(
                "policy coefficients are not identified (Schur complement is singular)".into(),
            ));
        }
        let coef = s_chol.solve(&(&r2 - h12.transpose() * &h11_inv * &r1));
        let alpha_tilde = &h11_inv * (&r1 - &h12 * &coef);
        (alpha_tilde, coef)
    };

    let alpha = spec.complement() * &alpha_tilde;
    let b_hat = spec.b_from_coefficients(coef.as_slice());
    let mut phi = DVector::zeros(dim);
    phi.rows_mut(0, kp).copy_from(&alpha_tilde);
    phi.rows_mut(kp, m).copy_from(&coef);

    let mut lambdas = Vec::with_capacity(blocks.len());
    let mut fitted = Vec::with_capacity(blocks.len());
    let mut score_residuals = Vec::with_capacity(blocks.len());
    for ((blk, pr), x) in blocks.iter().zip(&profiled).zip(&designs) {
        let xg = &alpha + &b_hat * &policies[blk.index];
        let lambda = &pr.lambda_map * (&blk.b - &blk.a * &xg);
        let full = &xg + spec.gamma() * &lambda;
        score_residuals.push(&pr.b_check - &pr.a_check * (x * &phi));
        lambdas.push(lambda);
        fitted.push(full);
    }

    Ok(Solution {
        coef,
        alpha_tilde,
        alpha,
        b_hat,
        lambdas,
        fitted,
        score_residuals,
        hessian: h,
        pseudo_inverse: pseudo,
    })
}
