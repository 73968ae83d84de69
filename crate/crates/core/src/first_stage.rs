//! Per-group first-stage estimation.
//!
//! The plug-in estimator inverts the sample Jacobian and is undefined when it
//! is singular (`omega = false`). The design-based alternative inverts a known
//! population Jacobian instead and therefore exists for every group.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{all_finite_matrix, is_invertible};
use crate::moments::{average_moments, solve_theta, GroupSample, MomentAverages};

/// First-stage output for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEstimate {
    pub group_id: String,
    pub theta_hat: Option<DVector<f64>>,
    pub omega: bool,
    pub n_g: usize,
    pub h1_hat: DVector<f64>,
    pub h2_hat: DMatrix<f64>,
}

impl GroupEstimate {
    /// Builds the record from already-averaged moments.
    pub fn from_averages(
        group_id: impl Into<String>,
        n_g: usize,
        avgs: MomentAverages,
        rank_tol: f64,
    ) -> Result<Self> {
        let theta_hat = solve_theta(&avgs, rank_tol)?.into_option();
        Ok(Self {
            group_id: group_id.into(),
            omega: theta_hat.is_some(),
            theta_hat,
            n_g,
            h1_hat: avgs.h1,
            h2_hat: avgs.h2,
        })
    }

    /// Selection indicator as 0/1.
    pub fn omega_indicator(&self) -> u8 {
        u8::from(self.omega)
    }

    pub fn k(&self) -> usize {
        self.h1_hat.len()
    }
}

/// Plug-in estimator `theta_hat = H2_hat^{-1} H1_hat`.
pub fn estimate_group(sample: &GroupSample, rank_tol: f64) -> Result<GroupEstimate> {
    let avgs = average_moments(sample)?;
    GroupEstimate::from_averages(sample.group_id(), sample.n_g(), avgs, rank_tol)
}

/// Runs [`estimate_group`] over all groups, preserving input order.
pub fn estimate_groups(samples: &[GroupSample], rank_tol: f64) -> Result<Vec<GroupEstimate>> {
    samples
        .par_iter()
        .map(|s| estimate_group(s, rank_tol))
        .collect()
}

/// Where a population Jacobian came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxiliarySource {
    Supplied,
    Modeled,
}

/// Known population Jacobian `H2_g` for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryDesign {
    h2_pop: DMatrix<f64>,
    source: AuxiliarySource,
}

impl AuxiliaryDesign {
    pub fn new(h2_pop: DMatrix<f64>, source: AuxiliarySource, rank_tol: f64) -> Result<Self> {
        if !h2_pop.is_square() || h2_pop.is_empty() {
            return Err(Error::InvalidAuxiliary(format!(
                "population Jacobian must be square, got {}x{}",
                h2_pop.nrows(),
                h2_pop.ncols()
            )));
        }
        if !all_finite_matrix(&h2_pop) {
            return Err(Error::InvalidAuxiliary(
                "non-finite population Jacobian".into(),
            ));
        }
        if !is_invertible(&h2_pop, rank_tol) {
            return Err(Error::InvalidAuxiliary(
                "population Jacobian is singular".into(),
            ));
        }
        Ok(Self { h2_pop, source })
    }

    /// Jacobian of the differenced OLS design with known event probability
    /// `pi`: `[[1, pi], [pi, pi]]`.
    pub fn did(pi: f64) -> Result<Self> {
        check_probability(pi)?;
        let h2 = DMatrix::from_row_slice(2, 2, &[1.0, pi, pi, pi]);
        Self::new(
            h2,
            AuxiliarySource::Modeled,
            crate::moments::DEFAULT_RANK_TOL,
        )
    }

    pub fn h2_pop(&self) -> &DMatrix<f64> {
        &self.h2_pop
    }

    pub fn source(&self) -> AuxiliarySource {
        self.source
    }
}

/// Design-based estimator `theta_alt = H2_pop^{-1} H1_hat`; always selected.
pub fn estimate_group_alt(sample: &GroupSample, aux: &AuxiliaryDesign) -> Result<GroupEstimate> {
    let avgs = average_moments(sample)?;
    estimate_alt_from_averages(sample.group_id(), sample.n_g(), avgs, aux)
}

pub(crate) fn estimate_alt_from_averages(
    group_id: &str,
    n_g: usize,
    avgs: MomentAverages,
    aux: &AuxiliaryDesign,
) -> Result<GroupEstimate> {
    if aux.h2_pop.nrows() != avgs.k() {
        return Err(Error::InvalidAuxiliary(format!(
            "group `{group_id}`: auxiliary Jacobian is {}x{} but moments have k={}",
            aux.h2_pop.nrows(),
            aux.h2_pop.ncols(),
            avgs.k()
        )));
    }
    let theta = aux
        .h2_pop
        .clone()
        .lu()
        .solve(&avgs.h1)
        .ok_or_else(|| Error::InvalidAuxiliary("population Jacobian is singular".into()))?;
    Ok(GroupEstimate {
        group_id: group_id.to_string(),
        theta_hat: Some(theta),
        omega: true,
        n_g,
        h1_hat: avgs.h1,
        h2_hat: avgs.h2,
    })
}

fn check_probability(pi: f64) -> Result<()> {
    if pi > 0.0 && pi < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidProbability(pi))
    }
}

/// Inverse-probability-weighted effect `(1/n) sum (E - pi) / (pi (1 - pi)) dY`.
pub fn ipw_tau(delta_y: &[f64], e: &[f64], pi: f64) -> Result<f64> {
    check_probability(pi)?;
    if delta_y.len() != e.len() {
        return Err(Error::InvalidInput(format!(
            "outcome has {} entries, indicator has {}",
            delta_y.len(),
            e.len()
        )));
    }
    if delta_y.is_empty() {
        return Err(Error::InvalidInput(
            "ipw_tau needs at least one unit".into(),
        ));
    }
    if delta_y.iter().chain(e).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite entries in ipw_tau".into()));
    }
    let denom = pi * (1.0 - pi);
    let sum: f64 = delta_y
        .iter()
        .zip(e)
        .map(|(&dy, &ei)| (ei - pi) / denom * dy)
        .sum();
    Ok(sum / delta_y.len() as f64)
}
