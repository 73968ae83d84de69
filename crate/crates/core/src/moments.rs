//! Linear moment systems `E[h1(D) - h2(D) theta] = 0` and their sample analogues.
//!
//! Parameter vectors are ordered `(intercept, effect)` for the two built-in
//! designs: in the differenced regression `dY = d_delta + tau * E + d_eps` the
//! first coordinate is the group time effect and the second the event effect.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{all_finite_matrix, all_finite_vector, is_invertible};

/// Default relative singular-value threshold for invertibility tests.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Moment contribution of a single unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitMoment {
    h1: DVector<f64>,
    h2: DMatrix<f64>,
}

impl UnitMoment {
    pub fn new(h1: DVector<f64>, h2: DMatrix<f64>) -> Result<Self> {
        let k = h1.len();
        if k == 0 {
            return Err(Error::InvalidInput(
                "moment dimension must be at least 1".into(),
            ));
        }
        if h2.nrows() != k || h2.ncols() != k {
            return Err(Error::InvalidInput(format!(
                "h2 is {}x{} but h1 has length {k}",
                h2.nrows(),
                h2.ncols()
            )));
        }
        if !all_finite_vector(&h1) || !all_finite_matrix(&h2) {
            return Err(Error::InvalidInput("moment entries must be finite".into()));
        }
        Ok(Self { h1, h2 })
    }

    pub fn k(&self) -> usize {
        self.h1.len()
    }

    pub fn h1(&self) -> &DVector<f64> {
        &self.h1
    }

    pub fn h2(&self) -> &DMatrix<f64> {
        &self.h2
    }
}

fn check_indicator(e: f64) -> Result<()> {
    if e == 0.0 || e == 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "event indicator must be 0 or 1, got {e}"
        )))
    }
}

/// Unit of the differenced OLS regression: `h1 = (1, e) dy`, `h2 = (1, e)'(1, e)`.
pub fn build_did_unit(delta_y: f64, e: f64) -> Result<UnitMoment> {
    if !delta_y.is_finite() || !e.is_finite() {
        return Err(Error::InvalidInput("non-finite DiD unit".into()));
    }
    check_indicator(e)?;
    let h1 = DVector::from_vec(vec![delta_y, e * delta_y]);
    let h2 = DMatrix::from_row_slice(2, 2, &[1.0, e, e, e * e]);
    UnitMoment::new(h1, h2)
}

/// Unit of the just-identified IV regression: `h1 = (1, z) dy`, `h2 = (1, z)'(1, e)`.
pub fn build_iv_unit(delta_y: f64, e: f64, z: f64) -> Result<UnitMoment> {
    if !delta_y.is_finite() || !e.is_finite() || !z.is_finite() {
        return Err(Error::InvalidInput("non-finite IV unit".into()));
    }
    check_indicator(e)?;
    let h1 = DVector::from_vec(vec![delta_y, z * delta_y]);
    let h2 = DMatrix::from_row_slice(2, 2, &[1.0, e, z, z * e]);
    UnitMoment::new(h1, h2)
}

/// All units observed for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    group_id: String,
    units: Vec<UnitMoment>,
}

impl GroupSample {
    /// Fails if the units disagree on the moment dimension. An empty unit list
    /// is accepted here and rejected when averaging.
    pub fn new(group_id: impl Into<String>, units: Vec<UnitMoment>) -> Result<Self> {
        let group_id = group_id.into();
        if let Some(first) = units.first() {
            let k = first.k();
            if units.iter().any(|u| u.k() != k) {
                return Err(Error::InvalidInput(format!(
                    "group `{group_id}` mixes moment dimensions"
                )));
            }
        }
        Ok(Self { group_id, units })
    }

    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn units(&self) -> &[UnitMoment] {
        &self.units
    }

    pub fn n_g(&self) -> usize {
        self.units.len()
    }

    pub fn k(&self) -> Option<usize> {
        self.units.first().map(UnitMoment::k)
    }

    pub fn push(&mut self, unit: UnitMoment) -> Result<()> {
        if let Some(k) = self.k() {
            if unit.k() != k {
                return Err(Error::InvalidInput(format!(
                    "group `{}` expects k={k}, unit has k={}",
                    self.group_id,
                    unit.k()
                )));
            }
        }
        self.units.push(unit);
        Ok(())
    }
}

/// Sample means of the unit moments of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAverages {
    pub h1: DVector<f64>,
    pub h2: DMatrix<f64>,
}

impl MomentAverages {
    pub fn k(&self) -> usize {
        self.h1.len()
    }
}

/// Arithmetic means, summed left to right in storage order then divided by `n_g`.
pub fn average_moments(sample: &GroupSample) -> Result<MomentAverages> {
    let first = sample
        .units
        .first()
        .ok_or_else(|| Error::EmptyGroup(sample.group_id.clone()))?;
    let k = first.k();
    let mut h1 = DVector::zeros(k);
    let mut h2 = DMatrix::zeros(k, k);
    for u in &sample.units {
        h1 += &u.h1;
        h2 += &u.h2;
    }
    let n = sample.units.len() as f64;
    Ok(MomentAverages {
        h1: h1 / n,
        h2: h2 / n,
    })
}

/// Outcome of solving `H2 theta = H1`.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaSolution {
    Solved(DVector<f64>),
    Singular,
}

impl ThetaSolution {
    pub fn into_option(self) -> Option<DVector<f64>> {
        match self {
            ThetaSolution::Solved(t) => Some(t),
            ThetaSolution::Singular => None,
        }
    }
}

/// Solve the sample moment system. `Singular` whenever H2 fails the
/// relative singular-value test (or has an exactly zero LU pivot).
pub fn solve_theta(avgs: &MomentAverages, rank_tol: f64) -> Result<ThetaSolution> {
    if !(rank_tol >= 0.0) || !rank_tol.is_finite() {
        return Err(Error::InvalidInput(format!(
            "rank_tol must be >= 0, got {rank_tol}"
        )));
    }
    let k = avgs.h1.len();
    if avgs.h2.nrows() != k || avgs.h2.ncols() != k {
        return Err(Error::InvalidInput(
            "moment averages have inconsistent shapes".into(),
        ));
    }
    if !all_finite_vector(&avgs.h1) || !all_finite_matrix(&avgs.h2) {
        return Err(Error::InvalidInput(
            "moment averages contain non-finite entries".into(),
        ));
    }
    if !is_invertible(&avgs.h2, rank_tol) {
        return Ok(ThetaSolution::Singular);
    }
    match avgs.h2.clone().lu().solve(&avgs.h1) {
        Some(theta) if all_finite_vector(&theta) => Ok(ThetaSolution::Solved(theta)),
        _ => Ok(ThetaSolution::Singular),
    }
}
