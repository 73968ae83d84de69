use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{DesignKind, ScenarioConfig};
use crate::error::{Error, Result};
use crate::moments::{build_did_unit, build_iv_unit, GroupSample, MomentAverages};

/// Raw unit data of one simulated group.
#[derive(Debug, Clone, PartialEq)]
pub struct SimGroup {
    pub delta_y: Vec<f64>,
    pub e: Vec<f64>,
    /// Unit instrument, IV designs only.
    pub z: Option<Vec<f64>>,
}

impl SimGroup {
    pub fn n(&self) -> usize {
        self.delta_y.len()
    }

    /// Same sums, in the same order, as averaging the unit moments.
    pub fn moment_averages(&self) -> MomentAverages {
        let n = self.n() as f64;
        let (mut y, mut ey, mut one, mut se, mut ee) = (0.0, 0.0, 0.0, 0.0, 0.0);
        match &self.z {
            None => {
                for (&dy, &e) in self.delta_y.iter().zip(&self.e) {
                    y += dy;
                    ey += e * dy;
                    one += 1.0;
                    se += e;
                    ee += e * e;
                }
                MomentAverages {
                    h1: DVector::from_vec(vec![y, ey]) / n,
                    h2: DMatrix::from_row_slice(2, 2, &[one, se, se, ee]) / n,
                }
            }
            Some(z) => {
                let (mut zy, mut sz) = (0.0, 0.0);
                for ((&dy, &e), &zi) in self.delta_y.iter().zip(&self.e).zip(z) {
                    y += dy;
                    zy += zi * dy;
                    one += 1.0;
                    se += e;
                    sz += zi;
                    ee += zi * e;
                }
                MomentAverages {
                    h1: DVector::from_vec(vec![y, zy]) / n,
                    h2: DMatrix::from_row_slice(2, 2, &[one, se, sz, ee]) / n,
                }
            }
        }
    }

    pub fn to_sample(&self, id: &str) -> Result<GroupSample> {
        let units = match &self.z {
            None => self
                .delta_y
                .iter()
                .zip(&self.e)
                .map(|(&dy, &e)| build_did_unit(dy, e))
                .collect::<Result<Vec<_>>>()?,
            Some(z) => self
                .delta_y
                .iter()
                .zip(&self.e)
                .zip(z)
                .map(|((&dy, &e), &zi)| build_iv_unit(dy, e, zi))
                .collect::<Result<Vec<_>>>()?,
        };
        GroupSample::new(id, units)
    }
}

/// One simulated replication with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub design: DesignKind,
    pub group_ids: Vec<String>,
    pub groups: Vec<SimGroup>,
    /// Full policy vectors.
    pub policies: Vec<DVector<f64>>,
    /// `(delta_g, tau_g)`.
    pub true_thetas: Vec<DVector<f64>>,
    /// Probability that a unit is treated (DiD, composition) or complies (IV).
    pub take_up: Vec<f64>,
}

impl SimDataset {
    pub fn moment_averages(&self) -> Vec<MomentAverages> {
        self.groups.iter().map(SimGroup::moment_averages).collect()
    }

    pub fn to_samples(&self) -> Result<Vec<GroupSample>> {
        self.groups
            .iter()
            .zip(&self.group_ids)
            .map(|(g, id)| g.to_sample(id))
            .collect()
    }

    /// Population Jacobian of group `g`'s unit moments.
    pub fn population_h2(&self, g: usize) -> DMatrix<f64> {
        let pi = self.take_up[g];
        match self.design {
            DesignKind::Iv => DMatrix::from_row_slice(2, 2, &[1.0, 0.5 * pi, 0.5, 0.5 * pi]),
            _ => DMatrix::from_row_slice(2, 2, &[1.0, pi, pi, pi]),
        }
    }

    /// Policies restricted to the given columns.
    pub fn policy_columns(&self, cols: &[usize]) -> Vec<DVector<f64>> {
        self.policies
            .iter()
            .map(|w| DVector::from_fn(cols.len(), |i, _| w[cols[i]]))
            .collect()
    }
}

const DATA_STREAM: u64 = 0x6461_7461;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for `(seed, purpose, replication)`; independent of scheduling.
pub(crate) fn replication_rng(seed: u64, purpose: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(purpose)));
    rng.set_stream(replication);
    rng
}

/// Mean unit effect among treated units for a composition scenario, by
/// enumeration over the two trait values.
pub fn composition_treated_mean(cfg: &ScenarioConfig, w: &[f64]) -> Result<f64> {
    let c = cfg
        .composition
        .as_ref()
        .ok_or_else(|| Error::Config("not a composition scenario".into()))?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, pt) in [(0.0, 1.0 - c.trait_prob), (1.0, c.trait_prob)] {
        let pe = cfg.selection.prob(0.0, w, t);
        num += pt * pe * c.trait_effect[t as usize];
        den += pt * pe;
    }
    if den <= 0.0 {
        return Err(Error::DegenerateScenario("no unit is ever treated".into()));
    }
    Ok(num / den)
}

/// Probability that a unit of a composition group is treated.
pub(crate) fn composition_take_up(cfg: &ScenarioConfig, w: &[f64]) -> f64 {
    let c = cfg.composition.as_ref().expect("composition");
    (1.0 - c.trait_prob) * cfg.selection.prob(0.0, w, 0.0)
        + c.trait_prob * cfg.selection.prob(0.0, w, 1.0)
}

fn draw_policy(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let support = cfg.policy_law.support();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (w, p) in &support {
        acc += p;
        if u < acc {
            return w.clone();
        }
    }
    support.last().expect("validated").0.clone()
}

/// Draws replication `replication` of a scenario.
pub fn simulate(cfg: &ScenarioConfig, replication: u64) -> Result<SimDataset> {
    cfg.validate()?;
    let mut rng = replication_rng(cfg.seed, DATA_STREAM, replication);
    let sigma = cfg.noise.sigma2.sqrt();
    let mixture = cfg.noise.mixture.clone();
    let g_count = cfg.groups;

    let mut out = SimDataset {
        design: cfg.design,
        group_ids: Vec::with_capacity(g_count),
        groups: Vec::with_capacity(g_count),
        policies: Vec::with_capacity(g_count),
        true_thetas: Vec::with_capacity(g_count),
        take_up: Vec::with_capacity(g_count),
    };
    for g in 0..g_count {
        let n = cfg.n_law.sample(rng.random());
        let w = draw_policy(cfg, &mut rng);
        let delta = cfg.lambda_law.sample(rng.random());
        let alpha = cfg.alpha_law.sample(rng.random());
        let direct: f64 = cfg.beta.iter().zip(&w).map(|(b, x)| b * x).sum();

        let noise = |rng: &mut ChaCha8Rng| {
            if sigma == 0.0 {
                return 0.0;
            }
            let z: f64 = rng.sample(StandardNormal);
            match &mixture {
                Some(m) if rng.random::<f64>() < m.p => z * sigma * m.scale,
                _ => z * sigma,
            }
        };

        let mut dy = Vec::with_capacity(n);
        let mut es = Vec::with_capacity(n);
        let (tau, take_up, z) = match cfg.design {
            DesignKind::Did => {
                let tau = alpha + direct;
                let pi = cfg.selection.prob(alpha, &w, 0.0);
                for _ in 0..n {
                    let e = if rng.random::<f64>() < pi { 1.0 } else { 0.0 };
                    dy.push(delta + tau * e + noise(&mut rng));
                    es.push(e);
                }
                (tau, pi, None)
            }
            DesignKind::Iv => {
                let tau = alpha + direct;
                let pi = cfg.selection.prob(alpha, &w, 0.0);
                let mut zs = Vec::with_capacity(n);
                for _ in 0..n {
                    let z = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
                    let comply = rng.random::<f64>() < pi;
                    let e = if comply { z } else { 0.0 };
                    dy.push(delta + tau * e + noise(&mut rng));
                    es.push(e);
                    zs.push(z);
                }
                (tau, pi, Some(zs))
            }
            DesignKind::Composition => {
                let c = cfg.composition.as_ref().expect("validated");
                let pis = [
                    cfg.selection.prob(0.0, &w, 0.0),
                    cfg.selection.prob(0.0, &w, 1.0),
                ];
                for _ in 0..n {
                    let t = usize::from(rng.random::<f64>() < c.trait_prob);
                    let e = if rng.random::<f64>() < pis[t] {
                        1.0
                    } else {
                        0.0
                    };
                    let tau_i = alpha + c.trait_effect[t] + direct;
                    dy.push(delta + tau_i * e + noise(&mut rng));
                    es.push(e);
                }
                let tau = alpha + direct + composition_treated_mean(cfg, &w)?;
                (tau, composition_take_up(cfg, &w), None)
            }
        };
        out.group_ids.push(format!("g{g:05}"));
        out.groups.push(SimGroup {
            delta_y: dy,
            e: es,
            z,
        });
        out.policies.push(DVector::from_vec(w));
        out.true_thetas.push(DVector::from_vec(vec![delta, tau]));
        out.take_up.push(take_up);
    }
    Ok(out)
}

pub fn simulate_did(cfg: &ScenarioConfig, replication: u64) -> Result<SimDataset> {
    expect_design(cfg, DesignKind::Did)?;
    simulate(cfg, replication)
}

pub fn simulate_iv(cfg: &ScenarioConfig, replication: u64) -> Result<SimDataset> {
    expect_design(cfg, DesignKind::Iv)?;
    simulate(cfg, replication)
}

pub fn simulate_composition(cfg: &ScenarioConfig, replication: u64) -> Result<SimDataset> {
    expect_design(cfg, DesignKind::Composition)?;
    simulate(cfg, replication)
}

fn expect_design(cfg: &ScenarioConfig, kind: DesignKind) -> Result<()> {
    if cfg.design != kind {
        return Err(Error::Config(format!(
            "scenario `{}` is a {:?} design, expected {kind:?}",
            cfg.name, cfg.design
        )));
    }
    Ok(())
}
