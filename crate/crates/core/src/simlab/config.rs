use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Finite distribution over real values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteLaw {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteLaw {
    pub fn point(v: f64) -> Self {
        Self {
            values: vec![v],
            probs: vec![1.0],
        }
    }

    pub fn two_point(a: f64, b: f64, p_b: f64) -> Self {
        Self {
            values: vec![a, b],
            probs: vec![1.0 - p_b, p_b],
        }
    }

    pub(crate) fn validate(&self, what: &str) -> Result<()> {
        check_probs(&self.probs, self.values.len(), what)?;
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("{what}: values must be finite")));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.probs)
            .map(|(v, p)| v * p)
            .sum()
    }

    pub(crate) fn sample(&self, u: f64) -> f64 {
        let mut acc = 0.0;
        for (v, p) in self.values.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *v;
            }
        }
        *self.values.last().expect("validated")
    }

    pub(crate) fn support(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values
            .iter()
            .cloned()
            .zip(self.probs.iter().cloned())
            .filter(|(_, p)| *p > 0.0)
    }
}

fn check_probs(probs: &[f64], n: usize, what: &str) -> Result<()> {
    if probs.len() != n || n == 0 {
        return Err(Error::Config(format!(
            "{what}: need one probability per value and at least one value"
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config(format!(
            "{what}: probabilities must lie in [0, 1]"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "{what}: probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Distribution of group sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeLaw {
    Constant(usize),
    TwoPoint {
        small: usize,
        large: usize,
        p_large: f64,
    },
    Support {
        values: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl SizeLaw {
    pub(crate) fn validate(&self) -> Result<()> {
        let ok = match self {
            SizeLaw::Constant(n) => *n >= 1,
            SizeLaw::TwoPoint {
                small,
                large,
                p_large,
            } => *small >= 1 && *large >= 1 && (0.0..=1.0).contains(p_large),
            SizeLaw::Support { values, probs } => {
                check_probs(probs, values.len(), "n_law")?;
                values.iter().all(|v| *v >= 1)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "n_law: group sizes must be at least 1 and probabilities in [0, 1]".into(),
            ))
        }
    }

    pub(crate) fn support(&self) -> Vec<(usize, f64)> {
        let raw = match self {
            SizeLaw::Constant(n) => vec![(*n, 1.0)],
            SizeLaw::TwoPoint {
                small,
                large,
                p_large,
            } => vec![(*small, 1.0 - p_large), (*large, *p_large)],
            SizeLaw::Support { values, probs } => {
                values.iter().cloned().zip(probs.iter().cloned()).collect()
            }
        };
        raw.into_iter().filter(|(_, p)| *p > 0.0).collect()
    }

    pub(crate) fn sample(&self, u: f64) -> usize {
        let support = self.support();
        let mut acc = 0.0;
        for (n, p) in &support {
            acc += p;
            if u < acc {
                return *n;
            }
        }
        support.last().expect("validated").0
    }
}

/// Distribution of the group policy vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyLaw {
    /// Scalar `W ~ Bernoulli(rho)`.
    Bernoulli { rho: f64 },
    /// Scalar `W` uniform over the listed values.
    Grid { values: Vec<f64> },
    /// `W1 ~ Bernoulli(p1)`, `W2 | W1 ~ Bernoulli(p2_given_w1[W1])`.
    CorrelatedPair { p1: f64, p2_given_w1: [f64; 2] },
}

impl PolicyLaw {
    pub fn dim(&self) -> usize {
        match self {
            PolicyLaw::CorrelatedPair { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let ok = match self {
            PolicyLaw::Bernoulli { rho } => (0.0..=1.0).contains(rho),
            PolicyLaw::Grid { values } => {
                !values.is_empty() && values.iter().all(|v| v.is_finite())
            }
            PolicyLaw::CorrelatedPair { p1, p2_given_w1 } => {
                (0.0..=1.0).contains(p1) && p2_given_w1.iter().all(|p| (0.0..=1.0).contains(p))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("policy_law: invalid parameters".into()))
        }
    }

    /// Finite support with probabilities.
    pub fn support(&self) -> Vec<(Vec<f64>, f64)> {
        let raw = match self {
            PolicyLaw::Bernoulli { rho } => vec![(vec![0.0], 1.0 - rho), (vec![1.0], *rho)],
            PolicyLaw::Grid { values } => {
                let p = 1.0 / values.len() as f64;
                values.iter().map(|v| (vec![*v], p)).collect()
            }
            PolicyLaw::CorrelatedPair { p1, p2_given_w1 } => {
                let mut out = Vec::with_capacity(4);
                for (w1, pw1) in [(0.0, 1.0 - p1), (1.0, *p1)] {
                    let p2 = p2_given_w1[w1 as usize];
                    out.push((vec![w1, 0.0], pw1 * (1.0 - p2)));
                    out.push((vec![w1, 1.0], pw1 * p2));
                }
                out
            }
        };
        raw.into_iter().filter(|(_, p)| *p > 0.0).collect()
    }
}

/// Maps group (and unit trait) characteristics to the probability that a
/// unit is treated (DiD) or complies (IV).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionLink {
    Constant {
        pi: f64,
    },
    /// `logistic(a0 + a_alpha * alpha + a_w . W + a_trait * t + t * (a_trait_w . W))`
    Logistic {
        a0: f64,
        #[serde(default)]
        a_alpha: f64,
        #[serde(default)]
        a_w: Vec<f64>,
        #[serde(default)]
        a_trait: f64,
        #[serde(default)]
        a_trait_w: Vec<f64>,
    },
}

impl SelectionLink {
    pub fn prob(&self, alpha: f64, w: &[f64], trait_value: f64) -> f64 {
        match self {
            SelectionLink::Constant { pi } => *pi,
            SelectionLink::Logistic {
                a0,
                a_alpha,
                a_w,
                a_trait,
                a_trait_w,
            } => {
                let dot = |c: &[f64]| c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                let x = a0 + a_alpha * alpha + dot(a_w) + trait_value * (a_trait + dot(a_trait_w));
                1.0 / (1.0 + (-x).exp())
            }
        }
    }

    fn validate(&self, p: usize) -> Result<()> {
        match self {
            SelectionLink::Constant { pi } if !(0.0..=1.0).contains(pi) => Err(Error::Config(
                format!("selection: constant probability {pi} outside [0, 1]"),
            )),
            SelectionLink::Logistic {
                a0,
                a_alpha,
                a_w,
                a_trait,
                a_trait_w,
            } => {
                if a_w.len() > p || a_trait_w.len() > p {
                    return Err(Error::Config(format!(
                        "selection: at most {p} policy coefficients"
                    )));
                }
                if ![*a0, *a_alpha, *a_trait]
                    .iter()
                    .chain(a_w)
                    .chain(a_trait_w)
                    .all(|v| v.is_finite())
                {
                    return Err(Error::Config(
                        "selection: coefficients must be finite".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Unit noise: Gaussian with variance `sigma2`; with `mixture`, a unit's
/// standard deviation is multiplied by `scale` with probability `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLaw {
    pub sigma2: f64,
    #[serde(default)]
    pub mixture: Option<NoiseMixture>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseMixture {
    pub p: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// Before/after outcome difference regressed on a treatment indicator.
    Did,
    /// Treatment instrumented by a randomly assigned unit instrument; the
    /// group policy doubles as the group-level instrument.
    Iv,
    /// Difference design with unit-level effect heterogeneity and
    /// trait-dependent selection.
    Composition,
}

/// Unit traits for the composition design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionBlock {
    /// `P(t = 1)`.
    pub trait_prob: f64,
    /// Effect shift `mu_t` for `t = 0, 1`.
    pub trait_effect: [f64; 2],
}

/// Data-generating process for Monte Carlo studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub design: DesignKind,
    pub groups: usize,
    pub n_law: SizeLaw,
    pub policy_law: PolicyLaw,
    /// Group effect-coordinate intercepts `alpha_g`.
    pub alpha_law: DiscreteLaw,
    /// Group time effects `delta_g`, absorbed by the group effect.
    pub lambda_law: DiscreteLaw,
    /// Effect of each policy component on the unit effect.
    pub beta: Vec<f64>,
    pub selection: SelectionLink,
    pub noise: NoiseLaw,
    #[serde(default)]
    pub composition: Option<CompositionBlock>,
    pub seed: u64,
    /// Policy columns used by second-stage estimators; all when absent.
    #[serde(default)]
    pub second_stage_policies: Option<Vec<usize>>,
}

impl ScenarioConfig {
    pub fn policy_dim(&self) -> usize {
        self.policy_law.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Config("groups must be at least 1".into()));
        }
        self.n_law.validate()?;
        self.policy_law.validate()?;
        self.alpha_law.validate("alpha_law")?;
        self.lambda_law.validate("lambda_law")?;
        let p = self.policy_dim();
        if self.beta.len() != p || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config(format!("beta must have {p} finite entries")));
        }
        self.selection.validate(p)?;
        if !(self.noise.sigma2 >= 0.0) || !self.noise.sigma2.is_finite() {
            return Err(Error::Config("noise.sigma2 must be finite and >= 0".into()));
        }
        if let Some(m) = &self.noise.mixture {
            if !(0.0..=1.0).contains(&m.p) || !(m.scale >= 0.0) || !m.scale.is_finite() {
                return Err(Error::Config(
                    "noise.mixture: p in [0, 1] and finite scale >= 0 required".into(),
                ));
            }
        }
        if let Some(cols) = &self.second_stage_policies {
            if cols.is_empty() || cols.iter().any(|c| *c >= p) {
                return Err(Error::Config(format!(
                    "second_stage_policies must list columns below {p}"
                )));
            }
            let mut sorted = cols.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != cols.len() {
                return Err(Error::Config("second_stage_policies has duplicates".into()));
            }
        }
        match (self.design, &self.composition) {
            (DesignKind::Composition, None) => {
                return Err(Error::Config(
                    "composition design needs a composition block".into(),
                ))
            }
            (DesignKind::Composition, Some(c)) => {
                if p != 2 {
                    return Err(Error::Config(
                        "composition design needs a two-dimensional policy".into(),
                    ));
                }
                if !(0.0..=1.0).contains(&c.trait_prob)
                    || c.trait_effect.iter().any(|v| !v.is_finite())
                {
                    return Err(Error::Config(
                        "composition: invalid trait parameters".into(),
                    ));
                }
                if let SelectionLink::Logistic {
                    a_alpha,
                    a_w,
                    a_trait_w,
                    ..
                } = &self.selection
                {
                    let moves_w2 = a_w.get(1).is_some_and(|v| *v != 0.0)
                        || a_trait_w.get(1).is_some_and(|v| *v != 0.0);
                    if *a_alpha != 0.0 || moves_w2 {
                        return Err(Error::Config(
                            "composition: selection may depend on the trait and W1 only".into(),
                        ));
                    }
                }
            }
            (_, Some(_)) => {
                return Err(Error::Config(
                    "composition block given for a non-composition design".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    /// Policy columns entering the second stage.
    pub fn used_policies(&self) -> Vec<usize> {
        self.second_stage_policies
            .clone()
            .unwrap_or_else(|| (0..self.policy_dim()).collect())
    }
}
