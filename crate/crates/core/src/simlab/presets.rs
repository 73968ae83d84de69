//! Shipped scenarios.

use super::config::{
    CompositionBlock, DesignKind, DiscreteLaw, NoiseLaw, PolicyLaw, ScenarioConfig, SelectionLink,
    SizeLaw,
};
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 11] = [
    "gmm_bias_demo",
    "selection_demo",
    "asymptotic_demo",
    "iv_compliance_demo",
    "composition_demo",
    "composition_omitted_demo",
    "selection_n3",
    "selection_n4",
    "selection_n6",
    "selection_n8",
    "selection_mixed_sizes",
];

fn logistic(a0: f64, a_alpha: f64, a_w: f64) -> SelectionLink {
    SelectionLink::Logistic {
        a0,
        a_alpha,
        a_w: vec![a_w],
        a_trait: 0.0,
        a_trait_w: vec![],
    }
}

fn did(
    name: &str,
    groups: usize,
    n_law: SizeLaw,
    selection: SelectionLink,
    sigma2: f64,
    seed: u64,
) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        design: DesignKind::Did,
        groups,
        n_law,
        policy_law: PolicyLaw::Bernoulli { rho: 0.5 },
        alpha_law: DiscreteLaw::two_point(-1.0, 1.0, 0.5),
        lambda_law: DiscreteLaw::two_point(0.0, 1.0, 0.5),
        beta: vec![1.0],
        selection,
        noise: NoiseLaw {
            sigma2,
            mixture: None,
        },
        composition: None,
        seed,
        second_stage_policies: None,
    }
}

fn selection_variant(name: &str, n_law: SizeLaw, seed: u64) -> ScenarioConfig {
    did(name, 2000, n_law, logistic(-0.8, 0.6, 1.2), 1.0, seed)
}

fn composition(name: &str, seed: u64, used: Option<Vec<usize>>) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        design: DesignKind::Composition,
        groups: 1000,
        n_law: SizeLaw::Constant(200),
        policy_law: PolicyLaw::CorrelatedPair {
            p1: 0.5,
            p2_given_w1: [0.25, 0.75],
        },
        alpha_law: DiscreteLaw::two_point(-0.5, 0.5, 0.5),
        lambda_law: DiscreteLaw::two_point(0.0, 1.0, 0.5),
        beta: vec![0.0, 1.0],
        selection: SelectionLink::Logistic {
            a0: -0.5,
            a_alpha: 0.0,
            a_w: vec![0.5],
            a_trait: -1.0,
            a_trait_w: vec![3.0],
        },
        noise: NoiseLaw {
            sigma2: 1.0,
            mixture: None,
        },
        composition: Some(CompositionBlock {
            trait_prob: 0.5,
            trait_effect: [0.0, 3.0],
        }),
        seed,
        second_stage_policies: used,
    }
}

/// Looks up a shipped scenario by name.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let cfg = match name {
        // take-up rises with both the group effect and the policy, so the
        // pooled estimator's implicit weights move with both
        "gmm_bias_demo" => did(
            name,
            2000,
            SizeLaw::Constant(200),
            logistic(-0.5, 0.8, 0.8),
            1.0,
            20_240_501,
        ),
        "selection_demo" => did(
            name,
            5000,
            SizeLaw::Constant(5),
            logistic(-1.0, 0.8, 1.5),
            1.0,
            20_240_502,
        ),
        "asymptotic_demo" => did(
            name,
            300,
            SizeLaw::Constant(2000),
            SelectionLink::Constant { pi: 0.5 },
            0.04,
            20_240_503,
        ),
        "iv_compliance_demo" => {
            let mut cfg = did(
                name,
                1000,
                SizeLaw::Constant(200),
                logistic(0.0, 1.0, 1.0),
                1.0,
                20_240_504,
            );
            cfg.design = DesignKind::Iv;
            cfg
        }
        "composition_demo" => composition(name, 20_240_505, None),
        "composition_omitted_demo" => composition(name, 20_240_506, Some(vec![1])),
        "selection_n3" => selection_variant(name, SizeLaw::Constant(3), 20_240_511),
        "selection_n4" => selection_variant(name, SizeLaw::Constant(4), 20_240_512),
        "selection_n6" => selection_variant(name, SizeLaw::Constant(6), 20_240_513),
        "selection_n8" => selection_variant(name, SizeLaw::Constant(8), 20_240_514),
        "selection_mixed_sizes" => selection_variant(
            name,
            SizeLaw::TwoPoint {
                small: 3,
                large: 12,
                p_large: 0.4,
            },
            20_240_515,
        ),
        _ => {
            return Err(Error::Config(format!(
                "unknown scenario `{name}`; available presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
