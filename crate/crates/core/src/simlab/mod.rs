//! Synthetic grouped data, exact limits by enumeration, and a Monte Carlo
//! driver.

pub mod config;
pub mod dgp;
pub mod enumerate;
pub mod montecarlo;
pub mod presets;
pub mod tsls;

pub use config::{
    CompositionBlock, DesignKind, DiscreteLaw, NoiseLaw, NoiseMixture, PolicyLaw, ScenarioConfig,
    SelectionLink, SizeLaw,
};
pub use dgp::{simulate, simulate_composition, simulate_did, simulate_iv, SimDataset, SimGroup};
pub use enumerate::{
    gmm_identity_plim, induced_gmm_scenario, induced_md_scenario, md_plim, omitted_variable_bias,
    second_stage_spec, true_coefficients, tsls_bias, OmittedVariable, TslsBias,
};
pub use montecarlo::{
    run_monte_carlo, BoundCheck, EstimatorTag, McResult, McSummary, ReplicationDraw,
};
pub use presets::{preset, PRESET_NAMES};
pub use tsls::{oracle_fit, tsls_group, tsls_pooled};
