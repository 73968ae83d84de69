//! Machine-readable reports and their fixed-width text rendering.

use std::fmt::Write as _;

use mdgmm::diagnostics::{BoundReport, ResidualKind, SelectionReport};
use mdgmm::simlab::{McSummary, ScenarioConfig};
use serde::Serialize;

use crate::config::RunConfig;

pub const REPORT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

/// First-stage Jacobian conditioning over the selected groups.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conditioning {
    pub selected: usize,
    /// Smallest singular value of `H2_hat`: minimum and median across groups.
    pub min_sigma: Option<f64>,
    pub median_sigma: Option<f64>,
    pub min_inverse_condition: Option<f64>,
    pub median_inverse_condition: Option<f64>,
    pub ill_conditioned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub group_id: String,
    pub n_g: usize,
    pub omega: bool,
    pub theta_hat: Option<Vec<f64>>,
    pub residual: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheckSummary {
    pub checked: usize,
    pub skipped: usize,
    pub violations: usize,
    /// Largest realised distance over its bound among replications that
    /// dropped groups.
    pub max_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnumeratedLimits {
    pub md_bias: Option<Vec<f64>>,
    pub gmm_bias: Option<Vec<f64>>,
    pub tsls_bias: Option<f64>,
    pub omitted_variable_bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationBlock {
    pub scenario: ScenarioConfig,
    pub replications: usize,
    pub truth: Vec<f64>,
    pub summaries: Vec<McSummary>,
    pub bound_checks: BoundCheckSummary,
    pub enumerated: EnumeratedLimits,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub method: Option<String>,
    pub coefficients: Vec<CoefficientRow>,
    pub pseudo_inverse: bool,
    pub selection: Option<SelectionReport>,
    pub bias_bound: Option<BoundReport>,
    pub conditioning: Option<Conditioning>,
    pub groups: Option<Vec<GroupRow>>,
    pub simulation: Option<SimulationBlock>,
    pub warnings: Vec<String>,
    pub timing: Timing,
}

impl Report {
    pub fn new(command: &str, config: RunConfig) -> Self {
        Self {
            version: REPORT_VERSION.to_string(),
            command: command.to_string(),
            config,
            method: None,
            coefficients: Vec::new(),
            pseudo_inverse: false,
            selection: None,
            bias_bound: None,
            conditioning: None,
            groups: None,
            simulation: None,
            warnings: Vec::new(),
            timing: Timing { seconds: 0.0 },
        }
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// Fixed-width summary for the terminal.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mdgmm {} {}", self.version, self.command);
        if let Some(m) = &self.method {
            let _ = writeln!(out, "method: {m}");
        }
        if !self.coefficients.is_empty() {
            let _ = writeln!(
                out,
                "\n{:<12} {:>14} {:>14}",
                "coefficient", "estimate", "std. error"
            );
            for c in &self.coefficients {
                let _ = writeln!(
                    out,
                    "{:<12} {:>14.6} {:>14.6}",
                    c.name, c.estimate, c.std_error
                );
            }
            if self.pseudo_inverse {
                let _ = writeln!(
                    out,
                    "warning: weakly identified fit, a pseudo-inverse was used"
                );
            }
        }
        if let Some(s) = &self.selection {
            let _ = writeln!(
                out,
                "\ngroups {:>8}   dropped {:>6}   share {:>8.4}   1/sqrt(G) {:>8.4}{}",
                s.groups,
                s.dropped,
                s.share,
                s.heuristic_threshold,
                if s.flag { "   FLAG" } else { "" }
            );
        }
        if let Some(b) = &self.bias_bound {
            let kind = match b.residuals {
                ResidualKind::Oracle => "oracle",
                ResidualKind::Proxy => "proxy",
            };
            let _ = writeln!(
                out,
                "bias bound {:>12.6e}   ({kind} residuals, kappa {:.4})",
                b.bound_value, b.components.kappa
            );
        }
        if let Some(c) = &self.conditioning {
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3e}"));
            let _ = writeln!(
                out,
                "smallest singular value: min {}  median {}  ill-conditioned {}",
                fmt(c.min_sigma),
                fmt(c.median_sigma),
                c.ill_conditioned
            );
        }
        if let Some(sim) = &self.simulation {
            let _ = writeln!(
                out,
                "\nscenario {}   replications {}",
                sim.scenario.name, sim.replications
            );
            let _ = writeln!(
                out,
                "{:<12} {:<8} {:>10} {:>10} {:>10} {:>10} {:>9} {:>8} {:>6}",
                "estimator", "coef", "mean", "bias", "sd", "mc_se", "coverage", "dropped", "fail"
            );
            for s in &sim.summaries {
                let _ = writeln!(
                    out,
                    "{:<12} {:<8} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>9.3} {:>8.4} {:>6}",
                    s.estimator.as_str(),
                    s.coefficient,
                    s.mean,
                    s.bias,
                    s.sd,
                    s.mc_se,
                    s.coverage,
                    s.mean_dropped_share,
                    s.failures
                );
            }
            let b = &sim.bound_checks;
            let e = &sim.enumerated;
            if let Some(v) = &e.md_bias {
                let _ = writeln!(out, "enumerated md bias   {v:?}");
            }
            if let Some(v) = &e.gmm_bias {
                let _ = writeln!(out, "enumerated gmm bias  {v:?}");
            }
            if let Some(v) = e.tsls_bias {
                let _ = writeln!(out, "enumerated tsls bias {v:.6}");
            }
            if let Some(v) = e.omitted_variable_bias {
                let _ = writeln!(out, "omitted-variable bias {v:.6}");
            }
            let _ = writeln!(
                out,
                "bound checks {}   skipped {}   violations {}",
                b.checked, b.skipped, b.violations
            );
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        let _ = writeln!(out, "\nelapsed {:.3}s", self.timing.seconds);
        out
    }
}
