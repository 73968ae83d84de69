//! Dumps one simulated replication in the ingestion CSV layout.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use mdgmm::simlab::{simulate, DesignKind, ScenarioConfig};

use crate::error::{CliError, Result};

pub const UNITS_FILE: &str = "units.csv";
pub const POLICIES_FILE: &str = "policies.csv";
pub const AUXILIARY_FILE: &str = "auxiliary.csv";
pub const CONFIG_FILE: &str = "config.json";

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

/// Writes `units.csv`, `policies.csv`, `auxiliary.csv` and a ready-to-run
/// `config.json` for replication `replication` into `dir`.
///
/// Floats use the shortest representation that parses back to the same bits.
pub fn export_replication(cfg: &ScenarioConfig, replication: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let data = simulate(cfg, replication)?;
    let policies = data.policy_columns(&cfg.used_policies());

    let path = dir.join(UNITS_FILE);
    let mut out = create(&path)?;
    let iv = data.design == DesignKind::Iv;
    let io = |e| CliError::io(dir.join(UNITS_FILE), e);
    writeln!(
        out,
        "{}",
        if iv {
            "group_id,delta_y,e,z"
        } else {
            "group_id,delta_y,e"
        }
    )
    .map_err(io)?;
    for (id, g) in data.group_ids.iter().zip(&data.groups) {
        for i in 0..g.n() {
            match &g.z {
                Some(z) => writeln!(out, "{id},{},{},{}", g.delta_y[i], g.e[i], z[i]),
                None => writeln!(out, "{id},{},{}", g.delta_y[i], g.e[i]),
            }
            .map_err(io)?;
        }
    }
    out.flush().map_err(io)?;

    let path = dir.join(POLICIES_FILE);
    let mut out = create(&path)?;
    let io = |e| CliError::io(dir.join(POLICIES_FILE), e);
    let p = policies.first().map_or(0, |w| w.len());
    let header: Vec<String> = (1..=p).map(|j| format!("w_{j}")).collect();
    writeln!(out, "group_id,{}", header.join(",")).map_err(io)?;
    for (id, w) in data.group_ids.iter().zip(&policies) {
        let cells: Vec<String> = w.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{id},{}", cells.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)?;

    let path = dir.join(AUXILIARY_FILE);
    let mut out = create(&path)?;
    let io = |e| CliError::io(dir.join(AUXILIARY_FILE), e);
    writeln!(out, "group_id,h2_11,h2_12,h2_21,h2_22").map_err(io)?;
    for (g, id) in data.group_ids.iter().enumerate() {
        let h = data.population_h2(g);
        writeln!(
            out,
            "{id},{},{},{},{}",
            h[(0, 0)],
            h[(0, 1)],
            h[(1, 0)],
            h[(1, 1)]
        )
        .map_err(io)?;
    }
    out.flush().map_err(io)?;

    let config = serde_json::json!({
        "method": "md",
        "data": { "units": UNITS_FILE, "policies": POLICIES_FILE, "auxiliary": AUXILIARY_FILE },
    });
    let path = dir.join(CONFIG_FILE);
    let text =
        serde_json::to_string_pretty(&config).map_err(|e| CliError::Internal(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}
