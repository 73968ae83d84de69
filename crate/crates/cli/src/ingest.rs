//! CSV ingestion of unit data, group policies and auxiliary Jacobians.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use mdgmm::moments::{build_did_unit, build_iv_unit, GroupSample, UnitMoment};
use nalgebra::{DMatrix, DVector};

use crate::error::{CliError, Result};

/// Which unit moments the data supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentKind {
    Did,
    Iv,
}

/// Units grouped in first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitTable {
    pub kind: MomentKind,
    pub samples: Vec<GroupSample>,
    /// Per-group weight from the `weight` column, when present.
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub p: usize,
    pub rows: HashMap<String, DVector<f64>>,
}

/// Units aligned with their policies.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub units: UnitTable,
    pub policies: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn group_ids(&self) -> Vec<String> {
        self.units
            .samples
            .iter()
            .map(|s| s.group_id().to_string())
            .collect()
    }
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn name(path: &Path) -> String {
    path.display().to_string()
}

fn csv_error(file: &str, e: csv::Error) -> CliError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => {
            format!("expected {expected_len} fields, found {len}")
        }
        csv::ErrorKind::Utf8 { .. } => "invalid UTF-8".to_string(),
        _ => e.to_string(),
    };
    CliError::Parse {
        file: file.to_string(),
        line,
        column: "-".into(),
        message,
    }
}

struct Header {
    index: HashMap<String, usize>,
}

impl Header {
    fn read<R: Read>(rdr: &mut csv::Reader<R>, file: &str) -> Result<Self> {
        let headers = rdr.headers().map_err(|e| csv_error(file, e))?.clone();
        let mut index = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            if index.insert(h.to_string(), i).is_some() {
                return Err(CliError::Schema {
                    file: file.into(),
                    message: format!("duplicate column `{h}`"),
                });
            }
        }
        Ok(Self { index })
    }

    fn require(&self, file: &str, col: &str) -> Result<usize> {
        self.index
            .get(col)
            .copied()
            .ok_or_else(|| CliError::Schema {
                file: file.into(),
                message: format!("missing required column `{col}`"),
            })
    }

    fn reject_unknown(&self, file: &str, known: &[&str]) -> Result<()> {
        let mut names: Vec<_> = self.index.iter().collect();
        names.sort_by_key(|(_, i)| **i);
        for (h, _) in names {
            if !known.contains(&h.as_str()) {
                return Err(CliError::Schema {
                    file: file.into(),
                    message: format!("unknown column `{h}`"),
                });
            }
        }
        Ok(())
    }
}

struct Row<'a> {
    file: &'a str,
    line: u64,
    record: &'a csv::StringRecord,
}

impl Row<'_> {
    fn error(&self, column: &str, message: impl Into<String>) -> CliError {
        CliError::Parse {
            file: self.file.into(),
            line: self.line,
            column: column.into(),
            message: message.into(),
        }
    }

    fn text(&self, idx: usize, column: &str) -> Result<&str> {
        match self.record.get(idx) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(self.error(column, "missing value")),
        }
    }

    fn number(&self, idx: usize, column: &str) -> Result<f64> {
        let raw = self.text(idx, column)?;
        let v: f64 = raw
            .parse()
            .map_err(|_| self.error(column, format!("`{raw}` is not a number")))?;
        if !v.is_finite() {
            return Err(self.error(column, format!("`{raw}` is not finite")));
        }
        Ok(v)
    }
}

/// Reads `group_id,delta_y,e[,z][,weight]`.
pub fn ingest_units(path: &Path) -> Result<UnitTable> {
    let file = name(path);
    let mut rdr = open(path)?;
    let header = Header::read(&mut rdr, &file)?;
    header.reject_unknown(&file, &["group_id", "delta_y", "e", "z", "weight"])?;
    let gid = header.require(&file, "group_id")?;
    let dy = header.require(&file, "delta_y")?;
    let e = header.require(&file, "e")?;
    let z = header.index.get("z").copied();
    let wcol = header.index.get("weight").copied();

    let mut order: Vec<String> = Vec::new();
    let mut units: HashMap<String, Vec<UnitMoment>> = HashMap::new();
    let mut weights: HashMap<String, f64> = HashMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(err) => return Err(csv_error(&file, err)),
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row = Row {
            file: &file,
            line,
            record: &record,
        };
        let id = row.text(gid, "group_id")?.to_string();
        let delta_y = row.number(dy, "delta_y")?;
        let ev = row.number(e, "e")?;
        let unit = match z {
            Some(zi) => build_iv_unit(delta_y, ev, row.number(zi, "z")?),
            None => build_did_unit(delta_y, ev),
        }
        .map_err(|err| row.error("-", err.to_string()))?;
        if let Some(wi) = wcol {
            let w = row.number(wi, "weight")?;
            if w < 0.0 {
                return Err(row.error("weight", "weight must be nonnegative"));
            }
            match weights.get(&id) {
                Some(prev) if *prev != w => {
                    return Err(
                        row.error("weight", format!("group `{id}` already has weight {prev}"))
                    )
                }
                _ => {
                    weights.insert(id.clone(), w);
                }
            }
        }
        match units.get_mut(&id) {
            Some(list) => list.push(unit),
            None => {
                order.push(id.clone());
                units.insert(id, vec![unit]);
            }
        }
    }
    if order.is_empty() {
        return Err(CliError::Schema {
            file,
            message: "no data rows".into(),
        });
    }
    let samples = order
        .iter()
        .map(|id| GroupSample::new(id.clone(), units.remove(id).expect("grouped")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let weights = wcol.map(|_| order.iter().map(|id| weights[id]).collect());
    Ok(UnitTable {
        kind: if z.is_some() {
            MomentKind::Iv
        } else {
            MomentKind::Did
        },
        samples,
        weights,
    })
}

/// Reads `group_id,w_1[,w_2,...]`.
pub fn ingest_policies(path: &Path) -> Result<PolicyTable> {
    let file = name(path);
    let mut rdr = open(path)?;
    let header = Header::read(&mut rdr, &file)?;
    let gid = header.require(&file, "group_id")?;
    let p = header.index.len() - 1;
    if p == 0 {
        return Err(CliError::Schema {
            file,
            message: "need at least one policy column w_1".into(),
        });
    }
    let names: Vec<String> = (1..=p).map(|j| format!("w_{j}")).collect();
    let cols = names
        .iter()
        .map(|n| header.require(&file, n))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = HashMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(err) => return Err(csv_error(&file, err)),
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row = Row {
            file: &file,
            line,
            record: &record,
        };
        let id = row.text(gid, "group_id")?.to_string();
        let w = cols
            .iter()
            .zip(&names)
            .map(|(&c, n)| row.number(c, n))
            .collect::<Result<Vec<_>>>()?;
        if rows.insert(id.clone(), DVector::from_vec(w)).is_some() {
            return Err(row.error("group_id", format!("group `{id}` listed twice")));
        }
    }
    Ok(PolicyTable { p, rows })
}

/// Reads `group_id,h2_11,...,h2_kk` (row-major population Jacobians).
pub fn ingest_auxiliary(path: &Path, k: usize) -> Result<HashMap<String, DMatrix<f64>>> {
    let file = name(path);
    let mut rdr = open(path)?;
    let header = Header::read(&mut rdr, &file)?;
    let gid = header.require(&file, "group_id")?;
    let mut names = Vec::with_capacity(k * k);
    for i in 1..=k {
        for j in 1..=k {
            names.push(format!("h2_{i}{j}"));
        }
    }
    let mut known: Vec<&str> = names.iter().map(String::as_str).collect();
    known.push("group_id");
    header.reject_unknown(&file, &known)?;
    let cols = names
        .iter()
        .map(|n| header.require(&file, n))
        .collect::<Result<Vec<_>>>()?;

    let mut out = HashMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(err) => return Err(csv_error(&file, err)),
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row = Row {
            file: &file,
            line,
            record: &record,
        };
        let id = row.text(gid, "group_id")?.to_string();
        let vals = cols
            .iter()
            .zip(&names)
            .map(|(&c, n)| row.number(c, n))
            .collect::<Result<Vec<_>>>()?;
        if out
            .insert(id.clone(), DMatrix::from_row_slice(k, k, &vals))
            .is_some()
        {
            return Err(row.error("group_id", format!("group `{id}` listed twice")));
        }
    }
    Ok(out)
}

/// Loads units and policies and aligns them; every unit group needs a policy.
pub fn load_dataset(units: &Path, policies: &Path) -> Result<Dataset> {
    let table = ingest_units(units)?;
    let pol = ingest_policies(policies)?;
    let aligned = table
        .samples
        .iter()
        .map(|s| {
            pol.rows
                .get(s.group_id())
                .cloned()
                .ok_or_else(|| CliError::Schema {
                    file: name(policies),
                    message: format!(
                        "group `{}` from {} has no policy row",
                        s.group_id(),
                        name(units)
                    ),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        units: table,
        policies: aligned,
    })
}
