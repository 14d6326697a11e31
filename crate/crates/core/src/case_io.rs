//! Case and series I/O: a MATPOWER-subset text parser, the native JSON case
//! schema, demand-series CSV ingestion, and result-log CSV output.

use crate::netmodel::{Branch, Bus, Demand, Generator, GridCase, NetError, Storage};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("unsupported cost model: {0}")]
    UnsupportedCost(String),
    #[error("reference error: {0}")]
    Reference(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Numeric matrices lifted verbatim from a MATPOWER case text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawMatpowerCase {
    pub base_mva: f64,
    pub bus: Vec<Vec<f64>>,
    pub branch: Vec<Vec<f64>>,
    pub gen: Vec<Vec<f64>>,
    pub gencost: Vec<Vec<f64>>,
}

/// Storage records to graft onto a parsed case.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StorageAugmentation {
    pub storages: Vec<Storage>,
}

/// Demand time series in MW, one row per step, one column per demand entry
/// of the owning case.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandSeries {
    pub data: DMatrix<f64>,
    pub delta_hours: f64,
}

impl DemandSeries {
    pub fn steps(&self) -> usize {
        self.data.nrows()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlackPolicy {
    /// Slack is the bus of the first in-service generator (default).
    #[default]
    FirstGenerator,
    /// Force a specific bus; a generator there is moved to the front.
    Bus(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvertOptions {
    pub slack_policy: SlackPolicy,
    /// Replacement for RATE_A = 0 ("unlimited" in the source format).
    pub default_flow_limit_mw: f64,
    pub delta_hours: f64,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self {
            slack_policy: SlackPolicy::FirstGenerator,
            default_flow_limit_mw: 300.0,
            delta_hours: 0.25,
        }
    }
}

/// Parse the documented MATPOWER subset: `mpc.<name> = [ rows ];` matrices
/// with `;`-separated rows and whitespace-separated numbers, `%` comments,
/// and the `mpc.baseMVA = <number>;` scalar. Unrecognized fields are skipped.
pub fn parse_matpower(text: &str) -> Result<RawMatpowerCase, CaseIoError> {
    let mut matrices: BTreeMap<String, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    let mut base_mva: Option<f64> = None;

    // (name, rows, tokens of the unfinished row, line the row started on)
    let mut open: Option<(String, Vec<(usize, Vec<f64>)>, Vec<f64>, usize)> = None;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('%') {
            Some(p) => &raw_line[..p],
            None => raw_line,
        };

        let mut rest = line;
        if open.is_none() {
            let trimmed = line.trim();
            if let Some(assign) = trimmed.strip_prefix("mpc.") {
                let Some(eq) = assign.find('=') else { continue };
                let name = assign[..eq].trim().to_string();
                let value = assign[eq + 1..].trim_start();
                if let Some(body) = value.strip_prefix('[') {
                    open = Some((name, Vec::new(), Vec::new(), line_no));
                    rest = body;
                } else if name == "baseMVA" {
                    let token = value.trim_end().trim_end_matches(';').trim();
                    let v = token.parse::<f64>().map_err(|_| CaseIoError::Parse {
                        line: line_no,
                        message: format!("baseMVA value `{token}` is not a number"),
                    })?;
                    base_mva = Some(v);
                    continue;
                } else {
                    // scalar or string field we do not use
                    continue;
                }
            } else {
                continue;
            }
        }

        // inside a matrix: consume `rest`, honoring row separators and `]`
        let (name, rows, tokens, row_line) = open.as_mut().expect("matrix state");
        let (body, closed) = match rest.find(']') {
            Some(p) => (&rest[..p], true),
            None => (rest, false),
        };
        for piece in body.split_inclusive(';') {
            let ends_row = piece.ends_with(';');
            let content = piece.trim_end_matches(';');
            for token in content.split_whitespace() {
                let v = token.parse::<f64>().map_err(|_| CaseIoError::Parse {
                    line: line_no,
                    message: format!("`{token}` in mpc.{name} is not a number"),
                })?;
                if tokens.is_empty() {
                    *row_line = line_no;
                }
                tokens.push(v);
            }
            if ends_row && !tokens.is_empty() {
                rows.push((*row_line, std::mem::take(tokens)));
            }
        }
        if closed {
            if !tokens.is_empty() {
                rows.push((*row_line, std::mem::take(tokens)));
            }
            let (name, rows, _, _) = open.take().expect("matrix state");
            matrices.insert(name, rows);
        }
    }

    if let Some((name, _, _, start)) = open {
        return Err(CaseIoError::Parse {
            line: start,
            message: format!("mpc.{name} matrix is never closed"),
        });
    }

    let take = |name: &str| -> Result<Vec<Vec<f64>>, CaseIoError> {
        let rows = matrices
            .get(name)
            .ok_or_else(|| CaseIoError::MissingField(format!("mpc.{name}")))?;
        let width = rows.first().map_or(0, |(_, r)| r.len());
        for (line, row) in rows {
            if row.len() != width {
                return Err(CaseIoError::Parse {
                    line: *line,
                    message: format!(
                        "ragged row in mpc.{name}: {} entries, expected {width}",
                        row.len()
                    ),
                });
            }
        }
        Ok(rows.iter().map(|(_, r)| r.clone()).collect())
    };

    let case = RawMatpowerCase {
        base_mva: base_mva.ok_or_else(|| CaseIoError::MissingField("mpc.baseMVA".into()))?,
        bus: take("bus")?,
        branch: take("branch")?,
        gen: take("gen")?,
        gencost: matrices
            .contains_key("gencost")
            .then(|| take("gencost"))
            .transpose()?
            .unwrap_or_default(),
    };
    if !case.gencost.is_empty() && case.gencost.len() != case.gen.len() {
        return Err(CaseIoError::Validation(format!(
            "mpc.gencost has {} rows but mpc.gen has {}",
            case.gencost.len(),
            case.gen.len()
        )));
    }
    Ok(case)
}

// MATPOWER column positions (0-based).
const BUS_ID: usize = 0;
const BUS_PD: usize = 2;
const BR_FROM: usize = 0;
const BR_TO: usize = 1;
const BR_X: usize = 3;
const BR_RATE_A: usize = 5;
const BR_TAP: usize = 8;
const BR_STATUS: usize = 10;
const GEN_BUS: usize = 0;
const GEN_STATUS: usize = 7;
const GEN_PMAX: usize = 8;
const GEN_PMIN: usize = 9;

/// Build a [`GridCase`] from a parsed case plus storage augmentation.
///
/// Out-of-service branches and generators (status 0) are dropped, RATE_A = 0
/// maps to the configured default limit, tap 0 means 1, and buses with
/// Pd > 0 become demand entries in bus order. Only polynomial cost model 2
/// of degree ≤ 2 is accepted.
pub fn to_grid_case(
    raw: &RawMatpowerCase,
    aug: &StorageAugmentation,
    options: &ConvertOptions,
) -> Result<GridCase, CaseIoError> {
    let need = |row: &[f64], col: usize, what: &str| -> Result<f64, CaseIoError> {
        row.get(col)
            .copied()
            .ok_or_else(|| CaseIoError::Validation(format!("{what} row has no column {}", col + 1)))
    };

    let mut buses = Vec::with_capacity(raw.bus.len());
    let mut bus_ids = BTreeMap::new();
    for row in &raw.bus {
        let id = need(row, BUS_ID, "bus")? as usize;
        let pd = need(row, BUS_PD, "bus")?;
        bus_ids.insert(id, ());
        buses.push(Bus { id, demand_mw: pd });
    }

    let mut branches = Vec::new();
    for row in &raw.branch {
        if need(row, BR_STATUS, "branch")? == 0.0 {
            continue;
        }
        let from = need(row, BR_FROM, "branch")? as usize;
        let to = need(row, BR_TO, "branch")? as usize;
        if !bus_ids.contains_key(&from) || !bus_ids.contains_key(&to) {
            return Err(CaseIoError::Reference(format!(
                "branch ({from}, {to}) references an unknown bus"
            )));
        }
        let rate_a = need(row, BR_RATE_A, "branch")?;
        let tap = need(row, BR_TAP, "branch")?;
        branches.push(Branch {
            from,
            to,
            reactance: need(row, BR_X, "branch")?,
            tap: if tap == 0.0 { 1.0 } else { tap },
            flow_limit_mw: if rate_a == 0.0 {
                options.default_flow_limit_mw
            } else {
                rate_a
            },
        });
    }

    if raw.gencost.is_empty() && !raw.gen.is_empty() {
        return Err(CaseIoError::MissingField("mpc.gencost".into()));
    }
    let mut generators = Vec::new();
    for (row, cost) in raw.gen.iter().zip(&raw.gencost) {
        if need(row, GEN_STATUS, "gen")? == 0.0 {
            continue;
        }
        let bus = need(row, GEN_BUS, "gen")? as usize;
        if !bus_ids.contains_key(&bus) {
            return Err(CaseIoError::Reference(format!(
                "generator on unknown bus {bus}"
            )));
        }
        let model = need(cost, 0, "gencost")?;
        if model != 2.0 {
            return Err(CaseIoError::UnsupportedCost(format!(
                "gencost model {model} (only polynomial model 2 is supported)"
            )));
        }
        let ncost = need(cost, 3, "gencost")? as usize;
        if ncost > 3 {
            return Err(CaseIoError::UnsupportedCost(format!(
                "polynomial degree {} > 2",
                ncost.saturating_sub(1)
            )));
        }
        let coeff = |k: usize| -> Result<f64, CaseIoError> { need(cost, 4 + k, "gencost") };
        let (cost_quad, cost_lin) = match ncost {
            3 => (coeff(0)?, coeff(1)?),
            2 => (0.0, coeff(0)?),
            _ => (0.0, 0.0),
        };
        generators.push(Generator {
            bus,
            p_min: need(row, GEN_PMIN, "gen")?,
            p_max: need(row, GEN_PMAX, "gen")?,
            cost_quad,
            cost_lin,
        });
    }
    if generators.is_empty() {
        return Err(CaseIoError::Validation(
            "no in-service generators".into(),
        ));
    }

    let slack_bus = match options.slack_policy {
        SlackPolicy::FirstGenerator => generators[0].bus,
        SlackPolicy::Bus(bus) => {
            let pos = generators
                .iter()
                .position(|g| g.bus == bus)
                .ok_or_else(|| {
                    CaseIoError::Reference(format!(
                        "slack policy names bus {bus} but no in-service generator sits there"
                    ))
                })?;
            let slack_gen = generators.remove(pos);
            generators.insert(0, slack_gen);
            bus
        }
    };

    let mut storages = Vec::new();
    for st in &aug.storages {
        if !bus_ids.contains_key(&st.bus) {
            return Err(CaseIoError::Reference(format!(
                "storage augmentation on unknown bus {}",
                st.bus
            )));
        }
        storages.push(st.clone());
    }

    let demands = buses
        .iter()
        .filter(|b| b.demand_mw > 0.0)
        .enumerate()
        .map(|(column, b)| Demand { bus: b.id, column })
        .collect();

    let case = GridCase {
        buses,
        branches,
        generators,
        storages,
        demands,
        slack_bus,
        delta_hours: options.delta_hours,
    };
    case.validate()?;
    Ok(case)
}

const CASE_KEYS: &[&str] = &[
    "buses",
    "branches",
    "generators",
    "storages",
    "demands",
    "slack_bus",
    "delta_hours",
];

pub fn case_from_json_str(text: &str) -> Result<GridCase, CaseIoError> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CaseIoError::Validation(e.to_string()))?;
    if let Some(map) = value.as_object() {
        for key in map.keys() {
            if !CASE_KEYS.contains(&key.as_str()) {
                log::warn!("case JSON: ignoring unknown key `{key}`");
            }
        }
    }
    let mut known = value;
    if let Some(map) = known.as_object_mut() {
        map.retain(|k, _| CASE_KEYS.contains(&k.as_str()));
    }
    let case: GridCase =
        serde_json::from_value(known).map_err(|e| CaseIoError::Validation(e.to_string()))?;
    case.validate()?;
    Ok(case)
}

pub fn load_case_json(path: &Path) -> Result<GridCase, CaseIoError> {
    case_from_json_str(&std::fs::read_to_string(path)?)
}

pub fn save_case_json(case: &GridCase, path: &Path) -> Result<(), CaseIoError> {
    let mut text = serde_json::to_string_pretty(case)
        .map_err(|e| CaseIoError::Validation(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_augmentation_json(path: &Path) -> Result<StorageAugmentation, CaseIoError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CaseIoError::Validation(e.to_string()))
}

/// Load a demand CSV with header `bus_<id>,...` and align its columns to the
/// case's demand ordering.
pub fn load_demand_csv(path: &Path, case: &GridCase) -> Result<DemandSeries, CaseIoError> {
    demand_from_csv_str(&std::fs::read_to_string(path)?, case)
}

pub fn demand_from_csv_str(text: &str, case: &GridCase) -> Result<DemandSeries, CaseIoError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CaseIoError::Alignment("empty demand CSV".into()))?;
    let mut csv_col_of_bus = BTreeMap::new();
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    for (col, name) in names.iter().enumerate() {
        let bus: usize = name
            .strip_prefix("bus_")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                CaseIoError::Alignment(format!("demand CSV header `{name}` is not `bus_<id>`"))
            })?;
        csv_col_of_bus.insert(bus, col);
    }
    if names.len() != case.demands.len() {
        return Err(CaseIoError::Alignment(format!(
            "demand CSV has {} columns, case has {} demands",
            names.len(),
            case.demands.len()
        )));
    }
    let mut order = Vec::with_capacity(case.demands.len());
    for d in &case.demands {
        let col = csv_col_of_bus.get(&d.bus).ok_or_else(|| {
            CaseIoError::Alignment(format!("demand CSV has no column for bus {}", d.bus))
        })?;
        order.push(*col);
    }

    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| CaseIoError::Parse {
                    line: idx + 1,
                    message: format!("`{t}` is not a number"),
                })
            })
            .collect::<Result<_, _>>()?;
        if values.len() != names.len() {
            return Err(CaseIoError::Parse {
                line: idx + 1,
                message: format!(
                    "row has {} entries, header has {}",
                    values.len(),
                    names.len()
                ),
            });
        }
        for &v in &values {
            if v < 0.0 {
                return Err(CaseIoError::Validation(format!(
                    "negative demand {v} at line {}",
                    idx + 1
                )));
            }
        }
        rows.push(values);
    }
    let mut data = DMatrix::zeros(rows.len(), case.demands.len());
    for (r, row) in rows.iter().enumerate() {
        for (j, &src) in order.iter().enumerate() {
            data[(r, j)] = row[src];
        }
    }
    Ok(DemandSeries {
        data,
        delta_hours: case.delta_hours,
    })
}

pub fn save_demand_csv(
    series: &DemandSeries,
    case: &GridCase,
    path: &Path,
) -> Result<(), CaseIoError> {
    let mut out = String::new();
    let header: Vec<String> = case
        .demands
        .iter()
        .map(|d| format!("bus_{}", d.bus))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in 0..series.data.nrows() {
        for c in 0..series.data.ncols() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", series.data[(r, c)]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One closed-loop step of one controller in the results log.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub step: usize,
    pub controller: String,
    pub stage_cost: f64,
    pub max_abs_flow: f64,
    /// Wall time of the OCP solved at this step; 0 when the step reused a
    /// previously computed plan (control horizon > 1).
    pub solve_seconds: f64,
    pub storage_energy: Vec<f64>,
}

pub fn results_to_csv(rows: &[ResultRow], n_storage: usize) -> String {
    let mut out = String::from("step,controller,stage_cost,max_abs_flow,solve_seconds");
    for k in 1..=n_storage {
        let _ = write!(out, ",e_{k}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            row.step, row.controller, row.stage_cost, row.max_abs_flow, row.solve_seconds
        );
        for e in &row.storage_energy {
            let _ = write!(out, ",{e}");
        }
        out.push('\n');
    }
    out
}

pub fn save_results_csv(
    rows: &[ResultRow],
    n_storage: usize,
    path: &Path,
) -> Result<(), CaseIoError> {
    std::fs::write(path, results_to_csv(rows, n_storage))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    const TINY: &str = "\
function mpc = tiny
% a comment line
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t138\t1\t1.06\t0.94;
\t2\t1\t30\t10\t0\t0\t1\t1\t0\t138\t1\t1.06\t0.94; % trailing comment
];
mpc.gen = [
\t1\t0\t0\t99\t-99\t1\t100\t1\t150\t0;
\t2\t0\t0\t99\t-99\t1\t100\t0\t50\t0;
];
mpc.branch = [
\t1\t2\t0.01\t0.05\t0\t300\t0\t0\t0\t0\t1\t-360\t360;
\t1\t2\t0.01\t0.08\t0\t0\t0\t0\t0.97\t0\t1\t-360\t360;
\t1\t2\t0.01\t0.08\t0\t0\t0\t0\t0\t0\t0\t-360\t360;
];
mpc.gencost = [
\t2\t0\t0\t3\t0.02\t15\t0;
\t2\t0\t0\t3\t0.01\t10\t0;
];
";

    #[test]
    fn parses_base_mva_and_rows() {
        let raw = parse_matpower(TINY).unwrap();
        assert_eq!(raw.base_mva, 100.0);
        assert_eq!(raw.bus.len(), 2);
        assert_eq!(raw.branch.len(), 3);
        assert_eq!(raw.branch[0].len(), 13);
        assert_eq!(raw.branch[0][3], 0.05);
    }

    #[test]
    fn comments_do_not_change_parse() {
        let stripped: String = TINY
            .lines()
            .filter(|l| !l.trim_start().starts_with('%'))
            .map(|l| match l.find('%') {
                Some(p) => &l[..p],
                None => l,
            })
            .collect::<Vec<_>>()
            .join("\n");
        assert_eq!(parse_matpower(TINY).unwrap(), parse_matpower(&stripped).unwrap());
    }

    #[test]
    fn ragged_row_reports_line() {
        let bad = TINY.replace("\t1\t2\t0.01\t0.05\t0\t300\t0\t0\t0\t0\t1\t-360\t360;", "\t1\t2\t0.01;");
        match parse_matpower(&bad) {
            Err(CaseIoError::Parse { line, .. }) => assert!(line > 0),
            other => panic!("expected ragged-row parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_section_is_reported() {
        let no_gen: String = TINY
            .lines()
            .filter(|l| !l.contains("mpc.gen ") && !l.contains("99"))
            .collect::<Vec<_>>()
            .join("\n");
        match parse_matpower(&no_gen) {
            Err(CaseIoError::MissingField(f)) => assert!(f.contains("gen")),
            other => panic!("expected missing-field error, got {other:?}"),
        }
    }

    #[test]
    fn convert_applies_matpower_conventions() {
        let raw = parse_matpower(TINY).unwrap();
        let case = to_grid_case(&raw, &StorageAugmentation::default(), &ConvertOptions::default())
            .unwrap();
        // status-0 branch and generator are dropped, nothing else
        assert_eq!(case.branches.len(), 2);
        assert_eq!(case.generators.len(), 1);
        // tap 0 -> 1, explicit tap kept
        assert_eq!(case.branches[0].tap, 1.0);
        assert_eq!(case.branches[1].tap, 0.97);
        // RATE_A 0 -> default limit
        assert_eq!(case.branches[0].flow_limit_mw, 300.0);
        assert_eq!(case.branches[1].flow_limit_mw, 300.0);
        assert_eq!(case.slack_bus, 1);
        assert_eq!(case.demands.len(), 1);
        assert_eq!(case.demands[0].bus, 2);
    }

    #[test]
    fn convert_rejects_unsupported_costs() {
        let raw = parse_matpower(TINY).unwrap();
        let mut piecewise = raw.clone();
        piecewise.gencost[0][0] = 1.0;
        let err = to_grid_case(&piecewise, &StorageAugmentation::default(), &ConvertOptions::default())
            .unwrap_err();
        assert!(matches!(err, CaseIoError::UnsupportedCost(_)));

        let mut cubic = raw;
        cubic.gencost[0] = vec![2.0, 0.0, 0.0, 4.0, 0.1, 0.02, 15.0, 0.0];
        cubic.gencost[1] = cubic.gencost[0].clone();
        let err = to_grid_case(&cubic, &StorageAugmentation::default(), &ConvertOptions::default())
            .unwrap_err();
        assert!(matches!(err, CaseIoError::UnsupportedCost(_)));
    }

    #[test]
    fn storage_augmentation_is_appended() {
        let raw = parse_matpower(TINY).unwrap();
        let aug = StorageAugmentation {
            storages: vec![Storage {
                bus: 2,
                e_min: 0.0,
                e_max: 200.0,
                s_min: -50.0,
                s_max: 50.0,
                e0: 100.0,
                cost_quad_power: 0.01,
                cost_quad_energy: 1e-5,
            }],
        };
        let case = to_grid_case(&raw, &aug, &ConvertOptions::default()).unwrap();
        assert_eq!(case.storages.len(), 1);
        assert_eq!(case.storages[0].e_max, 200.0);

        let mut bad = aug;
        bad.storages[0].bus = 77;
        let err = to_grid_case(
            &parse_matpower(TINY).unwrap(),
            &bad,
            &ConvertOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CaseIoError::Reference(_)));
    }

    #[test]
    fn json_round_trip_is_identity() {
        for case in [fixtures::three_bus_triangle(), fixtures::six_bus_two_storage()] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("case.json");
            save_case_json(&case, &path).unwrap();
            let loaded = load_case_json(&path).unwrap();
            assert_eq!(case, loaded);
        }
    }

    #[test]
    fn json_missing_and_unknown_keys() {
        let case = fixtures::three_bus_triangle();
        let mut value = serde_json::to_value(&case).unwrap();
        value.as_object_mut().unwrap().remove("branches");
        let err = case_from_json_str(&value.to_string()).unwrap_err();
        match err {
            CaseIoError::Validation(msg) => assert!(msg.contains("branches"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }

        let mut value = serde_json::to_value(&case).unwrap();
        value
            .as_object_mut()
            .unwrap()
            .insert("comment".into(), serde_json::json!("extra"));
        let loaded = case_from_json_str(&value.to_string()).unwrap();
        assert_eq!(loaded, case);
    }

    #[test]
    fn demand_csv_alignment() {
        let case = fixtures::six_bus_two_storage();
        // columns deliberately permuted relative to case order
        let mut text = String::from("bus_4,bus_6,bus_2\n");
        for t in 0..96 {
            text.push_str(&format!("{},{},{}\n", 30 + t % 3, 50, 40));
        }
        let series = demand_from_csv_str(&text, &case).unwrap();
        assert_eq!(series.data.nrows(), 96);
        assert_eq!(series.data.ncols(), 3);
        // case order is bus 2, 4, 6
        assert_eq!(series.data[(0, 0)], 40.0);
        assert_eq!(series.data[(0, 1)], 30.0);
        assert_eq!(series.data[(0, 2)], 50.0);

        let err = demand_from_csv_str("bus_2,bus_4,bus_9\n1,2,3\n", &case).unwrap_err();
        assert!(matches!(err, CaseIoError::Alignment(_)));
        let err = demand_from_csv_str("bus_2,bus_4\n1,2\n", &case).unwrap_err();
        assert!(matches!(err, CaseIoError::Alignment(_)));
    }

    #[test]
    fn results_csv_shape() {
        let rows: Vec<ResultRow> = (0..3)
            .flat_map(|step| {
                ["exact", "seqid", "ddopf"].into_iter().map(move |c| ResultRow {
                    step,
                    controller: c.to_string(),
                    stage_cost: 1.5,
                    max_abs_flow: 10.0,
                    solve_seconds: 0.0,
                    storage_energy: vec![20.0, 30.0],
                })
            })
            .collect();
        let csv = results_to_csv(&rows, 2);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,controller,stage_cost,max_abs_flow,solve_seconds,e_1,e_2"
        );
        assert_eq!(lines.count(), 9);
    }
}
