//! Static DC network model: bus susceptance matrix, slack reduction, PTDF,
//! device incidence maps, connectivity, and linear flow solves.
//!
//! All powers are kept in MW and energies in MWh throughout; per-unit
//! quantities appear only inside branch susceptances (1 / (x τ)).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("reference error: {0}")]
    Reference(String),
    #[error("grid is disconnected into {} components: {components:?}", components.len())]
    Disconnected { components: Vec<Vec<usize>> },
    #[error("numerical error: {0}")]
    Numerical(String),
}

/// One bus record. `demand_mw` is the nominal demand used to scale demand
/// profiles; buses without demand carry 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub demand_mw: f64,
}

/// A transmission line or transformer. Flow is positive in the `from` → `to`
/// direction. Parallel branches are allowed; each keeps its own flow limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Series reactance in p.u., must be > 0.
    pub reactance: f64,
    /// Transformer tap ratio, 1.0 for plain lines, must be > 0.
    pub tap: f64,
    pub flow_limit_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    /// Quadratic cost coefficient in $/MW²h.
    pub cost_quad: f64,
    /// Linear cost coefficient in $/MWh.
    pub cost_lin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Storage {
    pub bus: usize,
    pub e_min: f64,
    pub e_max: f64,
    /// Most negative feed-in (charging), must be < 0.
    pub s_min: f64,
    /// Largest feed-in (discharging), must be > 0.
    pub s_max: f64,
    pub e0: f64,
    pub cost_quad_power: f64,
    pub cost_quad_energy: f64,
}

/// A demand point: the bus it loads and the column of the demand series that
/// drives it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demand {
    pub bus: usize,
    pub column: usize,
}

/// Static network description. Immutable after construction; the slack bus
/// must host the first generator (the slack generator), which is excluded
/// from the controllable input vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub storages: Vec<Storage>,
    pub demands: Vec<Demand>,
    pub slack_bus: usize,
    pub delta_hours: f64,
}

impl GridCase {
    pub fn validate(&self) -> Result<(), NetError> {
        let ids: BTreeMap<usize, usize> = self
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect();
        if ids.len() != self.buses.len() {
            return Err(NetError::InvalidParameter("duplicate bus ids".into()));
        }
        for (i, br) in self.branches.iter().enumerate() {
            if !ids.contains_key(&br.from) || !ids.contains_key(&br.to) {
                return Err(NetError::Reference(format!(
                    "branch {} references unknown bus ({}, {})",
                    i, br.from, br.to
                )));
            }
            if br.reactance <= 0.0 {
                return Err(NetError::InvalidParameter(format!(
                    "branch {} has non-positive reactance {}",
                    i, br.reactance
                )));
            }
            if br.tap <= 0.0 {
                return Err(NetError::InvalidParameter(format!(
                    "branch {} has non-positive tap ratio {}",
                    i, br.tap
                )));
            }
        }
        for (i, g) in self.generators.iter().enumerate() {
            if !ids.contains_key(&g.bus) {
                return Err(NetError::Reference(format!(
                    "generator {} on unknown bus {}",
                    i, g.bus
                )));
            }
        }
        for (i, s) in self.storages.iter().enumerate() {
            if !ids.contains_key(&s.bus) {
                return Err(NetError::Reference(format!(
                    "storage {} on unknown bus {}",
                    i, s.bus
                )));
            }
            if !(s.e_min <= s.e0 && s.e0 <= s.e_max) {
                return Err(NetError::InvalidParameter(format!(
                    "storage {}: e0 = {} outside [{}, {}]",
                    i, s.e0, s.e_min, s.e_max
                )));
            }
            if !(s.s_min < 0.0 && 0.0 < s.s_max) {
                return Err(NetError::InvalidParameter(format!(
                    "storage {}: power range [{}, {}] must straddle 0",
                    i, s.s_min, s.s_max
                )));
            }
        }
        for (i, d) in self.demands.iter().enumerate() {
            if !ids.contains_key(&d.bus) {
                return Err(NetError::Reference(format!(
                    "demand {} on unknown bus {}",
                    i, d.bus
                )));
            }
        }
        if !ids.contains_key(&self.slack_bus) {
            return Err(NetError::Reference(format!(
                "slack bus {} does not exist",
                self.slack_bus
            )));
        }
        match self.generators.first() {
            Some(g) if g.bus == self.slack_bus => {}
            Some(g) => {
                return Err(NetError::InvalidParameter(format!(
                    "slack bus {} must host generator 1 (found it on bus {})",
                    self.slack_bus, g.bus
                )))
            }
            None => {
                return Err(NetError::InvalidParameter(
                    "case has no generators; the slack bus must host one".into(),
                ))
            }
        }
        if self.delta_hours <= 0.0 {
            return Err(NetError::InvalidParameter(format!(
                "delta_hours = {} must be positive",
                self.delta_hours
            )));
        }
        Ok(())
    }

    /// Number of controllable inputs: all generators except the slack one,
    /// plus all storages.
    pub fn n_u(&self) -> usize {
        self.generators.len() - 1 + self.storages.len()
    }

    pub fn n_w(&self) -> usize {
        self.demands.len()
    }

    /// Output dimension |S| + 1 + |E| for y = [e; p1; f].
    pub fn n_y(&self) -> usize {
        self.storages.len() + 1 + self.branches.len()
    }

    pub fn n_storage(&self) -> usize {
        self.storages.len()
    }
}

/// Slack-reduced network matrices plus index bookkeeping.
///
/// `cg` and `cd` map the non-slack device powers u and the demands w to
/// reduced net bus injections; `storage_selector` picks the storage
/// components out of u. The PTDF satisfies `ptdf * b_red = bf_red`.
#[derive(Debug, Clone)]
pub struct ReducedModel {
    /// Full |N|×|N| bus susceptance matrix (graph Laplacian).
    pub b_full: DMatrix<f64>,
    /// Reduced susceptance with the slack row/column removed.
    pub b_red: DMatrix<f64>,
    /// Branch susceptance mapping reduced angles to flows, |E|×(|N|−1).
    pub bf_red: DMatrix<f64>,
    /// Power transfer distribution factors, |E|×(|N|−1).
    pub ptdf: DMatrix<f64>,
    /// Reduced incidence of u (non-slack generators then storages).
    pub cg: DMatrix<f64>,
    /// Reduced incidence of demands.
    pub cd: DMatrix<f64>,
    /// Storage selector in u coordinates, |S|×n_u.
    pub storage_selector: DMatrix<f64>,
    /// Bus ids in dense order.
    pub bus_ids: Vec<usize>,
    /// Dense index of the slack bus.
    pub slack_index: usize,
    /// Dense bus index for every reduced coordinate.
    pub reduced_to_dense: Vec<usize>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// Bus susceptance matrix per the weighted-Laplacian construction:
/// off-diagonal (i,j) = −Σ 1/(x τ) over parallel branches, diagonal =
/// −Σ of the row's off-diagonals.
pub fn build_bus_susceptance(case: &GridCase) -> Result<DMatrix<f64>, NetError> {
    case.validate()?;
    let index: BTreeMap<usize, usize> = case
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();
    let n = case.buses.len();
    let mut b = DMatrix::zeros(n, n);
    for br in &case.branches {
        let w = 1.0 / (br.reactance * br.tap);
        let i = index[&br.from];
        let j = index[&br.to];
        b[(i, j)] -= w;
        b[(j, i)] -= w;
        b[(i, i)] += w;
        b[(j, j)] += w;
    }
    Ok(b)
}

/// Number of connected components of the branch graph, found by traversal.
/// (The Laplacian zero-eigenvalue multiplicity equals this count; that
/// equivalence is asserted in tests, not used here.)
pub fn connected_components(case: &GridCase) -> usize {
    component_groups(case).len()
}

fn component_groups(case: &GridCase) -> Vec<Vec<usize>> {
    let index: BTreeMap<usize, usize> = case
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();
    let n = case.buses.len();
    let mut adjacency = vec![Vec::new(); n];
    for br in &case.branches {
        let i = index[&br.from];
        let j = index[&br.to];
        adjacency[i].push(j);
        adjacency[j].push(i);
    }
    let mut seen = vec![false; n];
    let mut groups = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut group = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            group.push(case.buses[v].id);
            for &nb in &adjacency[v] {
                if !seen[nb] {
                    seen[nb] = true;
                    stack.push(nb);
                }
            }
        }
        group.sort_unstable();
        groups.push(group);
    }
    groups
}

/// Remove the slack row and reference column from B, build the branch map
/// `bf_red` (flow positive from `from` to `to`), the reduced device incidence
/// maps, and the PTDF.
pub fn reduce(case: &GridCase) -> Result<ReducedModel, NetError> {
    let b_full = build_bus_susceptance(case)?;
    let groups = component_groups(case);
    if groups.len() != 1 {
        return Err(NetError::Disconnected { components: groups });
    }
    let index: BTreeMap<usize, usize> = case
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();
    let n = case.buses.len();
    let slack_index = index[&case.slack_bus];
    let reduced_to_dense: Vec<usize> = (0..n).filter(|&i| i != slack_index).collect();
    let reduced_of_dense: BTreeMap<usize, usize> = reduced_to_dense
        .iter()
        .enumerate()
        .map(|(r, &d)| (d, r))
        .collect();

    let m = n - 1;
    let mut b_red = DMatrix::zeros(m, m);
    for (ri, &di) in reduced_to_dense.iter().enumerate() {
        for (rj, &dj) in reduced_to_dense.iter().enumerate() {
            b_red[(ri, rj)] = b_full[(di, dj)];
        }
    }

    let ne = case.branches.len();
    let mut bf_red = DMatrix::zeros(ne, m);
    for (row, br) in case.branches.iter().enumerate() {
        let w = 1.0 / (br.reactance * br.tap);
        let from = index[&br.from];
        let to = index[&br.to];
        if let Some(&r) = reduced_of_dense.get(&from) {
            bf_red[(row, r)] += w;
        }
        if let Some(&r) = reduced_of_dense.get(&to) {
            bf_red[(row, r)] -= w;
        }
    }

    let n_u = case.n_u();
    let n_gen = case.generators.len();
    let mut cg = DMatrix::zeros(m, n_u);
    for (g, gen) in case.generators.iter().enumerate().skip(1) {
        if let Some(&r) = reduced_of_dense.get(&index[&gen.bus]) {
            cg[(r, g - 1)] = 1.0;
        }
    }
    for (s, st) in case.storages.iter().enumerate() {
        if let Some(&r) = reduced_of_dense.get(&index[&st.bus]) {
            cg[(r, n_gen - 1 + s)] = 1.0;
        }
    }
    let mut cd = DMatrix::zeros(m, case.demands.len());
    for (d, dem) in case.demands.iter().enumerate() {
        if let Some(&r) = reduced_of_dense.get(&index[&dem.bus]) {
            cd[(r, d)] = 1.0;
        }
    }
    let q = case.storages.len();
    let mut storage_selector = DMatrix::zeros(q, n_u);
    for s in 0..q {
        storage_selector[(s, n_gen - 1 + s)] = 1.0;
    }

    let lu = b_red.clone().lu();
    let ptdf = match lu.solve(&bf_red.transpose()) {
        // B̃ is symmetric, so M = B̃f B̃⁻¹ = (B̃⁻¹ B̃fᵀ)ᵀ.
        Some(sol) => sol.transpose(),
        None => {
            return Err(NetError::Numerical(
                "reduced susceptance matrix is singular".into(),
            ))
        }
    };

    Ok(ReducedModel {
        b_full,
        b_red,
        bf_red,
        ptdf,
        cg,
        cd,
        storage_selector,
        bus_ids: case.buses.iter().map(|b| b.id).collect(),
        slack_index,
        reduced_to_dense,
        lu,
    })
}

impl ReducedModel {
    pub fn n_buses(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn n_branches(&self) -> usize {
        self.bf_red.nrows()
    }

    /// Solve B̃ x = rhs for one right-hand side.
    pub fn solve_reduced(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, NetError> {
        self.lu
            .solve(rhs)
            .ok_or_else(|| NetError::Numerical("reduced susceptance solve failed".into()))
    }

    /// Solve B̃ X = RHS for a matrix right-hand side.
    pub fn solve_reduced_mat(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, NetError> {
        self.lu
            .solve(rhs)
            .ok_or_else(|| NetError::Numerical("reduced susceptance solve failed".into()))
    }

    /// Reduced net injection C̃g u − C̃d w.
    pub fn injection(&self, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.cg * u - &self.cd * w
    }

    /// DC power flow for non-slack device powers `u` and demands `w`.
    ///
    /// Returns the reduced angles, the branch flows, and the slack power
    /// p₁ = 1ᵀw − 1ᵀu that balances the network.
    pub fn solve_dc_flow(
        &self,
        u: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, f64), NetError> {
        let theta = self.solve_reduced(&self.injection(u, w))?;
        let flows = &self.bf_red * &theta;
        let p1 = w.sum() - u.sum();
        Ok((theta, flows, p1))
    }
}
