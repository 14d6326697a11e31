//! The three predictive controllers compared by this lab — exact-model MPC,
//! sequential PTDF identification + MPC, and direct data-driven OPF — behind
//! one interface, plus the regression-equivalence verifier connecting the
//! data-driven representation to classical least-squares PTDF estimation.

mod ddopf;
mod exact;
mod seqid;

pub use ddopf::{ddopf_plan, ddopf_plan_segmented, DdopfController, DdopfOptions};
pub use exact::{exact_mpc_plan, ExactMpc, ExactMpcTemplate};
pub use seqid::{
    regression_equivalence_check, seqid_estimate_ptdf, EquivalenceReport, PtdfEstimate, SeqIdMpc,
};

use crate::hankel::HankelError;
use crate::netmodel::{GridCase, NetError, ReducedModel};
use crate::plant::PlantError;
use crate::qpsolve::{QpError, QpSettings, QpStatus};
use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),
    #[error("unbounded schedule: {0}")]
    Unbounded(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Hankel(#[from] HankelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Exact,
    SeqId,
    Ddopf,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Exact => "exact",
            ControllerKind::SeqId => "seqid",
            ControllerKind::Ddopf => "ddopf",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(ControllerKind::Exact),
            "seqid" => Ok(ControllerKind::SeqId),
            "ddopf" => Ok(ControllerKind::Ddopf),
            other => Err(format!("unknown controller `{other}`")),
        }
    }
}

/// Quadratic stage cost ℓ(u, y) = uᵀRu + rᵀu + yᵀQy + qᵀy in $ per step.
#[derive(Debug, Clone)]
pub struct StageCost {
    pub r_quad: DMatrix<f64>,
    pub r_lin: DVector<f64>,
    pub q_quad: DMatrix<f64>,
    pub q_lin: DVector<f64>,
}

/// Knobs for assembling a stage cost out of a case.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CostOptions {
    /// Quadratic price on every line flow, $/MW²h.
    pub flow_quad_cost: f64,
    /// Price the slack generation with generator 1's coefficients (the
    /// experiments leave the slack unpriced).
    pub price_slack: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            flow_quad_cost: 1e-5,
            price_slack: false,
        }
    }
}

impl StageCost {
    pub fn from_case(case: &GridCase, options: &CostOptions) -> Result<Self, ControllerError> {
        let n_u = case.n_u();
        let n_y = case.n_y();
        let q = case.n_storage();
        let mut r_quad = DMatrix::zeros(n_u, n_u);
        let mut r_lin = DVector::zeros(n_u);
        for (g, gen) in case.generators.iter().enumerate().skip(1) {
            r_quad[(g - 1, g - 1)] = gen.cost_quad;
            r_lin[g - 1] = gen.cost_lin;
        }
        let offset = case.generators.len() - 1;
        for (s, st) in case.storages.iter().enumerate() {
            r_quad[(offset + s, offset + s)] = st.cost_quad_power;
        }
        let mut q_quad = DMatrix::zeros(n_y, n_y);
        let mut q_lin = DVector::zeros(n_y);
        for (s, st) in case.storages.iter().enumerate() {
            q_quad[(s, s)] = st.cost_quad_energy;
        }
        if options.price_slack {
            q_quad[(q, q)] = case.generators[0].cost_quad;
            q_lin[q] = case.generators[0].cost_lin;
        }
        for b in 0..case.branches.len() {
            q_quad[(q + 1 + b, q + 1 + b)] = options.flow_quad_cost;
        }
        let cost = Self { r_quad, r_lin, q_quad, q_lin };
        cost.validate()?;
        Ok(cost)
    }

    /// R must be positive definite, Q positive semidefinite.
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.r_quad.nrows() > 0
            && nalgebra::Cholesky::new(self.r_quad.clone()).is_none()
        {
            return Err(ControllerError::Invalid(
                "input cost matrix R is not positive definite".into(),
            ));
        }
        if self.q_quad.nrows() > 0 {
            let min_eig = self
                .q_quad
                .clone()
                .symmetric_eigenvalues()
                .iter()
                .fold(f64::INFINITY, |a, &b| a.min(b));
            if min_eig < -1e-10 {
                return Err(ControllerError::Invalid(format!(
                    "output cost matrix Q has eigenvalue {min_eig}"
                )));
            }
        }
        Ok(())
    }

    pub fn stage_cost(&self, u: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let mut value = self.r_lin.dot(u) + self.q_lin.dot(y);
        value += (u.transpose() * &self.r_quad * u)[(0, 0)];
        value += (y.transpose() * &self.q_quad * y)[(0, 0)];
        value
    }
}

/// Box constraints on inputs and outputs, in the y = [e; p1; f] ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub y_min: DVector<f64>,
    pub y_max: DVector<f64>,
}

impl Bounds {
    pub fn from_case(case: &GridCase) -> Result<Self, ControllerError> {
        case.validate()?;
        let n_u = case.n_u();
        let n_y = case.n_y();
        let q = case.n_storage();
        let mut u_min = DVector::zeros(n_u);
        let mut u_max = DVector::zeros(n_u);
        for (g, gen) in case.generators.iter().enumerate().skip(1) {
            u_min[g - 1] = gen.p_min;
            u_max[g - 1] = gen.p_max;
        }
        let offset = case.generators.len() - 1;
        for (s, st) in case.storages.iter().enumerate() {
            u_min[offset + s] = st.s_min;
            u_max[offset + s] = st.s_max;
        }
        let mut y_min = DVector::zeros(n_y);
        let mut y_max = DVector::zeros(n_y);
        for (s, st) in case.storages.iter().enumerate() {
            y_min[s] = st.e_min;
            y_max[s] = st.e_max;
        }
        y_min[q] = case.generators[0].p_min;
        y_max[q] = case.generators[0].p_max;
        for (b, br) in case.branches.iter().enumerate() {
            y_min[q + 1 + b] = -br.flow_limit_mw;
            y_max[q + 1 + b] = br.flow_limit_mw;
        }
        for i in 0..n_u {
            if u_min[i] > u_max[i] {
                return Err(ControllerError::Invalid(format!(
                    "u bounds crossed at index {i}"
                )));
            }
        }
        Ok(Self { u_min, u_max, y_min, y_max })
    }
}

/// Rolling window of the most recent T_ini measurements (u, w, y), newest at
/// the back. The closed loop owns and updates it; controllers read it.
#[derive(Debug, Clone)]
pub struct MeasurementBuffer {
    pub u: VecDeque<DVector<f64>>,
    pub w: VecDeque<DVector<f64>>,
    pub y: VecDeque<DVector<f64>>,
    capacity: usize,
}

impl MeasurementBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            u: VecDeque::with_capacity(capacity),
            w: VecDeque::with_capacity(capacity),
            y: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_primed(&self) -> bool {
        self.u.len() == self.capacity
    }

    pub fn push(&mut self, u: DVector<f64>, w: DVector<f64>, y: DVector<f64>) {
        if self.u.len() == self.capacity {
            self.u.pop_front();
            self.w.pop_front();
            self.y.pop_front();
        }
        self.u.push_back(u);
        self.w.push_back(w);
        self.y.push_back(y);
    }

    /// Storage powers over the window, stacked oldest first.
    pub fn storage_power_history(&self, selector: &DMatrix<f64>) -> DVector<f64> {
        let q = selector.nrows();
        let mut out = DVector::zeros(q * self.u.len());
        for (k, u) in self.u.iter().enumerate() {
            out.rows_mut(k * q, q).copy_from(&(selector * u));
        }
        out
    }

    /// Charges over the window (leading q entries of y), stacked oldest first.
    pub fn charge_history(&self, q: usize) -> DVector<f64> {
        let mut out = DVector::zeros(q * self.y.len());
        for (k, y) in self.y.iter().enumerate() {
            out.rows_mut(k * q, q).copy_from(&y.rows(0, q));
        }
        out
    }

    pub fn stacked_u(&self) -> DVector<f64> {
        stack_window(&self.u)
    }

    pub fn stacked_w(&self) -> DVector<f64> {
        stack_window(&self.w)
    }

    pub fn stacked_y(&self) -> DVector<f64> {
        stack_window(&self.y)
    }

    /// Current charge e(t) propagated one step past the newest measurement.
    pub fn current_charge(&self, selector: &DMatrix<f64>, delta_hours: f64) -> DVector<f64> {
        let q = selector.nrows();
        match (self.y.back(), self.u.back()) {
            (Some(y), Some(u)) => y.rows(0, q) - delta_hours * (selector * u),
            _ => DVector::zeros(q),
        }
    }
}

fn stack_window(window: &VecDeque<DVector<f64>>) -> DVector<f64> {
    let n = window.front().map_or(0, |v| v.len());
    let mut out = DVector::zeros(n * window.len());
    for (k, v) in window.iter().enumerate() {
        out.rows_mut(k * n, n).copy_from(v);
    }
    out
}

/// Open-loop plan over the prediction horizon plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct Plan {
    /// L×n_u planned inputs, first row is the next input to apply.
    pub u: DMatrix<f64>,
    /// L×n_y predicted outputs under the controller's own model.
    pub y: DMatrix<f64>,
    /// Realized stage-cost sum of the plan under the controller's prediction.
    pub objective: f64,
    pub qp_iterations: usize,
    pub solve_seconds: f64,
    pub polished: bool,
}

/// Common receding-horizon controller interface: plan from the measurement
/// window and an exact disturbance forecast over the horizon.
pub trait Controller {
    fn name(&self) -> &'static str;
    fn horizon(&self) -> usize;
    fn t_ini(&self) -> usize;
    fn plan(
        &mut self,
        buffer: &MeasurementBuffer,
        forecast: &DMatrix<f64>,
    ) -> Result<Plan, ControllerError>;
}

/// Resolve T_ini: the charge appears directly in the output, so one step
/// suffices; the conservative general bound q + s − 1 stays selectable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiniChoice {
    #[default]
    One,
    Conservative,
    #[serde(untagged)]
    Explicit(usize),
}

impl TiniChoice {
    pub fn resolve(&self, q: usize, s: usize) -> usize {
        match self {
            TiniChoice::One => 1,
            TiniChoice::Conservative => (q + s).saturating_sub(1).max(1),
            TiniChoice::Explicit(v) => (*v).max(1),
        }
    }
}

pub(crate) fn qp_failure(
    status: QpStatus,
    context: &str,
    detail: String,
) -> ControllerError {
    match status {
        QpStatus::PrimalInfeasible => ControllerError::InfeasibleSchedule(format!(
            "{context}: {detail}"
        )),
        QpStatus::DualInfeasible => ControllerError::Unbounded(format!("{context}: {detail}")),
        _ => ControllerError::Numerical(format!("{context}: {detail}")),
    }
}

pub(crate) fn default_qp_settings() -> QpSettings {
    QpSettings::default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn cost_and_bounds_from_case() {
        let case = fixtures::six_bus_two_storage();
        let cost = StageCost::from_case(&case, &CostOptions::default()).unwrap();
        assert_eq!(cost.r_quad.nrows(), 4);
        assert_eq!(cost.r_quad[(0, 0)], 0.015);
        assert_eq!(cost.r_quad[(2, 2)], 0.01);
        assert_eq!(cost.r_lin[1], 35.0);
        // Q: two charges, unpriced slack, seven flows
        assert_eq!(cost.q_quad.nrows(), 10);
        assert_eq!(cost.q_quad[(0, 0)], 1e-5);
        assert_eq!(cost.q_quad[(2, 2)], 0.0);
        assert_eq!(cost.q_quad[(3, 3)], 1e-5);

        let bounds = Bounds::from_case(&case).unwrap();
        assert_eq!(bounds.u_max[0], 120.0);
        assert_eq!(bounds.u_min[2], -15.0);
        assert_eq!(bounds.y_max[0], 40.0);
        assert_eq!(bounds.y_max[2], 200.0);
        assert_eq!(bounds.y_min[3], -80.0);
    }

    #[test]
    fn r_must_be_positive_definite() {
        let mut case = fixtures::six_bus_two_storage();
        case.generators[1].cost_quad = 0.0;
        let err = StageCost::from_case(&case, &CostOptions::default()).unwrap_err();
        assert!(matches!(err, ControllerError::Invalid(_)));
    }

    #[test]
    fn buffer_window_and_charge_propagation() {
        let case = fixtures::six_bus_two_storage();
        let model = crate::netmodel::reduce(&case).unwrap();
        let mut buffer = MeasurementBuffer::new(1);
        assert!(!buffer.is_primed());
        let u = nalgebra::dvector![0.0, 0.0, 4.0, -2.0];
        let y = {
            let mut y = DVector::zeros(case.n_y());
            y[0] = 20.0;
            y[1] = 30.0;
            y
        };
        buffer.push(u, DVector::zeros(3), y);
        assert!(buffer.is_primed());
        let e_now = buffer.current_charge(&model.storage_selector, 0.25);
        assert!((e_now[0] - (20.0 - 0.25 * 4.0)).abs() < 1e-12);
        assert!((e_now[1] - (30.0 + 0.25 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn tini_choices() {
        assert_eq!(TiniChoice::One.resolve(4, 1), 1);
        assert_eq!(TiniChoice::Conservative.resolve(4, 1), 4);
        assert_eq!(TiniChoice::Explicit(3).resolve(4, 1), 3);
    }
}
