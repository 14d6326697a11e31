//! Direct data-driven predictive OPF.
//!
//! The OCP is posed over linear combinations of recorded trajectory columns
//! instead of a parametric model. The disturbance equalities are eliminated
//! by substituting α = W_F† ŵ + null(W_F) β, the past blocks carry only the
//! storage powers and charges (the network is static, so nothing else has
//! memory), and the stack columns may be compressed by truncated SVD.
//!
//! Two formulations are provided: a single stack of depth T_ini + L, and the
//! segmented form with L depth-2 segments chained by equality constraints on
//! the storage signals. The segmented form is the default; it keeps the
//! Hankel blocks shallow, which is what makes the published data demands
//! independent of the grid size.

use super::{
    qp_failure, Bounds, Controller, ControllerError, MeasurementBuffer, Plan, StageCost,
    TiniChoice,
};
use crate::hankel::{
    build_simplified_stack, check_data_requirements, nullspace_substitution, split_past_future,
    truncate_rank, HankelStack, NullspaceSubstitution, PePolicy, PeReport,
};
use crate::netmodel::ReducedModel;
use crate::plant::TrajectoryLog;
use crate::qpsolve::{QpProblem, QpSettings, QpSolution, QpSolver, QpStatus};
use nalgebra::{DMatrix, DVector};

/// Column-count policy for the SVD compression of the stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruncationChoice {
    /// Compress to the behavior dimension 2·T_ini·(n_u+n_w) + q.
    #[default]
    Behavior,
    /// Keep the raw data columns.
    Off,
    #[serde(untagged)]
    Columns(usize),
}

#[derive(Debug, Clone)]
pub struct DdopfOptions {
    pub lambda: f64,
    pub t_ini: TiniChoice,
    pub pe_policy: PePolicy,
    pub truncation: TruncationChoice,
    /// Chain L depth-2 segments instead of one depth-(T_ini+L) stack.
    pub segmented: bool,
    /// Single-stack mode only: keep the full (u, w, y) past blocks instead
    /// of the storage-only simplification.
    pub full_past: bool,
    pub qp: QpSettings,
}

impl Default for DdopfOptions {
    fn default() -> Self {
        Self {
            lambda: 200.0,
            t_ini: TiniChoice::One,
            pe_policy: PePolicy::Truncated,
            truncation: TruncationChoice::Behavior,
            segmented: true,
            full_past: false,
            qp: QpSettings::default(),
        }
    }
}

fn apply_truncation(
    stack: HankelStack,
    choice: TruncationChoice,
) -> Result<HankelStack, ControllerError> {
    let target = match choice {
        TruncationChoice::Off => return Ok(stack),
        TruncationChoice::Behavior => stack.default_truncation_target(),
        TruncationChoice::Columns(k) => k,
    };
    Ok(truncate_rank(&stack, target)?)
}

/// Shared per-plan solve: load cost and bounds, run the QP, map failures.
fn run_qp(
    solver: &mut QpSolver,
    c: DVector<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    context: &str,
) -> Result<QpSolution, ControllerError> {
    solver.update_linear_cost(c)?;
    solver.update_bounds(lo, hi)?;
    let solution = solver.solve();
    match solution.status {
        QpStatus::Optimal => Ok(solution),
        status => Err(qp_failure(
            status,
            context,
            format!(
                "status {status:?} after {} iterations (residuals {:.2e}/{:.2e})",
                solution.iterations, solution.primal_residual, solution.dual_residual
            ),
        )),
    }
}

/// Segmented engine: decision [β_1 … β_L], one per depth-2 segment.
struct SegmentedEngine {
    stack: HankelStack,
    subst: NullspaceSubstitution,
    horizon: usize,
    nd: usize,
    n_u: usize,
    n_w: usize,
    n_y: usize,
    q: usize,
    lambda: f64,
    cost: StageCost,
    bounds: Bounds,
    // static maps per segment
    gu: DMatrix<f64>,
    gy: DMatrix<f64>,
    gsp: DMatrix<f64>,
    gep: DMatrix<f64>,
    gsf: DMatrix<f64>,
    gef: DMatrix<f64>,
    selector: DMatrix<f64>,
    solver: QpSolver,
    rows: usize,
    last_solution: Option<(DVector<f64>, DVector<f64>)>,
}

impl SegmentedEngine {
    fn new(
        stack: HankelStack,
        selector: &DMatrix<f64>,
        cost: StageCost,
        bounds: Bounds,
        horizon: usize,
        lambda: f64,
        qp: QpSettings,
    ) -> Result<Self, ControllerError> {
        if stack.t_ini != 1 || stack.horizon != 1 {
            return Err(ControllerError::Invalid(
                "segmented mode needs depth-2 segment stacks (T_ini = 1, future 1)".into(),
            ));
        }
        let q = stack.n_storage;
        let n_u = stack.u_f.nrows();
        let n_w = stack.w_f.nrows();
        let n_y = stack.y_f.nrows();
        let subst = nullspace_substitution(&stack.w_f)?;
        let nd = subst.null_dim();
        let n_map = &subst.null_basis;

        let gu = &stack.u_f * n_map;
        let gy = &stack.y_f * n_map;
        let gsp = &stack.s_p * n_map;
        let gep = &stack.e_p * n_map;
        let gsf = selector * &gu;
        let gef = gy.rows(0, q).clone_owned();

        // per-segment quadratic block, repeated on the diagonal
        let mut p_seg = gu.transpose() * &cost.r_quad * &gu
            + gy.transpose() * &cost.q_quad * &gy;
        for i in 0..nd {
            p_seg[(i, i)] += lambda;
        }
        p_seg *= 2.0;
        let l = horizon;
        let n_total = l * nd;
        let mut p = DMatrix::zeros(n_total, n_total);
        for j in 0..l {
            p.view_mut((j * nd, j * nd), (nd, nd)).copy_from(&p_seg);
        }

        // rows: [init (2q) | chain (2q(L-1)) | u boxes (L n_u) | y boxes (L n_y - q)]
        let rows = 2 * q + 2 * q * (l - 1) + l * n_u + l * n_y - q;
        let mut a = DMatrix::zeros(rows, n_total);
        let mut row = 0;
        a.view_mut((row, 0), (q, nd)).copy_from(&gsp);
        row += q;
        a.view_mut((row, 0), (q, nd)).copy_from(&gep);
        row += q;
        for j in 0..l - 1 {
            a.view_mut((row, (j + 1) * nd), (q, nd)).copy_from(&gsp);
            a.view_mut((row, j * nd), (q, nd)).copy_from(&(-&gsf));
            row += q;
            a.view_mut((row, (j + 1) * nd), (q, nd)).copy_from(&gep);
            a.view_mut((row, j * nd), (q, nd)).copy_from(&(-&gef));
            row += q;
        }
        for j in 0..l {
            a.view_mut((row, j * nd), (n_u, nd)).copy_from(&gu);
            row += n_u;
        }
        for j in 0..l {
            if j == 0 {
                // stage-0 charge is pinned by the initial trajectory; its box
                // rows would only constrain a constant
                a.view_mut((row, 0), (n_y - q, nd))
                    .copy_from(&gy.rows(q, n_y - q));
                row += n_y - q;
            } else {
                a.view_mut((row, j * nd), (n_y, nd)).copy_from(&gy);
                row += n_y;
            }
        }
        debug_assert_eq!(row, rows);

        let problem = QpProblem::new(
            p,
            DVector::zeros(n_total),
            a,
            DVector::from_element(rows, f64::NEG_INFINITY),
            DVector::from_element(rows, f64::INFINITY),
        )?;
        let solver = QpSolver::new(problem, qp)?;
        Ok(Self {
            stack,
            subst,
            horizon,
            nd,
            n_u,
            n_w,
            n_y,
            q,
            lambda,
            cost,
            bounds,
            gu,
            gy,
            gsp,
            gep,
            gsf,
            gef,
            selector: selector.clone(),
            solver,
            rows,
            last_solution: None,
        })
    }

    fn plan(
        &mut self,
        s_meas: &DVector<f64>,
        e_meas: &DVector<f64>,
        forecast: &DMatrix<f64>,
    ) -> Result<Plan, ControllerError> {
        let l = self.horizon;
        let (q, nd, n_u, n_y) = (self.q, self.nd, self.n_u, self.n_y);
        if forecast.nrows() != l || forecast.ncols() != self.n_w {
            return Err(ControllerError::Invalid(format!(
                "forecast is {}x{}, expected {l}x{}",
                forecast.nrows(),
                forecast.ncols(),
                self.n_w
            )));
        }
        if s_meas.len() != q || e_meas.len() != q {
            return Err(ControllerError::Invalid(
                "initial trajectory must carry one storage power and charge sample".into(),
            ));
        }

        // particular solutions and offsets per segment
        let mut alpha0 = Vec::with_capacity(l);
        for j in 0..l {
            let w_j = forecast.row(j).transpose();
            alpha0.push(self.subst.particular(&self.stack.w_f, &w_j)?);
        }
        let hu: Vec<DVector<f64>> = alpha0.iter().map(|a| &self.stack.u_f * a).collect();
        let hy: Vec<DVector<f64>> = alpha0.iter().map(|a| &self.stack.y_f * a).collect();
        let hsp: Vec<DVector<f64>> = alpha0.iter().map(|a| &self.stack.s_p * a).collect();
        let hep: Vec<DVector<f64>> = alpha0.iter().map(|a| &self.stack.e_p * a).collect();

        let mut c = DVector::zeros(l * nd);
        for j in 0..l {
            let grad_u = 2.0 * (&self.cost.r_quad * &hu[j]) + &self.cost.r_lin;
            let grad_y = 2.0 * (&self.cost.q_quad * &hy[j]) + &self.cost.q_lin;
            c.rows_mut(j * nd, nd)
                .copy_from(&(self.gu.transpose() * grad_u + self.gy.transpose() * grad_y));
        }

        let mut lo = DVector::zeros(self.rows);
        let mut hi = DVector::zeros(self.rows);
        let mut row = 0;
        let set_eq = |lo: &mut DVector<f64>, hi: &mut DVector<f64>, row: usize, v: &DVector<f64>| {
            lo.rows_mut(row, v.len()).copy_from(v);
            hi.rows_mut(row, v.len()).copy_from(v);
        };
        set_eq(&mut lo, &mut hi, row, &(s_meas - &hsp[0]));
        row += q;
        set_eq(&mut lo, &mut hi, row, &(e_meas - &hep[0]));
        row += q;
        for j in 0..l - 1 {
            let hsf_j = &self.selector * &hu[j];
            set_eq(&mut lo, &mut hi, row, &(hsf_j - &hsp[j + 1]));
            row += q;
            let hef_j = hy[j].rows(0, q).clone_owned();
            set_eq(&mut lo, &mut hi, row, &(hef_j - &hep[j + 1]));
            row += q;
        }
        for j in 0..l {
            lo.rows_mut(row, n_u).copy_from(&(&self.bounds.u_min - &hu[j]));
            hi.rows_mut(row, n_u).copy_from(&(&self.bounds.u_max - &hu[j]));
            row += n_u;
        }
        for j in 0..l {
            let (skip, len) = if j == 0 { (q, n_y - q) } else { (0, n_y) };
            lo.rows_mut(row, len)
                .copy_from(&(self.bounds.y_min.rows(skip, len) - hy[j].rows(skip, len)));
            hi.rows_mut(row, len)
                .copy_from(&(self.bounds.y_max.rows(skip, len) - hy[j].rows(skip, len)));
            row += len;
        }
        debug_assert_eq!(row, self.rows);

        if let Some((x, y)) = &self.last_solution {
            self.solver.warm_start(x, y);
        }
        let solution = run_qp(&mut self.solver, c, lo, hi, "data-driven OPF (segmented)")?;

        let mut u_plan = DMatrix::zeros(l, n_u);
        let mut y_plan = DMatrix::zeros(l, n_y);
        let mut objective = 0.0;
        for j in 0..l {
            let beta = solution.x.rows(j * nd, nd).clone_owned();
            let u_j = &self.gu * &beta + &hu[j];
            let y_j = &self.gy * &beta + &hy[j];
            objective += self.cost.stage_cost(&u_j, &y_j) + self.lambda * beta.norm_squared();
            u_plan.row_mut(j).copy_from(&u_j.transpose());
            y_plan.row_mut(j).copy_from(&y_j.transpose());
        }
        self.last_solution = Some((solution.x.clone(), solution.y.clone()));
        Ok(Plan {
            u: u_plan,
            y: y_plan,
            objective,
            qp_iterations: solution.iterations,
            solve_seconds: solution.solve_seconds,
            polished: solution.polished,
        })
    }

    /// Shift the stored solution by the applied number of segments so the
    /// next solve warm-starts from the tail of the previous plan.
    fn shift(&mut self, steps: usize) {
        let Some((x, y)) = self.last_solution.take() else { return };
        if steps == 0 {
            self.last_solution = Some((x, y));
            return;
        }
        let l = self.horizon;
        let nd = self.nd;
        let mut x_new = DVector::zeros(x.len());
        for j in 0..l.saturating_sub(steps) {
            x_new
                .rows_mut(j * nd, nd)
                .copy_from(&x.rows((j + steps) * nd, nd));
        }
        let mut y_new = DVector::zeros(y.len());
        let base = 2 * self.q + 2 * self.q * (l - 1);
        for j in 0..l.saturating_sub(steps) {
            let src = base + (j + steps) * self.n_u;
            let dst = base + j * self.n_u;
            y_new
                .rows_mut(dst, self.n_u)
                .copy_from(&y.rows(src, self.n_u));
        }
        // y-box rows have a shorter stage-0 block; shift only the uniform tail
        let ybase = base + l * self.n_u;
        let first = self.n_y - self.q;
        for j in 1..l.saturating_sub(steps) {
            let src = ybase + first + (j + steps - 1) * self.n_y;
            let dst = ybase + first + (j - 1) * self.n_y;
            if src + self.n_y <= y.len() {
                y_new.rows_mut(dst, self.n_y).copy_from(&y.rows(src, self.n_y));
            }
        }
        self.last_solution = Some((x_new, y_new));
    }
}

/// Single-stack engine of depth T_ini + L, optionally with full past blocks.
struct SingleEngine {
    // data blocks (simplified past or full past)
    s_p: DMatrix<f64>,
    e_p: DMatrix<f64>,
    u_p: Option<DMatrix<f64>>,
    w_p: Option<DMatrix<f64>>,
    y_p: Option<DMatrix<f64>>,
    u_f: DMatrix<f64>,
    w_f: DMatrix<f64>,
    y_f: DMatrix<f64>,
    subst: NullspaceSubstitution,
    horizon: usize,
    t_ini: usize,
    nd: usize,
    n_u: usize,
    n_w: usize,
    n_y: usize,
    q: usize,
    lambda: f64,
    cost: StageCost,
    bounds: Bounds,
    gu: DMatrix<f64>,
    gy: DMatrix<f64>,
    solver: QpSolver,
    rows: usize,
    past_rows: usize,
}

impl SingleEngine {
    #[allow(clippy::too_many_arguments)]
    fn new(
        s_p: DMatrix<f64>,
        e_p: DMatrix<f64>,
        full_past: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)>,
        u_f: DMatrix<f64>,
        w_f: DMatrix<f64>,
        y_f: DMatrix<f64>,
        dims: (usize, usize, usize, usize, usize, usize), // (t_ini, l, n_u, n_w, n_y, q)
        cost: StageCost,
        bounds: Bounds,
        lambda: f64,
        qp: QpSettings,
    ) -> Result<Self, ControllerError> {
        let (t_ini, l, n_u, n_w, n_y, q) = dims;
        let subst = nullspace_substitution(&w_f)?;
        let n_map = &subst.null_basis;
        let nd = subst.null_dim();
        let gu = &u_f * n_map;
        let gy = &y_f * n_map;

        let mut p = DMatrix::zeros(nd, nd);
        for k in 0..l {
            let gu_k = gu.rows(k * n_u, n_u);
            let gy_k = gy.rows(k * n_y, n_y);
            p += gu_k.transpose() * &cost.r_quad * gu_k;
            p += gy_k.transpose() * &cost.q_quad * gy_k;
        }
        for i in 0..nd {
            p[(i, i)] += lambda;
        }
        p *= 2.0;

        let (u_p, w_p, y_p) = match full_past {
            Some((u, w, y)) => (Some(u), Some(w), Some(y)),
            None => (None, None, None),
        };
        let past_rows = if u_p.is_some() {
            t_ini * (n_u + n_w + n_y)
        } else {
            2 * t_ini * q
        };
        let rows = past_rows + l * n_u + l * n_y - q;
        let mut a = DMatrix::zeros(rows, nd);
        let mut row = 0;
        if let (Some(u_p), Some(w_p), Some(y_p)) = (&u_p, &w_p, &y_p) {
            for block in [u_p, w_p, y_p] {
                a.view_mut((row, 0), (block.nrows(), nd))
                    .copy_from(&(block * n_map));
                row += block.nrows();
            }
        } else {
            a.view_mut((row, 0), (s_p.nrows(), nd)).copy_from(&(&s_p * n_map));
            row += s_p.nrows();
            a.view_mut((row, 0), (e_p.nrows(), nd)).copy_from(&(&e_p * n_map));
            row += e_p.nrows();
        }
        a.view_mut((row, 0), (l * n_u, nd)).copy_from(&gu);
        row += l * n_u;
        // skip the first future stage's charge rows (pinned by the past)
        a.view_mut((row, 0), (l * n_y - q, nd))
            .copy_from(&gy.rows(q, l * n_y - q));
        row += l * n_y - q;
        debug_assert_eq!(row, rows);

        let problem = QpProblem::new(
            p,
            DVector::zeros(nd),
            a,
            DVector::from_element(rows, f64::NEG_INFINITY),
            DVector::from_element(rows, f64::INFINITY),
        )?;
        let solver = QpSolver::new(problem, qp)?;
        Ok(Self {
            s_p,
            e_p,
            u_p,
            w_p,
            y_p,
            u_f,
            w_f,
            y_f,
            subst,
            horizon: l,
            t_ini,
            nd,
            n_u,
            n_w,
            n_y,
            q,
            lambda,
            cost,
            bounds,
            gu,
            gy,
            solver,
            rows,
            past_rows,
        })
    }

    fn plan(
        &mut self,
        buffer: &MeasurementBuffer,
        selector: &DMatrix<f64>,
        forecast: &DMatrix<f64>,
    ) -> Result<Plan, ControllerError> {
        let l = self.horizon;
        let (q, n_u, n_y) = (self.q, self.n_u, self.n_y);
        if forecast.nrows() != l || forecast.ncols() != self.n_w {
            return Err(ControllerError::Invalid(format!(
                "forecast is {}x{}, expected {l}x{}",
                forecast.nrows(),
                forecast.ncols(),
                self.n_w
            )));
        }
        if buffer.u.len() < self.t_ini {
            return Err(ControllerError::Invalid(format!(
                "measurement buffer holds {} steps, T_ini = {}",
                buffer.u.len(),
                self.t_ini
            )));
        }

        let w_stacked = DVector::from_iterator(
            l * self.n_w,
            (0..l).flat_map(|k| forecast.row(k).iter().copied().collect::<Vec<_>>()),
        );
        let alpha0 = self.subst.particular(&self.w_f, &w_stacked)?;
        let hu = &self.u_f * &alpha0;
        let hy = &self.y_f * &alpha0;

        let mut grad = DVector::zeros(self.nd);
        for k in 0..l {
            let gu_k = self.gu.rows(k * n_u, n_u);
            let gy_k = self.gy.rows(k * n_y, n_y);
            let gu_h = 2.0 * (&self.cost.r_quad * hu.rows(k * n_u, n_u)) + &self.cost.r_lin;
            let gy_h = 2.0 * (&self.cost.q_quad * hy.rows(k * n_y, n_y)) + &self.cost.q_lin;
            grad += gu_k.transpose() * gu_h + gy_k.transpose() * gy_h;
        }

        let mut lo = DVector::zeros(self.rows);
        let mut hi = DVector::zeros(self.rows);
        let mut row = 0;
        if let (Some(u_p), Some(w_p), Some(y_p)) = (&self.u_p, &self.w_p, &self.y_p) {
            for (block, meas) in [
                (u_p, buffer.stacked_u()),
                (w_p, buffer.stacked_w()),
                (y_p, buffer.stacked_y()),
            ] {
                let rhs = meas - block * &alpha0;
                lo.rows_mut(row, rhs.len()).copy_from(&rhs);
                hi.rows_mut(row, rhs.len()).copy_from(&rhs);
                row += rhs.len();
            }
        } else {
            let s_meas = buffer.storage_power_history(selector);
            let e_meas = buffer.charge_history(q);
            let rhs_s = s_meas - &self.s_p * &alpha0;
            let rhs_e = e_meas - &self.e_p * &alpha0;
            lo.rows_mut(row, rhs_s.len()).copy_from(&rhs_s);
            hi.rows_mut(row, rhs_s.len()).copy_from(&rhs_s);
            row += rhs_s.len();
            lo.rows_mut(row, rhs_e.len()).copy_from(&rhs_e);
            hi.rows_mut(row, rhs_e.len()).copy_from(&rhs_e);
            row += rhs_e.len();
        }
        debug_assert_eq!(row, self.past_rows);
        for k in 0..l {
            lo.rows_mut(row, n_u)
                .copy_from(&(&self.bounds.u_min - hu.rows(k * n_u, n_u)));
            hi.rows_mut(row, n_u)
                .copy_from(&(&self.bounds.u_max - hu.rows(k * n_u, n_u)));
            row += n_u;
        }
        for k in 0..l {
            let (skip, len) = if k == 0 { (q, n_y - q) } else { (0, n_y) };
            lo.rows_mut(row, len).copy_from(
                &(self.bounds.y_min.rows(skip, len) - hy.rows(k * n_y + skip, len)),
            );
            hi.rows_mut(row, len).copy_from(
                &(self.bounds.y_max.rows(skip, len) - hy.rows(k * n_y + skip, len)),
            );
            row += len;
        }
        debug_assert_eq!(row, self.rows);

        let solution = run_qp(&mut self.solver, grad, lo, hi, "data-driven OPF")?;

        let mut u_plan = DMatrix::zeros(l, n_u);
        let mut y_plan = DMatrix::zeros(l, n_y);
        let mut objective = self.lambda * solution.x.norm_squared();
        let u_full = &self.gu * &solution.x + &hu;
        let y_full = &self.gy * &solution.x + &hy;
        for k in 0..l {
            let u_k = u_full.rows(k * n_u, n_u).clone_owned();
            let y_k = y_full.rows(k * n_y, n_y).clone_owned();
            objective += self.cost.stage_cost(&u_k, &y_k);
            u_plan.row_mut(k).copy_from(&u_k.transpose());
            y_plan.row_mut(k).copy_from(&y_k.transpose());
        }
        Ok(Plan {
            u: u_plan,
            y: y_plan,
            objective,
            qp_iterations: solution.iterations,
            solve_seconds: solution.solve_seconds,
            polished: solution.polished,
        })
    }
}

enum Engine {
    Segmented(SegmentedEngine),
    Single(SingleEngine),
}

/// Data-driven predictive controller built from one recorded trajectory.
pub struct DdopfController {
    engine: Engine,
    selector: DMatrix<f64>,
    t_ini: usize,
    horizon: usize,
    pe_report: PeReport,
}

impl DdopfController {
    pub fn new(
        data: &TrajectoryLog,
        model: &ReducedModel,
        cost: StageCost,
        bounds: Bounds,
        horizon: usize,
        options: &DdopfOptions,
    ) -> Result<Self, ControllerError> {
        if horizon == 0 {
            return Err(ControllerError::Invalid("horizon must be >= 1".into()));
        }
        let q = model.storage_selector.nrows();
        let t_ini = options.t_ini.resolve(q, 1);
        let pe_report =
            check_data_requirements(data, q, 1, t_ini, horizon, options.pe_policy)?;
        let selector = model.storage_selector.clone();

        let engine = if options.segmented {
            if t_ini != 1 {
                return Err(ControllerError::Invalid(
                    "segmented mode requires T_ini = 1; use the single-stack mode instead".into(),
                ));
            }
            let stack = build_simplified_stack(data, &selector, 1, 1)?;
            let stack = apply_truncation(stack, options.truncation)?;
            Engine::Segmented(SegmentedEngine::new(
                stack,
                &selector,
                cost,
                bounds,
                horizon,
                options.lambda,
                options.qp.clone(),
            )?)
        } else if options.full_past {
            let pf = split_past_future(data, t_ini, horizon, 1)?;
            let dims = (t_ini, horizon, data.u.ncols(), data.w.ncols(), data.y.ncols(), q);
            Engine::Single(SingleEngine::new(
                DMatrix::zeros(0, pf.u_f.ncols()),
                DMatrix::zeros(0, pf.u_f.ncols()),
                Some((pf.u_p, pf.w_p, pf.y_p)),
                pf.u_f,
                pf.w_f,
                pf.y_f,
                dims,
                cost,
                bounds,
                options.lambda,
                options.qp.clone(),
            )?)
        } else {
            let stack = build_simplified_stack(data, &selector, t_ini, horizon)?;
            let stack = apply_truncation(stack, options.truncation)?;
            let dims = (t_ini, horizon, data.u.ncols(), data.w.ncols(), data.y.ncols(), q);
            Engine::Single(SingleEngine::new(
                stack.s_p,
                stack.e_p,
                None,
                stack.u_f,
                stack.w_f,
                stack.y_f,
                dims,
                cost,
                bounds,
                options.lambda,
                options.qp.clone(),
            )?)
        };
        Ok(Self {
            engine,
            selector,
            t_ini,
            horizon,
            pe_report,
        })
    }

    pub fn pe_report(&self) -> &PeReport {
        &self.pe_report
    }

    /// Shift the warm start after the closed loop applied `steps` inputs.
    pub fn note_applied(&mut self, steps: usize) {
        if let Engine::Segmented(engine) = &mut self.engine {
            engine.shift(steps);
        }
    }
}

impl Controller for DdopfController {
    fn name(&self) -> &'static str {
        "ddopf"
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn t_ini(&self) -> usize {
        self.t_ini
    }

    fn plan(
        &mut self,
        buffer: &MeasurementBuffer,
        forecast: &DMatrix<f64>,
    ) -> Result<Plan, ControllerError> {
        match &mut self.engine {
            Engine::Segmented(engine) => {
                if buffer.u.is_empty() {
                    return Err(ControllerError::Invalid(
                        "measurement buffer is empty".into(),
                    ));
                }
                let s_meas = {
                    let u_last = buffer.u.back().expect("non-empty");
                    &self.selector * u_last
                };
                let q = self.selector.nrows();
                let e_meas = buffer.y.back().expect("non-empty").rows(0, q).clone_owned();
                engine.plan(&s_meas, &e_meas, forecast)
            }
            Engine::Single(engine) => engine.plan(buffer, &self.selector, forecast),
        }
    }
}

/// One-shot data-driven plan from a prebuilt depth-(T_ini+L) stack.
#[allow(clippy::too_many_arguments)]
pub fn ddopf_plan(
    stack: &HankelStack,
    cost: &StageCost,
    bounds: &Bounds,
    lambda: f64,
    s_buffer: &DVector<f64>,
    e_buffer: &DVector<f64>,
    forecast: &DMatrix<f64>,
    qp: QpSettings,
) -> Result<Plan, ControllerError> {
    let q = stack.n_storage;
    let l = stack.horizon;
    let n_u = stack.u_f.nrows() / l;
    let n_w = stack.w_f.nrows() / l;
    let n_y = stack.y_f.nrows() / l;
    let dims = (stack.t_ini, l, n_u, n_w, n_y, q);
    let mut engine = SingleEngine::new(
        stack.s_p.clone(),
        stack.e_p.clone(),
        None,
        stack.u_f.clone(),
        stack.w_f.clone(),
        stack.y_f.clone(),
        dims,
        cost.clone(),
        bounds.clone(),
        lambda,
        qp,
    )?;
    // wrap the buffers in the window shape plan() expects
    let mut buffer = MeasurementBuffer::new(stack.t_ini);
    let mut selector = DMatrix::zeros(q, n_u);
    for s in 0..q {
        selector[(s, n_u - q + s)] = 1.0;
    }
    for k in 0..stack.t_ini {
        let mut u = DVector::zeros(n_u);
        for s in 0..q {
            u[n_u - q + s] = s_buffer[k * q + s];
        }
        let mut y = DVector::zeros(n_y);
        y.rows_mut(0, q).copy_from(&e_buffer.rows(k * q, q));
        buffer.push(u, DVector::zeros(n_w), y);
    }
    engine.plan(&buffer, &selector, forecast)
}

/// One-shot segmented plan from a prebuilt depth-2 segment stack.
#[allow(clippy::too_many_arguments)]
pub fn ddopf_plan_segmented(
    segment_stack: &HankelStack,
    horizon: usize,
    cost: &StageCost,
    bounds: &Bounds,
    lambda: f64,
    s_meas: &DVector<f64>,
    e_meas: &DVector<f64>,
    forecast: &DMatrix<f64>,
    qp: QpSettings,
) -> Result<Plan, ControllerError> {
    let q = segment_stack.n_storage;
    let n_u = segment_stack.u_f.nrows();
    let mut selector = DMatrix::zeros(q, n_u);
    for s in 0..q {
        selector[(s, n_u - q + s)] = 1.0;
    }
    let mut engine = SegmentedEngine::new(
        segment_stack.clone(),
        &selector,
        cost.clone(),
        bounds.clone(),
        horizon,
        lambda,
        qp,
    )?;
    engine.plan(s_meas, e_meas, forecast)
}
