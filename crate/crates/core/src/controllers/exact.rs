//! Multi-stage DC OPF as a condensed QP: the angles are eliminated through
//! the PTDF, the slack through the power balance, and the charges through
//! the integrator dynamics, leaving the stacked device powers as the only
//! decision variables. Built once per scenario; between receding-horizon
//! steps only the linear cost and the bounds move, so the factorization and
//! the previous iterates are reused.

use super::{
    qp_failure, Bounds, Controller, ControllerError, MeasurementBuffer, Plan, StageCost,
};
use crate::netmodel::ReducedModel;
use crate::qpsolve::{QpProblem, QpSettings, QpSolution, QpSolver, QpStatus};
use nalgebra::{DMatrix, DVector};

/// Condensed multi-stage OPF with a cached factorization.
///
/// The flow response may be the exact PTDF or an estimate; everything else
/// (balance, storage integration, device maps) is shared physics.
pub struct ExactMpcTemplate {
    horizon: usize,
    n_u: usize,
    n_w: usize,
    n_y: usize,
    q: usize,
    ne: usize,
    delta_hours: f64,
    storage_selector: DMatrix<f64>,
    /// Flow response to the stacked inputs, |E|×n_u.
    flow_map: DMatrix<f64>,
    /// Flow response to the demands, |E|×n_w.
    dist_flow_map: DMatrix<f64>,
    /// Per-stage output maps y(k) = G_k U + h_k(e_now, w).
    stage_maps: Vec<DMatrix<f64>>,
    cost: StageCost,
    bounds: Bounds,
    /// Terminal-charge bounds (tightened), constraining e(L) when present.
    terminal_charge: Option<(DVector<f64>, DVector<f64>)>,
    solver: QpSolver,
    warm: bool,
}

impl ExactMpcTemplate {
    pub fn new(
        flow_matrix: &DMatrix<f64>,
        model: &ReducedModel,
        cost: StageCost,
        bounds: Bounds,
        horizon: usize,
        delta_hours: f64,
        qp_settings: QpSettings,
        terminal_charge: Option<(DVector<f64>, DVector<f64>)>,
    ) -> Result<Self, ControllerError> {
        if horizon == 0 {
            return Err(ControllerError::Invalid("horizon must be >= 1".into()));
        }
        cost.validate()?;
        let n_u = model.cg.ncols();
        let n_w = model.cd.ncols();
        let q = model.storage_selector.nrows();
        let ne = flow_matrix.nrows();
        let n_y = q + 1 + ne;
        if flow_matrix.ncols() != model.b_red.nrows() {
            return Err(ControllerError::Invalid(format!(
                "flow matrix has {} columns, expected {}",
                flow_matrix.ncols(),
                model.b_red.nrows()
            )));
        }
        let flow_map = flow_matrix * &model.cg;
        let dist_flow_map = flow_matrix * &model.cd;
        let l = horizon;
        let sel = &model.storage_selector;

        // per-stage affine maps y(k) = G_k U + h_k
        let mut stage_maps = Vec::with_capacity(l);
        for k in 0..l {
            let mut g = DMatrix::zeros(n_y, l * n_u);
            for j in 0..k {
                let mut block = g.view_mut((0, j * n_u), (q, n_u));
                block.copy_from(&(sel.scale(-delta_hours)));
            }
            for j in 0..n_u {
                g[(q, k * n_u + j)] = -1.0;
            }
            g.view_mut((q + 1, k * n_u), (ne, n_u)).copy_from(&flow_map);
            stage_maps.push(g);
        }

        // quadratic cost: P = 2 (blkdiag(R) + Σ G_kᵀ Q G_k)
        let mut p = DMatrix::zeros(l * n_u, l * n_u);
        for k in 0..l {
            p.view_mut((k * n_u, k * n_u), (n_u, n_u))
                .copy_from(&cost.r_quad);
        }
        for g in &stage_maps {
            p += g.transpose() * &cost.q_quad * g;
        }
        p *= 2.0;

        // constraint matrix rows:
        // [u boxes | e(k), 1 <= k < L | p1(k) | f(k) | optional e(L)]
        let n_e_rows = q * l.saturating_sub(1);
        let n_terminal = if terminal_charge.is_some() { q } else { 0 };
        let m = l * n_u + n_e_rows + l + l * ne + n_terminal;
        let mut a = DMatrix::zeros(m, l * n_u);
        let mut row = 0;
        for i in 0..l * n_u {
            a[(row + i, i)] = 1.0;
        }
        row += l * n_u;
        for k in 1..l {
            for j in 0..k {
                a.view_mut((row, j * n_u), (q, n_u))
                    .copy_from(&sel.scale(-delta_hours));
            }
            row += q;
        }
        for k in 0..l {
            for j in 0..n_u {
                a[(row, k * n_u + j)] = -1.0;
            }
            row += 1;
        }
        for k in 0..l {
            a.view_mut((row, k * n_u), (ne, n_u)).copy_from(&flow_map);
            row += ne;
        }
        if terminal_charge.is_some() {
            for j in 0..l {
                a.view_mut((row, j * n_u), (q, n_u))
                    .copy_from(&sel.scale(-delta_hours));
            }
            row += q;
        }
        debug_assert_eq!(row, m);

        let problem = QpProblem::new(
            p,
            DVector::zeros(l * n_u),
            a,
            DVector::from_element(m, f64::NEG_INFINITY),
            DVector::from_element(m, f64::INFINITY),
        )?;
        let solver = QpSolver::new(problem, qp_settings)?;

        Ok(Self {
            horizon: l,
            n_u,
            n_w,
            n_y,
            q,
            ne,
            delta_hours,
            storage_selector: model.storage_selector.clone(),
            flow_map,
            dist_flow_map,
            stage_maps,
            cost,
            bounds,
            terminal_charge,
            solver,
            warm: false,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn stage_offset(&self, e_now: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut h = DVector::zeros(self.n_y);
        h.rows_mut(0, self.q).copy_from(e_now);
        h[self.q] = w.sum();
        h.rows_mut(self.q + 1, self.ne)
            .copy_from(&(-(&self.dist_flow_map * w)));
        h
    }

    /// Solve the horizon problem from the current charge and the demand
    /// forecast (one row per stage).
    pub fn plan(
        &mut self,
        e_now: &DVector<f64>,
        forecast: &DMatrix<f64>,
    ) -> Result<Plan, ControllerError> {
        let l = self.horizon;
        if forecast.nrows() != l || forecast.ncols() != self.n_w {
            return Err(ControllerError::Invalid(format!(
                "forecast is {}x{}, expected {l}x{}",
                forecast.nrows(),
                forecast.ncols(),
                self.n_w
            )));
        }
        if e_now.len() != self.q {
            return Err(ControllerError::Invalid(format!(
                "charge has length {}, expected {}",
                e_now.len(),
                self.q
            )));
        }

        let w_rows: Vec<DVector<f64>> = (0..l)
            .map(|k| forecast.row(k).transpose())
            .collect();
        let offsets: Vec<DVector<f64>> = w_rows
            .iter()
            .map(|w| self.stage_offset(e_now, w))
            .collect();

        // linear cost: c = blk(r) + Σ G_kᵀ (2 Q h_k + q)
        let mut c = DVector::zeros(l * self.n_u);
        for k in 0..l {
            c.rows_mut(k * self.n_u, self.n_u).copy_from(&self.cost.r_lin);
        }
        for (g, h) in self.stage_maps.iter().zip(&offsets) {
            let grad = 2.0 * (&self.cost.q_quad * h) + &self.cost.q_lin;
            c += g.transpose() * grad;
        }
        self.solver.update_linear_cost(c)?;

        // bounds in the row order the constraint matrix was assembled in
        let n_e_rows = self.q * l.saturating_sub(1);
        let n_terminal = if self.terminal_charge.is_some() { self.q } else { 0 };
        let m = l * self.n_u + n_e_rows + l + l * self.ne + n_terminal;
        let mut lo = DVector::zeros(m);
        let mut hi = DVector::zeros(m);
        let mut row = 0;
        for _ in 0..l {
            lo.rows_mut(row, self.n_u).copy_from(&self.bounds.u_min);
            hi.rows_mut(row, self.n_u).copy_from(&self.bounds.u_max);
            row += self.n_u;
        }
        let e_min = self.bounds.y_min.rows(0, self.q).clone_owned();
        let e_max = self.bounds.y_max.rows(0, self.q).clone_owned();
        for _ in 1..l {
            lo.rows_mut(row, self.q).copy_from(&(&e_min - e_now));
            hi.rows_mut(row, self.q).copy_from(&(&e_max - e_now));
            row += self.q;
        }
        let p1_min = self.bounds.y_min[self.q];
        let p1_max = self.bounds.y_max[self.q];
        for w in &w_rows {
            lo[row] = p1_min - w.sum();
            hi[row] = p1_max - w.sum();
            row += 1;
        }
        let f_min = self.bounds.y_min.rows(self.q + 1, self.ne).clone_owned();
        let f_max = self.bounds.y_max.rows(self.q + 1, self.ne).clone_owned();
        for w in &w_rows {
            let shift = &self.dist_flow_map * w;
            lo.rows_mut(row, self.ne).copy_from(&(&f_min + &shift));
            hi.rows_mut(row, self.ne).copy_from(&(&f_max + &shift));
            row += self.ne;
        }
        if let Some((t_min, t_max)) = &self.terminal_charge {
            lo.rows_mut(row, self.q).copy_from(&(t_min - e_now));
            hi.rows_mut(row, self.q).copy_from(&(t_max - e_now));
            row += self.q;
        }
        debug_assert_eq!(row, m);
        self.solver.update_bounds(lo, hi)?;

        let solution = self.solver.solve();
        self.check_solution(&solution)?;
        self.warm = true;

        // reconstruct the stage trajectories
        let mut u_plan = DMatrix::zeros(l, self.n_u);
        let mut y_plan = DMatrix::zeros(l, self.n_y);
        let mut objective = 0.0;
        for k in 0..l {
            let u_k = solution.x.rows(k * self.n_u, self.n_u).clone_owned();
            let y_k = &self.stage_maps[k] * &solution.x + &offsets[k];
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

    fn check_solution(&self, solution: &QpSolution) -> Result<(), ControllerError> {
        match solution.status {
            QpStatus::Optimal => Ok(()),
            QpStatus::PrimalInfeasible => {
                let detail = self
                    .violated_rows(solution)
                    .unwrap_or_else(|| "no certificate".into());
                Err(qp_failure(solution.status, "multi-stage OPF", detail))
            }
            status => Err(qp_failure(
                status,
                "multi-stage OPF",
                format!(
                    "status {status:?} after {} iterations (residuals {:.2e}/{:.2e})",
                    solution.iterations, solution.primal_residual, solution.dual_residual
                ),
            )),
        }
    }

    /// Map certificate rows back to named constraints for error reporting.
    fn violated_rows(&self, solution: &QpSolution) -> Option<String> {
        let cert = solution.certificate.as_ref()?;
        let threshold = 0.1 * cert.amax();
        let mut names = Vec::new();
        for (i, v) in cert.iter().enumerate() {
            if v.abs() >= threshold {
                names.push(format!("{} ({v:+.2})", self.row_name(i)));
            }
            if names.len() >= 8 {
                names.push("...".into());
                break;
            }
        }
        Some(names.join(", "))
    }

    fn row_name(&self, mut row: usize) -> String {
        let l = self.horizon;
        if row < l * self.n_u {
            return format!("u[stage {}, device {}]", row / self.n_u, row % self.n_u);
        }
        row -= l * self.n_u;
        let n_e_rows = self.q * l.saturating_sub(1);
        if row < n_e_rows {
            return format!("e[stage {}, storage {}]", 1 + row / self.q, row % self.q);
        }
        row -= n_e_rows;
        if row < l {
            return format!("p1[stage {row}]");
        }
        row -= l;
        if row < l * self.ne {
            return format!("f[stage {}, line {}]", row / self.ne, row % self.ne);
        }
        row -= l * self.ne;
        format!("terminal e[storage {row}]")
    }
}

/// One-shot multi-stage OPF solve (builds a fresh template).
pub fn exact_mpc_plan(
    model: &ReducedModel,
    cost: &StageCost,
    bounds: &Bounds,
    e_now: &DVector<f64>,
    forecast: &DMatrix<f64>,
    delta_hours: f64,
) -> Result<Plan, ControllerError> {
    let mut template = ExactMpcTemplate::new(
        &model.ptdf,
        model,
        cost.clone(),
        bounds.clone(),
        forecast.nrows(),
        delta_hours,
        super::default_qp_settings(),
        None,
    )?;
    template.plan(e_now, forecast)
}

/// Receding-horizon controller on the exact network model.
pub struct ExactMpc {
    template: ExactMpcTemplate,
    selector: DMatrix<f64>,
    delta_hours: f64,
}

impl ExactMpc {
    pub fn new(
        model: &ReducedModel,
        cost: StageCost,
        bounds: Bounds,
        horizon: usize,
        delta_hours: f64,
        qp_settings: QpSettings,
    ) -> Result<Self, ControllerError> {
        Ok(Self {
            template: ExactMpcTemplate::new(
                &model.ptdf,
                model,
                cost,
                bounds,
                horizon,
                delta_hours,
                qp_settings,
                None,
            )?,
            selector: model.storage_selector.clone(),
            delta_hours,
        })
    }
}

impl Controller for ExactMpc {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn horizon(&self) -> usize {
        self.template.horizon()
    }

    fn t_ini(&self) -> usize {
        1
    }

    fn plan(
        &mut self,
        buffer: &MeasurementBuffer,
        forecast: &DMatrix<f64>,
    ) -> Result<Plan, ControllerError> {
        let e_now = buffer.current_charge(&self.selector, self.delta_hours);
        self.template.plan(&e_now, forecast)
    }
}
