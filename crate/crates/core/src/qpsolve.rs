//! Embedded dense convex QP solver.
//!
//! Solves `min ½xᵀPx + cᵀx  s.t.  lo ≤ Ax ≤ hi` (equalities encoded as
//! lo = hi) by operator splitting with over-relaxation: Ruiz equilibration,
//! a cached Cholesky factorization of the reduced KKT matrix
//! P̄ + σI + ĀᵀρĀ, per-row penalty boosting on equality rows, optional
//! adaptive penalty updates, and an active-set polish step at termination.
//!
//! The solver is built for receding-horizon reuse: P and A are factorized
//! once, while the linear cost and the bounds can be swapped between solves
//! and iterates are kept for warm starting. All reported residuals are
//! unscaled.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("factorization failed: {0}")]
    Factorization(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl QpProblem {
    /// Validate dimensions and bounds, and symmetrize P.
    pub fn new(
        p: DMatrix<f64>,
        c: DVector<f64>,
        a: DMatrix<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = c.len();
        let m = a.nrows();
        if p.nrows() != n || p.ncols() != n {
            return Err(QpError::Dimension(format!(
                "P is {}x{}, expected {n}x{n}",
                p.nrows(),
                p.ncols()
            )));
        }
        if a.ncols() != n {
            return Err(QpError::Dimension(format!(
                "A has {} columns, expected {n}",
                a.ncols()
            )));
        }
        if lo.len() != m || hi.len() != m {
            return Err(QpError::Dimension(format!(
                "bounds have lengths {}/{}, expected {m}",
                lo.len(),
                hi.len()
            )));
        }
        for i in 0..m {
            if lo[i] > hi[i] {
                return Err(QpError::Invalid(format!(
                    "lo[{i}] = {} > hi[{i}] = {}",
                    lo[i], hi[i]
                )));
            }
        }
        let p = (&p + p.transpose()) * 0.5;
        Ok(Self { p, c, a, lo, hi })
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.p * x)[(0, 0)] + self.c.dot(x)
    }
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation parameter.
    pub alpha: f64,
    pub scaling_iters: usize,
    pub polish: bool,
    pub adaptive_rho: bool,
    pub check_interval: usize,
    /// Relative threshold for infeasibility certificates.
    pub eps_infeasible: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-8,
            max_iter: 50_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            polish: true,
            adaptive_rho: true,
            check_interval: 25,
            eps_infeasible: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Lagrange multipliers of the range constraints; positive at active
    /// upper bounds, negative at active lower bounds.
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub solve_seconds: f64,
    pub polished: bool,
    /// Infeasibility certificate when status is Primal/DualInfeasible.
    pub certificate: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

/// Residual norms of the KKT conditions at (x, y), for external verification.
pub fn kkt_residuals(problem: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
    let stat = (&problem.p * x + &problem.c + problem.a.transpose() * y).amax();
    let ax = &problem.a * x;
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for i in 0..problem.m() {
        let v = (ax[i] - problem.hi[i]).max(problem.lo[i] - ax[i]).max(0.0);
        primal = primal.max(v);
        let yp = y[i].max(0.0);
        let ym = (-y[i]).max(0.0);
        let c_hi = if problem.hi[i].is_finite() {
            yp * (problem.hi[i] - ax[i]).abs()
        } else {
            yp
        };
        let c_lo = if problem.lo[i].is_finite() {
            ym * (ax[i] - problem.lo[i]).abs()
        } else {
            ym
        };
        comp = comp.max(c_hi).max(c_lo);
    }
    KktResiduals {
        stationarity: stat,
        primal,
        complementarity: comp,
    }
}

/// One-shot convenience wrapper around [`QpSolver`].
pub fn solve(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    let mut solver = QpSolver::new(problem.clone(), settings.clone())?;
    Ok(solver.solve())
}

pub struct QpSolver {
    problem: QpProblem,
    settings: QpSettings,
    // scaling: x = d∘x̄, constraint rows scaled by e, objective by gamma
    d: DVector<f64>,
    e: DVector<f64>,
    gamma: f64,
    // scaled data
    ps: DMatrix<f64>,
    cs: DVector<f64>,
    asc: DMatrix<f64>,
    los: DVector<f64>,
    his: DVector<f64>,
    rho_base: f64,
    rho: DVector<f64>,
    eq_row: Vec<bool>,
    sigma: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    // iterates (scaled)
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;
const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;

impl QpSolver {
    pub fn new(problem: QpProblem, settings: QpSettings) -> Result<Self, QpError> {
        let n = problem.n();
        let m = problem.m();
        let mut solver = Self {
            d: DVector::from_element(n, 1.0),
            e: DVector::from_element(m, 1.0),
            gamma: 1.0,
            ps: problem.p.clone(),
            cs: problem.c.clone(),
            asc: problem.a.clone(),
            los: problem.lo.clone(),
            his: problem.hi.clone(),
            rho_base: settings.rho,
            rho: DVector::from_element(m, settings.rho),
            eq_row: vec![false; m],
            sigma: settings.sigma,
            chol: None,
            x: DVector::zeros(n),
            z: DVector::zeros(m),
            y: DVector::zeros(m),
            problem,
            settings,
        };
        solver.equilibrate();
        solver.update_rho_vector();
        solver.factorize()?;
        solver.z = solver.clamp(&(&solver.asc * &solver.x));
        Ok(solver)
    }

    pub fn problem(&self) -> &QpProblem {
        &self.problem
    }

    /// Replace the linear cost without refactorizing.
    pub fn update_linear_cost(&mut self, c: DVector<f64>) -> Result<(), QpError> {
        if c.len() != self.problem.n() {
            return Err(QpError::Dimension(format!(
                "cost has length {}, expected {}",
                c.len(),
                self.problem.n()
            )));
        }
        self.cs = (self.gamma * c.component_mul(&self.d)).clone_owned();
        self.problem.c = c;
        Ok(())
    }

    /// Replace the bounds. Refactorizes only when the equality-row pattern
    /// changes (those rows carry a boosted penalty).
    pub fn update_bounds(&mut self, lo: DVector<f64>, hi: DVector<f64>) -> Result<(), QpError> {
        let m = self.problem.m();
        if lo.len() != m || hi.len() != m {
            return Err(QpError::Dimension(format!(
                "bounds have lengths {}/{}, expected {m}",
                lo.len(),
                hi.len()
            )));
        }
        for i in 0..m {
            if lo[i] > hi[i] {
                return Err(QpError::Invalid(format!(
                    "lo[{i}] = {} > hi[{i}] = {}",
                    lo[i], hi[i]
                )));
            }
        }
        self.los = lo.component_mul(&self.e);
        self.his = hi.component_mul(&self.e);
        self.problem.lo = lo;
        self.problem.hi = hi;
        let pattern_changed = self.update_rho_vector();
        if pattern_changed {
            self.factorize()?;
        }
        Ok(())
    }

    /// Seed the iterates with an (unscaled) primal/dual guess.
    pub fn warm_start(&mut self, x: &DVector<f64>, y: &DVector<f64>) {
        if x.len() == self.problem.n() && y.len() == self.problem.m() {
            self.x = x.component_div(&self.d);
            self.y = self.gamma * y.component_mul(&self.e);
            self.z = self.clamp(&(&self.asc * &self.x));
        }
    }

    fn clamp(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(v.len(), |i, _| v[i].clamp(self.los[i], self.his[i]))
    }

    /// Ruiz equilibration of [[P, Aᵀ], [A, 0]] plus cost normalization.
    fn equilibrate(&mut self) {
        let n = self.problem.n();
        let m = self.problem.m();
        if n == 0 {
            return;
        }
        for _ in 0..self.settings.scaling_iters {
            let mut dx = DVector::from_element(n, 1.0);
            for j in 0..n {
                let mut norm: f64 = 0.0;
                for i in 0..n {
                    norm = norm.max(self.ps[(i, j)].abs());
                }
                for i in 0..m {
                    norm = norm.max(self.asc[(i, j)].abs());
                }
                if norm > 0.0 {
                    dx[j] = (1.0 / norm.sqrt()).clamp(MIN_SCALING, MAX_SCALING);
                }
            }
            let mut de = DVector::from_element(m, 1.0);
            for i in 0..m {
                let norm = self.asc.row(i).amax();
                if norm > 0.0 {
                    de[i] = (1.0 / norm.sqrt()).clamp(MIN_SCALING, MAX_SCALING);
                }
            }
            for j in 0..n {
                for i in 0..n {
                    self.ps[(i, j)] *= dx[i] * dx[j];
                }
            }
            for j in 0..n {
                for i in 0..m {
                    self.asc[(i, j)] *= de[i] * dx[j];
                }
            }
            self.cs.component_mul_assign(&dx);
            self.los.component_mul_assign(&de);
            self.his.component_mul_assign(&de);
            self.d.component_mul_assign(&dx);
            self.e.component_mul_assign(&de);

            // cost scaling: bring the objective data toward unit size
            let mut col_mean = 0.0;
            for j in 0..n {
                let mut norm: f64 = 0.0;
                for i in 0..n {
                    norm = norm.max(self.ps[(i, j)].abs());
                }
                col_mean += norm;
            }
            col_mean /= n as f64;
            let g_denom = col_mean.max(self.cs.amax());
            if g_denom > 0.0 {
                let g = (1.0 / g_denom).clamp(MIN_SCALING, MAX_SCALING);
                self.ps *= g;
                self.cs *= g;
                self.gamma *= g;
            }
        }
    }

    /// Returns true when the equality pattern changed.
    fn update_rho_vector(&mut self) -> bool {
        let m = self.problem.m();
        let mut changed = false;
        for i in 0..m {
            let eq = self.problem.lo[i].is_finite()
                && self.problem.hi[i].is_finite()
                && self.problem.lo[i] == self.problem.hi[i];
            if eq != self.eq_row[i] {
                changed = true;
            }
            self.eq_row[i] = eq;
            self.rho[i] = if eq {
                (self.rho_base * RHO_EQ_SCALE).clamp(RHO_MIN, RHO_MAX * RHO_EQ_SCALE)
            } else {
                self.rho_base.clamp(RHO_MIN, RHO_MAX)
            };
        }
        changed
    }

    fn factorize(&mut self) -> Result<(), QpError> {
        let n = self.problem.n();
        let m = self.problem.m();
        if n == 0 {
            self.chol = None;
            return Ok(());
        }
        let mut attempt_sigma = self.sigma;
        for _ in 0..4 {
            let mut h = self.ps.clone();
            for i in 0..n {
                h[(i, i)] += attempt_sigma;
            }
            if m > 0 {
                let mut a_scaled = self.asc.clone();
                for i in 0..m {
                    let r = self.rho[i];
                    for j in 0..n {
                        a_scaled[(i, j)] *= r;
                    }
                }
                h += self.asc.transpose() * a_scaled;
            }
            match Cholesky::new(h) {
                Some(chol) => {
                    self.chol = Some(chol);
                    self.sigma = attempt_sigma;
                    return Ok(());
                }
                None => attempt_sigma *= 100.0,
            }
        }
        Err(QpError::Factorization(
            "reduced KKT matrix is not positive definite".into(),
        ))
    }

    fn unscaled_x(&self) -> DVector<f64> {
        self.x.component_mul(&self.d)
    }

    fn unscaled_y(&self) -> DVector<f64> {
        self.y.component_mul(&self.e) / self.gamma
    }

    pub fn solve(&mut self) -> QpSolution {
        let started = std::time::Instant::now();
        let n = self.problem.n();
        let m = self.problem.m();

        if n == 0 {
            // nothing to decide: the constraints are constant offsets
            let feasible = (0..m).all(|i| self.problem.lo[i] <= 0.0 && 0.0 <= self.problem.hi[i]);
            return QpSolution {
                x: DVector::zeros(0),
                y: DVector::zeros(m),
                status: if feasible {
                    QpStatus::Optimal
                } else {
                    QpStatus::PrimalInfeasible
                },
                iterations: 0,
                primal_residual: (0..m)
                    .map(|i| (0.0f64 - self.problem.hi[i]).max(self.problem.lo[i]).max(0.0))
                    .fold(0.0, f64::max),
                dual_residual: 0.0,
                objective: 0.0,
                solve_seconds: started.elapsed().as_secs_f64(),
                polished: false,
                certificate: None,
            };
        }

        let alpha = self.settings.alpha;
        let mut x_tilde = DVector::zeros(n);
        let mut rhs = DVector::zeros(n);
        let mut z_tilde = DVector::zeros(m);
        let mut tmp_m = DVector::zeros(m);
        let mut status = QpStatus::MaxIter;
        let mut iterations = self.settings.max_iter;
        let mut primal_res = f64::INFINITY;
        let mut dual_res = f64::INFINITY;
        let mut certificate = None;
        let mut refactor_budget = 10usize;

        let mut iter = 0;
        while iter < self.settings.max_iter {
            iter += 1;
            let x_prev = self.x.clone();
            let y_prev = self.y.clone();

            // x̃ = H⁻¹(σx − c + Aᵀ(ρ∘z − y)), z̃ = A x̃
            for i in 0..m {
                tmp_m[i] = self.rho[i] * self.z[i] - self.y[i];
            }
            rhs.copy_from(&self.x);
            rhs *= self.sigma;
            rhs -= &self.cs;
            rhs.gemv_tr(1.0, &self.asc, &tmp_m, 1.0);
            self.chol.as_ref().expect("factorized").solve_mut(&mut rhs);
            x_tilde.copy_from(&rhs);
            z_tilde.gemv(1.0, &self.asc, &x_tilde, 0.0);

            // over-relaxed updates
            for j in 0..n {
                self.x[j] = alpha * x_tilde[j] + (1.0 - alpha) * self.x[j];
            }
            for i in 0..m {
                let z_relaxed = alpha * z_tilde[i] + (1.0 - alpha) * self.z[i];
                let z_new = (z_relaxed + self.y[i] / self.rho[i]).clamp(self.los[i], self.his[i]);
                self.y[i] += self.rho[i] * (z_relaxed - z_new);
                self.z[i] = z_new;
            }

            if iter % self.settings.check_interval != 0 && iter != self.settings.max_iter {
                continue;
            }

            // unscaled residuals
            let ax = &self.asc * &self.x;
            let ax_u = ax.component_div(&self.e);
            let z_u = self.z.component_div(&self.e);
            let r_prim = (&ax_u - &z_u).amax().max(0.0);
            let px = &self.ps * &self.x;
            let aty = self.asc.transpose() * &self.y;
            let d_inv_scale = |v: &DVector<f64>| -> f64 {
                let mut norm: f64 = 0.0;
                for j in 0..n {
                    norm = norm.max((v[j] / self.d[j]).abs());
                }
                norm
            };
            let r_dual_terms = (
                d_inv_scale(&px),
                d_inv_scale(&aty),
                d_inv_scale(&self.cs),
            );
            let r_dual = {
                let stat = &px + &self.cs + &aty;
                d_inv_scale(&stat) / self.gamma
            };
            let eps_prim = self.settings.eps_abs
                + self.settings.eps_rel * ax_u.amax().max(z_u.amax());
            let eps_dual = self.settings.eps_abs
                + self.settings.eps_rel / self.gamma
                    * r_dual_terms.0.max(r_dual_terms.1).max(r_dual_terms.2);
            primal_res = r_prim;
            dual_res = r_dual;

            if r_prim <= eps_prim && r_dual <= eps_dual {
                status = QpStatus::Optimal;
                iterations = iter;
                break;
            }

            // infeasibility certificates from the iterate differences
            let dy = (&self.y - &y_prev).component_mul(&self.e) / self.gamma;
            let dy_norm = dy.amax();
            if dy_norm > 0.0 && self.primal_infeasibility_certificate(&dy, dy_norm) {
                status = QpStatus::PrimalInfeasible;
                iterations = iter;
                certificate = Some(dy / dy_norm);
                break;
            }
            let dx = (&self.x - &x_prev).component_mul(&self.d);
            let dx_norm = dx.amax();
            if dx_norm > 0.0 && self.dual_infeasibility_certificate(&dx, dx_norm) {
                status = QpStatus::DualInfeasible;
                iterations = iter;
                certificate = Some(dx / dx_norm);
                break;
            }

            // adaptive penalty
            if self.settings.adaptive_rho && refactor_budget > 0 && m > 0 {
                let prim_rel = r_prim / eps_prim.max(f64::MIN_POSITIVE);
                let dual_rel = r_dual / eps_dual.max(f64::MIN_POSITIVE);
                let ratio = (prim_rel / dual_rel.max(f64::MIN_POSITIVE)).sqrt();
                if ratio > 5.0 || ratio < 0.2 {
                    self.rho_base = (self.rho_base * ratio).clamp(RHO_MIN, RHO_MAX);
                    self.update_rho_vector();
                    if self.factorize().is_err() {
                        break;
                    }
                    refactor_budget -= 1;
                }
            }
        }
        if status == QpStatus::MaxIter {
            iterations = self.settings.max_iter;
        }

        let mut x_out = self.unscaled_x();
        let mut y_out = self.unscaled_y();
        let mut polished = false;

        if status == QpStatus::Optimal && self.settings.polish {
            if let Some((x_pol, y_pol)) = self.polish(&x_out, &y_out) {
                let before = kkt_residuals(&self.problem, &x_out, &y_out);
                let after = kkt_residuals(&self.problem, &x_pol, &y_pol);
                if after.max() <= before.max() || after.max() <= self.settings.eps_abs {
                    x_out = x_pol;
                    y_out = y_pol;
                    polished = true;
                    primal_res = after.primal;
                    dual_res = after.stationarity;
                }
            }
        }

        QpSolution {
            objective: self.problem.objective(&x_out),
            x: x_out,
            y: y_out,
            status,
            iterations,
            primal_residual: primal_res,
            dual_residual: dual_res,
            solve_seconds: started.elapsed().as_secs_f64(),
            polished,
            certificate,
        }
    }

    fn primal_infeasibility_certificate(&self, dy: &DVector<f64>, dy_norm: f64) -> bool {
        let eps = self.settings.eps_infeasible * dy_norm;
        let at_dy = self.problem.a.transpose() * dy;
        if at_dy.amax() > eps {
            return false;
        }
        let mut support = 0.0;
        for i in 0..self.problem.m() {
            let plus = dy[i].max(0.0);
            let minus = (-dy[i]).max(0.0);
            if self.problem.hi[i].is_finite() {
                support += self.problem.hi[i] * plus;
            } else if plus > eps {
                return false;
            }
            if self.problem.lo[i].is_finite() {
                support -= self.problem.lo[i] * minus;
            } else if minus > eps {
                return false;
            }
        }
        support < -eps
    }

    fn dual_infeasibility_certificate(&self, dx: &DVector<f64>, dx_norm: f64) -> bool {
        let eps = self.settings.eps_infeasible * dx_norm;
        if (&self.problem.p * dx).amax() > eps {
            return false;
        }
        if self.problem.c.dot(dx) >= -eps {
            return false;
        }
        let a_dx = &self.problem.a * dx;
        for i in 0..self.problem.m() {
            let lo_f = self.problem.lo[i].is_finite();
            let hi_f = self.problem.hi[i].is_finite();
            let v = a_dx[i];
            let ok = match (lo_f, hi_f) {
                (true, true) => v.abs() <= eps,
                (true, false) => v >= -eps,
                (false, true) => v <= eps,
                (false, false) => true,
            };
            if !ok {
                return false;
            }
        }
        true
    }

    /// Solve the equality-constrained KKT system on the active set implied
    /// by the dual signs, with regularization plus iterative refinement.
    fn polish(&self, x: &DVector<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.problem.n();
        let m = self.problem.m();
        let mut active: Vec<(usize, f64)> = Vec::new();
        for i in 0..m {
            if y[i] < 0.0 && self.problem.lo[i].is_finite() {
                active.push((i, self.problem.lo[i]));
            } else if y[i] > 0.0 && self.problem.hi[i].is_finite() {
                active.push((i, self.problem.hi[i]));
            }
        }
        let k = active.len();
        let dim = n + k;
        let delta = 1e-8;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.problem.p);
        for j in 0..n {
            kkt[(j, j)] += delta;
        }
        for (row, &(i, _)) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + row, j)] = self.problem.a[(i, j)];
                kkt[(j, n + row)] = self.problem.a[(i, j)];
            }
            kkt[(n + row, n + row)] = -delta;
        }
        let lu = kkt.lu();

        let mut rhs = DVector::zeros(dim);
        for j in 0..n {
            rhs[j] = -self.problem.c[j];
        }
        for (row, &(_, b)) in active.iter().enumerate() {
            rhs[n + row] = b;
        }
        let mut sol = lu.solve(&rhs)?;

        // refine against the unregularized KKT system
        for _ in 0..3 {
            let mut residual = rhs.clone();
            let x_part = sol.rows(0, n).clone_owned();
            let y_part = sol.rows(n, k).clone_owned();
            let mut top = &self.problem.p * &x_part;
            for (row, &(i, _)) in active.iter().enumerate() {
                for j in 0..n {
                    top[j] += self.problem.a[(i, j)] * y_part[row];
                }
                let mut ax = 0.0;
                for j in 0..n {
                    ax += self.problem.a[(i, j)] * x_part[j];
                }
                residual[n + row] -= ax;
            }
            for j in 0..n {
                residual[j] -= top[j];
            }
            let correction = lu.solve(&residual)?;
            sol += correction;
        }

        let x_pol = sol.rows(0, n).clone_owned();
        let mut y_pol = DVector::zeros(m);
        for (row, &(i, _)) in active.iter().enumerate() {
            y_pol[i] = sol[n + row];
        }
        let _ = x;
        Some((x_pol, y_pol))
    }
}
