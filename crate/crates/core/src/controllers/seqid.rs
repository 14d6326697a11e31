//! Sequential identification: estimate the PTDF matrix from recorded flows
//! and nodal injections by least squares, feed the estimate into the same
//! multi-stage OPF as the exact controller, and verify the algebraic
//! equivalence between that regression and the data-driven representation.

use super::exact::ExactMpcTemplate;
use super::{Bounds, Controller, ControllerError, MeasurementBuffer, Plan, StageCost};
use crate::netmodel::ReducedModel;
use crate::plant::TrajectoryLog;
use crate::qpsolve::QpSettings;
use nalgebra::{DMatrix, DVector};

/// Minimum-norm least-squares PTDF estimate together with the rank
/// diagnostics of the injection data.
#[derive(Debug, Clone)]
pub struct PtdfEstimate {
    pub m_hat: DMatrix<f64>,
    /// Numeric rank of the injection data matrix.
    pub rank: usize,
    /// Number of unidentifiable directions (|N|−1 − rank).
    pub deficient_dims: usize,
    /// Buses whose net injection never moves in the data.
    pub silent_buses: Vec<usize>,
}

fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (DMatrix::zeros(m.ncols(), m.nrows()), 0);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let v_t = svd.v_t.as_ref().expect("svd v_t");
    let largest = svd.singular_values.max();
    let rank = if largest == 0.0 {
        0
    } else {
        svd.singular_values
            .iter()
            .filter(|s| **s > rel_tol * largest)
            .count()
    };
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for k in 0..rank {
        let vk = v_t.row(k).transpose();
        let uk = u.column(k);
        out += vk * uk.transpose() / svd.singular_values[k];
    }
    (out, rank)
}

/// Extract the flow block of the outputs as an |E|×T data matrix.
fn flow_data(data: &TrajectoryLog, q: usize) -> DMatrix<f64> {
    let ne = data.y.ncols() - q - 1;
    data.y.columns(q + 1, ne).transpose()
}

/// Reduced net injections C̃g u − C̃d w as an (|N|−1)×T data matrix.
fn injection_data(data: &TrajectoryLog, model: &ReducedModel) -> DMatrix<f64> {
    &model.cg * data.u.transpose() - &model.cd * data.w.transpose()
}

/// Least-squares PTDF estimate  M̂ = argmin ‖F − M̂ P‖_F  over the recorded
/// data, solved through the pseudoinverse (minimum-norm on unidentifiable
/// directions). Rank deficiency is reported, not repaired.
pub fn seqid_estimate_ptdf(data: &TrajectoryLog, model: &ReducedModel) -> PtdfEstimate {
    let q = model.storage_selector.nrows();
    let flows = flow_data(data, q);
    let injections = injection_data(data, model);
    let (p_pinv, rank) = pinv(&injections, crate::hankel::RANK_TOL);
    let m_hat = &flows * p_pinv;
    let n_red = injections.nrows();
    let deficient = n_red - rank;
    let mut silent = Vec::new();
    if deficient > 0 {
        for r in 0..n_red {
            if injections.row(r).amax() == 0.0 {
                silent.push(model.bus_ids[model.reduced_to_dense[r]]);
            }
        }
        log::warn!(
            "injection data is rank-deficient: rank {rank} of {n_red} ({deficient} directions \
             unidentifiable); silent buses: {silent:?}"
        );
    }
    PtdfEstimate {
        m_hat,
        rank,
        deficient_dims: deficient,
        silent_buses: silent,
    }
}

/// Deviation between the unstructured flow regression and the PTDF-based
/// one. With u and −w as regressors, the block coefficients must satisfy
/// M_UF = M̂ C̃g and M_WF = M̂ C̃d.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub max_deviation: f64,
    /// Deviation restricted to the identifiable (observed-regressor) span.
    pub projected_deviation: f64,
    pub injection_rank: usize,
    pub deficient_dims: usize,
}

pub fn regression_equivalence_check(
    data: &TrajectoryLog,
    model: &ReducedModel,
) -> EquivalenceReport {
    let q = model.storage_selector.nrows();
    let n_u = data.u.ncols();
    let n_w = data.w.ncols();
    let t = data.len();
    let flows = flow_data(data, q);

    // regressors: inputs stacked over negated disturbances (injection sign)
    let mut z = DMatrix::zeros(n_u + n_w, t);
    z.view_mut((0, 0), (n_u, t)).copy_from(&data.u.transpose());
    z.view_mut((n_u, 0), (n_w, t))
        .copy_from(&(-data.w.transpose()));
    let (z_pinv, _) = pinv(&z, crate::hankel::RANK_TOL);
    let m_tilde = &flows * z_pinv;

    let estimate = seqid_estimate_ptdf(data, model);
    let mut structured = DMatrix::zeros(flows.nrows(), n_u + n_w);
    structured
        .view_mut((0, 0), (flows.nrows(), n_u))
        .copy_from(&(&estimate.m_hat * &model.cg));
    structured
        .view_mut((0, n_u), (flows.nrows(), n_w))
        .copy_from(&(&estimate.m_hat * &model.cd));

    let difference = &m_tilde - &structured;
    let max_deviation = difference.amax();

    // restrict to the span of the observed regressors
    let projected_deviation = {
        let svd = z.clone().svd(true, false);
        let u = svd.u.as_ref().expect("svd u");
        let largest = svd.singular_values.max();
        let rank = if largest == 0.0 {
            0
        } else {
            svd.singular_values
                .iter()
                .filter(|s| **s > crate::hankel::RANK_TOL * largest)
                .count()
        };
        if rank == 0 {
            0.0
        } else {
            (difference * u.columns(0, rank)).amax()
        }
    };

    EquivalenceReport {
        max_deviation,
        projected_deviation,
        injection_rank: estimate.rank,
        deficient_dims: estimate.deficient_dims,
    }
}

/// Receding-horizon controller on the identified network model.
pub struct SeqIdMpc {
    template: ExactMpcTemplate,
    selector: DMatrix<f64>,
    delta_hours: f64,
    estimate: PtdfEstimate,
}

impl SeqIdMpc {
    /// Identify the PTDF from the recorded data, then build the same
    /// condensed OPF the exact controller uses.
    pub fn new(
        data: &TrajectoryLog,
        model: &ReducedModel,
        cost: StageCost,
        bounds: Bounds,
        horizon: usize,
        delta_hours: f64,
        qp_settings: QpSettings,
    ) -> Result<Self, ControllerError> {
        let estimate = seqid_estimate_ptdf(data, model);
        let template = ExactMpcTemplate::new(
            &estimate.m_hat,
            model,
            cost,
            bounds,
            horizon,
            delta_hours,
            qp_settings,
            None,
        )?;
        Ok(Self {
            template,
            selector: model.storage_selector.clone(),
            delta_hours,
            estimate,
        })
    }

    pub fn estimate(&self) -> &PtdfEstimate {
        &self.estimate
    }
}

impl Controller for SeqIdMpc {
    fn name(&self) -> &'static str {
        "seqid"
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::netmodel::reduce;
    use crate::plant::{assemble_descriptor, simulate};
    use nalgebra::dvector;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn recorded(case: &crate::netmodel::GridCase, t: usize, seed: u64) -> (ReducedModel, TrajectoryLog) {
        let model = reduce(case).unwrap();
        let sys = assemble_descriptor(&model, case.delta_hours).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = DMatrix::from_fn(t, case.n_u(), |_, _| rng.random_range(-10.0..10.0));
        let w = DMatrix::from_fn(t, case.n_w(), |_, _| rng.random_range(0.0..20.0));
        let e0 = DVector::from_element(case.n_storage(), 10.0);
        let log = simulate(&sys, &e0, &u, &w).unwrap();
        (model, log)
    }

    #[test]
    fn recovers_analytic_ptdf_from_clean_data() {
        let case = fixtures::six_bus_two_storage();
        let (model, log) = recorded(&case, 40, 1);
        let estimate = seqid_estimate_ptdf(&log, &model);
        assert_eq!(estimate.rank, 5);
        assert_eq!(estimate.deficient_dims, 0);
        assert!(
            (&estimate.m_hat - &model.ptdf).amax() < 1e-8,
            "max error {}",
            (&estimate.m_hat - &model.ptdf).amax()
        );
    }

    #[test]
    fn zero_data_gives_zero_estimate_with_warning() {
        let case = fixtures::six_bus_two_storage();
        let model = reduce(&case).unwrap();
        let t = 10;
        let log = TrajectoryLog {
            u: DMatrix::zeros(t, case.n_u()),
            w: DMatrix::zeros(t, case.n_w()),
            y: DMatrix::zeros(t, case.n_y()),
        };
        let estimate = seqid_estimate_ptdf(&log, &model);
        assert_eq!(estimate.rank, 0);
        assert_eq!(estimate.m_hat.amax(), 0.0);
        assert_eq!(estimate.deficient_dims, 5);
        assert_eq!(estimate.silent_buses.len(), 5);
    }

    #[test]
    fn two_bus_exact_fit() {
        // injections at bus 2 of (1, 2) with flows (-1, -2) on branch 1->2
        let case = crate::netmodel::GridCase {
            buses: vec![
                crate::netmodel::Bus { id: 1, demand_mw: 0.0 },
                crate::netmodel::Bus { id: 2, demand_mw: 0.0 },
            ],
            branches: vec![crate::netmodel::Branch {
                from: 1,
                to: 2,
                reactance: 1.0,
                tap: 1.0,
                flow_limit_mw: 100.0,
            }],
            generators: vec![
                crate::netmodel::Generator {
                    bus: 1,
                    p_min: 0.0,
                    p_max: 10.0,
                    cost_quad: 0.1,
                    cost_lin: 1.0,
                },
                crate::netmodel::Generator {
                    bus: 2,
                    p_min: 0.0,
                    p_max: 10.0,
                    cost_quad: 0.1,
                    cost_lin: 1.0,
                },
            ],
            storages: vec![],
            demands: vec![],
            slack_bus: 1,
            delta_hours: 0.25,
        };
        let model = reduce(&case).unwrap();
        let log = TrajectoryLog {
            u: DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            w: DMatrix::zeros(2, 0),
            y: DMatrix::from_row_slice(2, 2, &[
                // y = [p1; f]
                -1.0, -1.0, //
                -2.0, -2.0,
            ]),
        };
        let estimate = seqid_estimate_ptdf(&log, &model);
        assert!((estimate.m_hat[(0, 0)] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn equivalence_on_clean_full_rank_data() {
        let case = fixtures::six_bus_two_storage();
        let (model, log) = recorded(&case, 50, 2);
        let report = regression_equivalence_check(&log, &model);
        assert!(report.max_deviation < 1e-8, "deviation {}", report.max_deviation);
        assert_eq!(report.deficient_dims, 0);
    }

    #[test]
    fn equivalence_with_silent_bus_holds_on_identifiable_span() {
        // drop every injection that can move bus 3: remove its generator
        let mut case = fixtures::six_bus_two_storage();
        case.generators.remove(2);
        let (model, log) = recorded(&case, 50, 3);
        let report = regression_equivalence_check(&log, &model);
        assert!(report.deficient_dims > 0);
        assert!(
            report.projected_deviation < 1e-8,
            "projected deviation {}",
            report.projected_deviation
        );
    }

    #[test]
    fn single_sample_equivalence() {
        let case = fixtures::six_bus_two_storage();
        let (model, log) = recorded(&case, 1, 4);
        let report = regression_equivalence_check(&log, &model);
        assert!(
            report.projected_deviation < 1e-9,
            "projected deviation {}",
            report.projected_deviation
        );
    }

    #[test]
    fn seqid_with_exact_estimate_matches_exact_controller() {
        use crate::controllers::{CostOptions, ControllerKind};
        let _ = ControllerKind::SeqId;
        let case = fixtures::six_bus_two_storage();
        let (model, log) = recorded(&case, 60, 5);
        let cost = StageCost::from_case(&case, &CostOptions::default()).unwrap();
        let bounds = Bounds::from_case(&case).unwrap();
        let mut seqid = SeqIdMpc::new(
            &log,
            &model,
            cost.clone(),
            bounds.clone(),
            3,
            case.delta_hours,
            QpSettings::default(),
        )
        .unwrap();
        let mut exact = crate::controllers::ExactMpc::new(
            &model,
            cost,
            bounds,
            3,
            case.delta_hours,
            QpSettings::default(),
        )
        .unwrap();

        let mut buffer = MeasurementBuffer::new(1);
        let y0 = {
            let mut y = DVector::zeros(case.n_y());
            y[0] = 20.0;
            y[1] = 30.0;
            y
        };
        buffer.push(DVector::zeros(case.n_u()), dvector![40.0, 30.0, 50.0], y0);
        let forecast = DMatrix::from_fn(3, 3, |k, j| 35.0 + 3.0 * k as f64 + 2.0 * j as f64);
        let a = seqid.plan(&buffer, &forecast).unwrap();
        let b = exact.plan(&buffer, &forecast).unwrap();
        assert!(
            (&a.u - &b.u).amax() < 1e-8,
            "plans differ by {}",
            (&a.u - &b.u).amax()
        );
    }
}
