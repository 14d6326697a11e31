// scratch: compare segmented DD vs exact stage by stage
use ddopf_core::controllers::*;
use ddopf_core::fixtures;
use ddopf_core::netmodel::reduce;
use ddopf_core::plant::{assemble_descriptor, simulate, PlantState, step};
use ddopf_core::hankel::*;
use ddopf_core::qpsolve::QpSettings;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;


fn per_block(case: &ddopf_core::netmodel::GridCase, a: &DMatrix<f64>, b: &DMatrix<f64>) {
    let q = case.n_storage();
    let ne = case.branches.len();
    for k in 0..a.nrows() {
        let da = (a.row(k) - b.row(k)).clone_owned();
        let de = da.columns(0, q).amax();
        let dp = da[(0, q)].abs();
        let df = da.columns(q + 1, ne).amax();
        println!("stage {k}: |de| {de:.3e}  |dp1| {dp:.3e}  |df| {df:.3e}");
    }
}

fn main() {
    let case = fixtures::six_bus_two_storage();
    let model = reduce(&case).unwrap();
    let sys = assemble_descriptor(&model, case.delta_hours).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let t = 160;
    let u = DMatrix::from_fn(t, case.n_u(), |_, _| rng.random_range(-8.0..8.0));
    let w = DMatrix::from_fn(t, case.n_w(), |_, _| rng.random_range(10.0..40.0));
    let e0 = DVector::from_iterator(case.n_storage(), case.storages.iter().map(|s| s.e0));
    let log = simulate(&sys, &e0, &u, &w).unwrap();

    let cost = StageCost::from_case(&case, &CostOptions::default()).unwrap();
    let bounds = Bounds::from_case(&case).unwrap();
    let l = 6;

    // buffer: idle prehistory
    let mut buffer = MeasurementBuffer::new(1);
    let wnom = DVector::from_iterator(case.n_w(), case.demands.iter().map(|d| case.buses.iter().find(|b| b.id == d.bus).unwrap().demand_mw));
    let state = PlantState { e: e0.clone(), delta_hours: case.delta_hours };
    let u0 = DVector::zeros(case.n_u());
    let (_, y0) = step(&sys, &state, &u0, &wnom).unwrap();
    buffer.push(u0, wnom.clone(), y0);

    let forecast = DMatrix::from_fn(l, case.n_w(), |k, j| {
        let nominal = case.buses.iter().find(|b| b.id == case.demands[j].bus).unwrap().demand_mw;
        nominal * (1.0 + 0.1 * ((k as f64) * 0.7).sin())
    });


    // row-identity audit: p1 row and flow rows must be linear combos of u/w rows
    let audit = |stack: &HankelStack, tag: &str| {
        let q = case.n_storage();
        let ne = case.branches.len();
        let ones_u = nalgebra::RowDVector::from_element(case.n_u(), 1.0);
        let ones_w = nalgebra::RowDVector::from_element(case.n_w(), 1.0);
        let p1_pred = &ones_w * &stack.w_f - &ones_u * &stack.u_f;
        let dp1 = (stack.y_f.row(q) - p1_pred.row(0)).amax();
        let phi = &model.ptdf * &model.cg;
        let psi = &model.ptdf * &model.cd;
        let f_pred = &phi * &stack.u_f - &psi * &stack.w_f;
        let df = (stack.y_f.rows(q + 1, ne) - f_pred).amax();
        println!("audit[{tag}]: cols {}  |p1 identity| {dp1:.3e}  |flow identity| {df:.3e}", stack.cols());
    };
    let raw = build_simplified_stack(&log, &model.storage_selector, 1, 1).unwrap();
    audit(&raw, "raw");
    let trunc = truncate_rank(&raw, raw.default_truncation_target()).unwrap();
    audit(&trunc, "truncated");
    let options = DdopfOptions { lambda: 0.0, pe_policy: PePolicy::Strict, ..DdopfOptions::default() };
    let mut dd = DdopfController::new(&log, &model, cost.clone(), bounds.clone(), l, &options).unwrap();
    let dd_plan = dd.plan(&buffer, &forecast).unwrap();
    let e_now = buffer.current_charge(&model.storage_selector, case.delta_hours);
    let exact = exact_mpc_plan(&model, &cost, &bounds, &e_now, &forecast, case.delta_hours).unwrap();

    println!("exact obj {:.6}  dd obj {:.6}", exact.objective, dd_plan.objective);
    for k in 0..l {
        let du = (dd_plan.u.row(k) - exact.u.row(k)).amax();
        println!("stage {k}: |du| = {:.6}  dd.u = {:?}  ex.u = {:?}", du,
            dd_plan.u.row(k).iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>(),
            exact.u.row(k).iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
    }
    // replay dd plan through plant: does predicted y match?
    let replay = simulate(&sys, &e_now, &dd_plan.u, &forecast).unwrap();
    println!("dd prediction vs plant replay max |dy| = {:.3e}", (&replay.y - &dd_plan.y).amax());
    per_block(&case, &replay.y, &dd_plan.y);
    // costs of each plan evaluated on the plant
    let cost_of = |plan: &DMatrix<f64>| {
        let rep = simulate(&sys, &e_now, plan, &forecast).unwrap();
        (0..l).map(|k| cost.stage_cost(&rep.u.row(k).transpose(), &rep.y.row(k).transpose())).sum::<f64>()
    };
    println!("plant cost of exact plan {:.6}, of dd plan {:.6}", cost_of(&exact.u), cost_of(&dd_plan.u));
    // feasibility of exact plan w.r.t. dd's constraints: replay bounds
    let _ = QpSettings::default();
}
// appended: per-block deviation dump
