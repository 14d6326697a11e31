//! Desk-scale laboratory for multi-stage DC optimal power flow with battery
//! storage.
//!
//! Three controllers are implemented and compared in closed loop:
//!
//! * **exact** — multi-stage MPC on the exact DC network model,
//! * **seqid** — sequential least-squares PTDF identification followed by the
//!   same MPC,
//! * **ddopf** — direct data-driven predictive control built from block-Hankel
//!   matrices of one recorded input/disturbance/output trajectory, with
//!   past/future splitting, SVD rank truncation, and a null-space substitution
//!   that eliminates the disturbance equality constraints.
//!
//! The crate is organised along the pipeline:
//!
//! * [`netmodel`] — susceptance matrices, slack reduction, PTDF, DC flow solves
//! * [`case_io`] — MATPOWER-subset parsing, native JSON cases, CSV series/logs
//! * [`plant`] — quasi-Weierstrass descriptor system and ground-truth simulator
//! * [`hankel`] — Hankel stacks, persistency of excitation, truncation,
//!   null-space substitution
//! * [`qpsolve`] — embedded dense operator-splitting QP solver with polish
//! * [`controllers`] — the three controllers plus the regression-equivalence
//!   verifier
//! * [`simloop`] — excitation data generation, measurement noise, closed-loop
//!   receding-horizon simulation, metrics
//! * [`fixtures`] — small test networks used across the test suites and docs

pub mod case_io;
pub mod controllers;
pub mod fixtures;
pub mod hankel;
pub mod netmodel;
pub mod plant;
pub mod qpsolve;
pub mod simloop;

// pub use case_io::{DemandSeries, RawMatpowerCase, StorageAugmentation};
// pub use controllers::{Bounds, Controller, ControllerKind, Plan, StageCost};
// pub use hankel::{HankelStack, NullspaceSubstitution, PePolicy};
pub use netmodel::{GridCase, ReducedModel};
pub use plant::{PlantState, QuasiWeierstrass, TrajectoryLog};
// pub use qpsolve::{QpProblem, QpSettings, QpSolution, QpSolver, QpStatus};
// pub use simloop::{ExperimentConfig, RunMetrics};
