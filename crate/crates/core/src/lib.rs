//! Consolidated time-varying output constraints and a low-complexity controller
//! that enforces them.
//!
//! Any number of funnel, lower-bounded and upper-bounded output constraints are
//! folded into one smooth scalar `alpha(t, x1)` (a log-sum-exp soft minimum of the
//! constraint margins). A backstepping controller with barrier-transformed errors
//! keeps `alpha` above a time-varying lower bound `rho_alpha(t)`. When the
//! constraints may become mutually infeasible, a prediction-correction estimator
//! tracks the maximum of `alpha` and the bound trails it.
//!
//! The main entry points are [`ScenarioFile`] (TOML scenarios), [`run_closed_loop`],
//! and the diagnostics in [`oracle`].

// Validation is written as `!(v > 0.0)` so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod catalog;
pub mod constraint;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod expr;
pub mod oracle;
pub mod plant;
pub mod plot;
pub mod scenario;
pub mod sim;
pub mod trace_io;

pub use bounds::{
    adaptive_bound, auto_rho0, chi_switch, finite_time_bound, iota_switch, perf_funnel, AdaptiveBound,
    BoundPolicy, Constant, ExprTimeFunction, FiniteTimeBoundParams, PerfFunnelParams, TimeFunction,
};
pub use constraint::{
    AlphaEval, Consolidation, ConstraintKind, ConstraintSet, ConstraintSpec, ExprChannel, FdChannel, Membership,
    OutputChannel,
};
pub use controller::{control_u, ControllerConfig, ControllerDiagnostics, Singularity, SingularityGuard};
pub use error::{Error, Result};
pub use estimator::{EstimatorParams, EstimatorState};
pub use oracle::{alpha_star_grid, violation_report, AlphaStar, GridSpec, ViolationReport};
pub use plant::{robot_plant, PlantModel, RobotParams};
pub use scenario::{load_scenario, parse_scenario, BuiltScenario, ScenarioFile};
pub use sim::{run_closed_loop, sweep, IntegrationSettings, Scenario, SimulationTrace, TraceRecord};
