//! Fixed-step closed-loop simulation.
//!
//! The plant state and the estimator state are advanced together by one classical
//! RK4 step. Each stage evaluates the estimator first (its right-hand side never
//! reads the plant), builds the bound from the stage value of the estimate, then
//! evaluates the control law and the plant. Times are `k * step`, never accumulated.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::bounds::{adaptive_bound, finite_time_bound, BoundPolicy};
use crate::constraint::Consolidation;
use crate::controller::{control_u, ControllerConfig, SingularityGuard};
use crate::error::{Error, Result};
use crate::estimator::rhs_from_eval;
use crate::plant::{plant_rhs, PlantModel};
use crate::scenario::ScenarioFile;

/// Classical fourth-order Runge-Kutta step.
pub fn rk4_step<F>(mut rhs: F, t: f64, y: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = rhs(t, y);
    let k2 = rhs(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = rhs(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = rhs(t + h, &(y + &k3 * h));
    combine(y, &k1, &k2, &k3, &k4, h)
}

fn combine(
    y: &DVector<f64>,
    k1: &DVector<f64>,
    k2: &DVector<f64>,
    k3: &DVector<f64>,
    k4: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegrationSettings {
    pub step: f64,
    pub horizon: f64,
    pub record_stride: usize,
}

impl Default for IntegrationSettings {
    fn default() -> Self {
        IntegrationSettings {
            step: 1e-3,
            horizon: 25.0,
            record_stride: 10,
        }
    }
}

impl IntegrationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::validation("integration.step", "must be > 0"));
        }
        if !(self.horizon >= self.step) {
            return Err(Error::validation("integration.horizon", "must be >= step"));
        }
        if self.record_stride == 0 {
            return Err(Error::validation("integration.stride", "must be >= 1"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.step).round() as usize
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub plant: PlantModel,
    pub cons: Consolidation,
    pub bound: BoundPolicy,
    pub controller: ControllerConfig,
    pub integration: IntegrationSettings,
    /// Full plant state, including auxiliary states.
    pub x0: Vec<f64>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let n = self.cons.n();
        if self.plant.n != n {
            return Err(Error::dim("plant channels vs constraint dimension", n, self.plant.n));
        }
        if self.controller.n != n || self.controller.r != self.plant.r {
            return Err(Error::validation("controller", "order or dimension differs from the plant"));
        }
        if self.x0.len() != self.plant.state_dim() {
            return Err(Error::dim("initial state", self.plant.state_dim(), self.x0.len()));
        }
        if let BoundPolicy::Adaptive(a) = &self.bound {
            if let Some(xt) = &a.estimator.x_tilde0 {
                if xt.len() != n {
                    return Err(Error::dim("x_tilde0", n, xt.len()));
                }
            }
        }
        self.controller.validate()?;
        self.bound.validate()?;
        self.integration.validate()
    }

    pub fn layout(&self) -> TraceLayout {
        TraceLayout {
            n: self.plant.n,
            r: self.plant.r,
            aux_names: self.plant.aux_names().to_vec(),
            adaptive: self.bound.is_adaptive(),
        }
    }

    fn x_tilde0(&self) -> Option<Vec<f64>> {
        match &self.bound {
            BoundPolicy::Static(_) => None,
            BoundPolicy::Adaptive(a) => Some(
                a.estimator
                    .x_tilde0
                    .clone()
                    .unwrap_or_else(|| self.x0[..self.cons.n()].to_vec()),
            ),
        }
    }

    /// `rho_alpha(0)` for this scenario's initial state.
    pub fn initial_bound(&self) -> Result<f64> {
        match &self.bound {
            BoundPolicy::Static(p) => Ok(finite_time_bound(p, 0.0).0),
            BoundPolicy::Adaptive(a) => {
                let xt = self.x_tilde0().unwrap();
                let ah = self.cons.alpha(0.0, &xt)?;
                Ok(adaptive_bound(&a.nominal, a.mu, 0.0, ah, 0.0).value)
            }
        }
    }
}

/// Column structure of a trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceLayout {
    pub n: usize,
    pub r: usize,
    pub aux_names: Vec<String>,
    pub adaptive: bool,
}

/// One recorded time sample. Quantities that could not be evaluated are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub state: Vec<f64>,
    pub u: Vec<f64>,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub rho_alpha: f64,
    pub varrho: Option<f64>,
    pub alpha_hat: Option<f64>,
    pub x_tilde: Option<Vec<f64>>,
    pub e_alpha: f64,
    pub eps_alpha: f64,
    /// `e_hat_{i,j}` for `i = 2..r`, row-major.
    pub e_hat: Vec<f64>,
    pub event: Option<String>,
}

impl TraceRecord {
    fn blank(t: f64, state: &[f64], layout: &TraceLayout) -> Self {
        TraceRecord {
            t,
            state: state.to_vec(),
            u: vec![f64::NAN; layout.n],
            alpha: f64::NAN,
            alpha_bar: f64::NAN,
            rho_alpha: f64::NAN,
            varrho: None,
            alpha_hat: None,
            x_tilde: None,
            e_alpha: f64::NAN,
            eps_alpha: f64::NAN,
            e_hat: vec![f64::NAN; layout.n * (layout.r - 1)],
            event: None,
        }
    }

    pub fn x1(&self, n: usize) -> &[f64] {
        &self.state[..n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub t: f64,
    pub kind: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationTrace {
    pub name: String,
    pub layout: TraceLayout,
    pub records: Vec<TraceRecord>,
    pub events: Vec<TraceEvent>,
    pub status: RunStatus,
}

impl SimulationTrace {
    pub fn empty(name: impl Into<String>, layout: TraceLayout) -> Self {
        SimulationTrace {
            name: name.into(),
            layout,
            records: Vec::new(),
            events: Vec::new(),
            status: RunStatus::Completed,
        }
    }

    pub fn is_aborted(&self) -> bool {
        self.status == RunStatus::Aborted
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn series(&self, f: impl Fn(&TraceRecord) -> f64) -> Vec<f64> {
        self.records.iter().map(f).collect()
    }

    pub fn max_abs_e_hat(&self) -> f64 {
        self.records
            .iter()
            .flat_map(|r| r.e_hat.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

enum StageError {
    Abort { kind: String, detail: String, record: Box<TraceRecord> },
    Fatal(Error),
}

impl From<Error> for StageError {
    fn from(e: Error) -> Self {
        StageError::Fatal(e)
    }
}

struct Stage {
    deriv: DVector<f64>,
    record: TraceRecord,
}

fn eval_stage(
    sc: &Scenario,
    layout: &TraceLayout,
    guard: &SingularityGuard,
    t: f64,
    y: &DVector<f64>,
) -> Result<Stage, StageError> {
    let pd = sc.plant.state_dim();
    let n = layout.n;
    let ys = y.as_slice();
    let x = &ys[..pd];
    let mut rec = TraceRecord::blank(t, x, layout);
    if ys.iter().any(|v| !v.is_finite()) {
        return Err(StageError::Abort {
            kind: "non_finite_state".into(),
            detail: "state contains NaN or infinity".into(),
            record: Box::new(rec),
        });
    }

    let (alpha, alpha_bar) = sc.cons.alpha_and_bar(t, &x[..n])?;
    rec.alpha = alpha;
    rec.alpha_bar = alpha_bar;

    let (rho, xt_dot) = match &sc.bound {
        BoundPolicy::Static(p) => (finite_time_bound(p, t).0, None),
        BoundPolicy::Adaptive(a) => {
            let xt = &ys[pd..];
            let ev = sc.cons.evaluate(t, xt)?;
            let dir = rhs_from_eval(&a.estimator, &ev);
            let ah_dot = ev.dalpha_dt + ev.grad.dot(&dir);
            let b = adaptive_bound(&a.nominal, a.mu, t, ev.alpha, ah_dot);
            rec.varrho = Some(b.varrho);
            rec.alpha_hat = Some(ev.alpha);
            rec.x_tilde = Some(xt.to_vec());
            (b.value, Some(dir))
        }
    };
    rec.rho_alpha = rho;
    rec.e_alpha = alpha - rho;
    if rec.e_alpha > 0.0 {
        rec.eps_alpha = (rec.e_alpha / sc.controller.upsilon).ln();
    }

    let nr = n * layout.r;
    let (u, diag) = match control_u(&sc.cons, &sc.controller, rho, t, &x[..nr]) {
        Ok(v) => v,
        Err(Error::Singularity { kind, .. }) => {
            return Err(StageError::Abort {
                kind: kind.tag().into(),
                detail: kind.to_string(),
                record: Box::new(rec),
            })
        }
        Err(e) => return Err(StageError::Fatal(e)),
    };
    rec.u = u.as_slice().to_vec();
    rec.eps_alpha = diag.eps_alpha;
    rec.e_hat = diag.e_hat.iter().flat_map(|v| v.iter().copied()).collect();
    if let Some(kind) = guard.check(&diag) {
        return Err(StageError::Abort {
            kind: kind.tag().into(),
            detail: kind.to_string(),
            record: Box::new(rec),
        });
    }

    let dx = plant_rhs(&sc.plant, t, x, u.as_slice())?;
    let deriv = match xt_dot {
        None => dx,
        Some(d) => {
            let mut out = DVector::zeros(y.len());
            out.rows_mut(0, pd).copy_from(&dx);
            out.rows_mut(pd, d.len()).copy_from(&d);
            out
        }
    };
    Ok(Stage { deriv, record: rec })
}

/// Runs one scenario to its horizon or to the first singularity.
///
/// A mid-run singularity is not an error: the trace ends with an event row and
/// `status == Aborted`.
pub fn run_closed_loop(sc: &Scenario) -> Result<SimulationTrace> {
    sc.validate()?;
    let layout = sc.layout();
    let n = layout.n;
    let alpha0 = sc.cons.alpha(0.0, &sc.x0[..n])?;
    let rho0 = sc.initial_bound()?;
    if !(rho0 < alpha0) {
        return Err(Error::InitialBoundViolation { rho0, alpha0 });
    }

    let mut y0 = sc.x0.clone();
    if let Some(xt) = sc.x_tilde0() {
        y0.extend(xt);
    }
    let mut y = DVector::from_vec(y0);
    let guard = SingularityGuard::default();
    let h = sc.integration.step;
    let steps = sc.integration.steps();
    let stride = sc.integration.record_stride;
    let mut trace = SimulationTrace::empty(sc.name.clone(), layout.clone());
    for k in 0..=steps {
        let t = k as f64 * h;
        let first = match eval_stage(sc, &layout, &guard, t, &y) {
            Ok(s) => s,
            Err(e) => return finish_abort(trace, e),
        };
        if k % stride == 0 || k == steps {
            trace.records.push(first.record);
        }
        if k == steps {
            break;
        }
        let k1 = first.deriv;
        let stage = |tt: f64, yy: DVector<f64>| eval_stage(sc, &layout, &guard, tt, &yy).map(|s| s.deriv);
        let k2 = match stage(t + 0.5 * h, &y + &k1 * (0.5 * h)) {
            Ok(v) => v,
            Err(e) => return finish_abort(trace, e),
        };
        let k3 = match stage(t + 0.5 * h, &y + &k2 * (0.5 * h)) {
            Ok(v) => v,
            Err(e) => return finish_abort(trace, e),
        };
        let k4 = match stage(t + h, &y + &k3 * h) {
            Ok(v) => v,
            Err(e) => return finish_abort(trace, e),
        };
        y = combine(&y, &k1, &k2, &k3, &k4, h);
    }
    Ok(trace)
}

/// Ends the trace with an event row on a singularity; other failures propagate.
fn finish_abort(mut trace: SimulationTrace, e: StageError) -> Result<SimulationTrace> {
    match e {
        StageError::Abort {
            kind,
            detail,
            mut record,
        } => {
            record.event = Some(kind.clone());
            trace.events.push(TraceEvent {
                t: record.t,
                kind,
                detail,
            });
            trace.records.push(*record);
            trace.status = RunStatus::Aborted;
            Ok(trace)
        }
        StageError::Fatal(e) => Err(e),
    }
}

/// `key = value` overrides applied to a scenario file before building.
pub type Patch = Vec<(String, String)>;

/// Independent runs of `base` under each patch, in parallel. Per-run failures
/// (including patch validation) are returned in place.
pub fn sweep(base: &ScenarioFile, patches: &[Patch]) -> Vec<Result<SimulationTrace>> {
    patches
        .par_iter()
        .map(|patch| {
            let file = base.with_patches(patch)?;
            let built = file.build()?;
            run_closed_loop(&built.scenario)
        })
        .collect()
}
