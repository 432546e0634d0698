//! TOML scenario files.
//!
//! A file maps one-to-one onto [`ScenarioFile`]; [`ScenarioFile::build`] turns it
//! into a runnable [`Scenario`], resolving `"auto"` choices against the initial state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bounds::{adaptive_bound, auto_rho0, finite_time_bound, AdaptiveBound, BoundPolicy, FiniteTimeBoundParams};
use crate::catalog;
use crate::constraint::{ConstraintSet, ConstraintSpec, Consolidation};
use crate::controller::{resolve_funnels, ControllerConfig, FunnelSpec};
use crate::error::{Error, Result};
use crate::estimator::EstimatorParams;
use crate::expr::{self, Expr, Symbols};
use crate::oracle::GridSpec;
use crate::plant::{integrator_chain, robot_plant, Disturbance, RobotParams};
use crate::sim::{IntegrationSettings, Scenario};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NumOrExpr {
    Num(f64),
    Expr(String),
}

impl NumOrExpr {
    fn source(&self) -> String {
        match self {
            NumOrExpr::Num(v) => format!("{v:?}"),
            NumOrExpr::Expr(s) => s.clone(),
        }
    }
}

/// A number or the word `auto`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NumOrAuto {
    Num(f64),
    Word(String),
}

impl NumOrAuto {
    fn resolve(&self, field: &str) -> Result<Option<f64>> {
        match self {
            NumOrAuto::Num(v) => Ok(Some(*v)),
            NumOrAuto::Word(w) if w == "auto" => Ok(None),
            NumOrAuto::Word(w) => Err(Error::validation(field, format!("expected a number or \"auto\", got {w:?}"))),
        }
    }
}

/// One value for every intermediate funnel, or one row per block `i = 2..r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerFunnel<T> {
    All(T),
    Rows(Vec<Vec<T>>),
}

impl<T: Clone> PerFunnel<T> {
    fn expand(&self, field: &str, blocks: usize, n: usize) -> Result<Vec<Vec<T>>> {
        match self {
            PerFunnel::All(v) => Ok(vec![vec![v.clone(); n]; blocks]),
            PerFunnel::Rows(rows) => {
                if rows.len() != blocks || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::validation(field, format!("expected {blocks} rows of {n} values")));
                }
                Ok(rows.clone())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Robot,
    IntegratorChain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    Standard,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub model: PlantKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<DisturbanceKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintEntry {
    pub name: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<NumOrExpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<NumOrExpr>,
    /// Skips the load-time width check, for funnels whose bounds are meant to cross.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allow_crossing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsolidationSection {
    pub nu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Static,
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    pub policy: PolicyKind,
    #[serde(rename = "T")]
    pub t_final: f64,
    pub beta: f64,
    pub rho0: NumOrAuto,
    pub rho_inf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_chi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<Vec<f64>>,
    pub upsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<PerFunnel<NumOrAuto>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_inf: Option<PerFunnel<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<PerFunnel<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSection {
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_step() -> f64 {
    IntegrationSettings::default().step
}

fn default_horizon() -> f64 {
    IntegrationSettings::default().horizon
}

fn default_stride() -> usize {
    IntegrationSettings::default().record_stride
}

impl Default for IntegrationSection {
    fn default() -> Self {
        IntegrationSection {
            step: default_step(),
            horizon: default_horizon(),
            stride: default_stride(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    /// Blocks `x1..xr` concatenated.
    pub x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// Estimator start; defaults to `x1(0)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_tilde: Option<Vec<f64>>,
}

/// Box of interest for oracles and plots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub plant: PlantSection,
    /// Named functions of `t`, usable in constraint expressions and in each other.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, NumOrExpr>,
    #[serde(default)]
    pub constraints: Vec<ConstraintEntry>,
    pub consolidation: ConsolidationSection,
    pub bound: BoundSection,
    pub controller: ControllerSection,
    #[serde(default)]
    pub integration: IntegrationSection,
    pub initial: InitialSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionSection>,
}

/// A built scenario plus the values chosen for every `auto` entry.
#[derive(Clone, Debug)]
pub struct BuiltScenario {
    pub scenario: Scenario,
    pub resolved: BTreeMap<String, serde_json::Value>,
    pub region: Option<GridSpec>,
}

impl BuiltScenario {
    /// `mu` of an adaptive bound.
    pub fn mu(&self) -> Option<f64> {
        match &self.scenario.bound {
            BoundPolicy::Adaptive(a) => Some(a.mu),
            BoundPolicy::Static(_) => None,
        }
    }
}

const DEFAULT_GRID_RESOLUTION: usize = 201;
const FUNNEL_CHECK_SAMPLES: usize = 1000;
const FUNNEL_CHECK_EPS: f64 = 1e-6;

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

fn required<T: Copy>(v: Option<T>, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::validation(field, "missing"))
}

impl ScenarioFile {
    pub fn parse(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let (line, col) = line_col(src, span.start);
                    format!("line {line}, column {col}")
                }
                None => "unknown location".into(),
            };
            Error::Parse {
                location,
                message: e.message().trim().to_string(),
            }
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("serializing scenario: {e}")))
    }

    /// Copy with `section.key = value` overrides. Array elements are addressed by
    /// index (`initial.x.0`). Values are read as TOML, falling back to a plain string.
    pub fn with_patches(&self, patches: &[(String, String)]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Contract(e.to_string()))?;
        for (key, raw) in patches {
            let err = |message: String| Error::Patch {
                key: key.clone(),
                message,
            };
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            let segments: Vec<&str> = key.split('.').collect();
            let (last, path) = segments.split_last().ok_or_else(|| err("empty key".into()))?;
            let mut node = &mut root;
            for seg in path {
                node = match node {
                    toml::Value::Table(t) => t.get_mut(*seg).ok_or_else(|| err(format!("no section `{seg}`")))?,
                    toml::Value::Array(a) => {
                        let i: usize = seg.parse().map_err(|_| err(format!("`{seg}` is not an index")))?;
                        a.get_mut(i).ok_or_else(|| err(format!("index {i} out of range")))?
                    }
                    _ => return Err(err(format!("`{seg}` is not a section"))),
                };
            }
            match node {
                toml::Value::Table(t) => {
                    t.insert(last.to_string(), value);
                }
                toml::Value::Array(a) => {
                    let i: usize = last.parse().map_err(|_| err(format!("`{last}` is not an index")))?;
                    *a.get_mut(i).ok_or_else(|| err(format!("index {i} out of range")))? = value;
                }
                _ => return Err(err("target is not a section".into())),
            }
            // Validate each patch on its own so the error names the offending key.
            root.clone()
                .try_into::<ScenarioFile>()
                .map_err(|e| err(e.to_string().trim().to_string()))?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Contract(e.to_string()))
    }

    fn dims(&self) -> Result<(usize, usize)> {
        match self.plant.model {
            PlantKind::Robot => {
                if self.plant.n.is_some_and(|n| n != 2) || self.plant.r.is_some_and(|r| r != 2) {
                    return Err(Error::validation("plant", "the robot model has n = 2 and r = 2"));
                }
                Ok((2, 2))
            }
            PlantKind::IntegratorChain => {
                let n = required(self.plant.n, "plant.n")?;
                let r = required(self.plant.r, "plant.r")?;
                if n == 0 || r == 0 {
                    return Err(Error::validation("plant", "n and r must be >= 1"));
                }
                Ok((n, r))
            }
        }
    }

    fn resolve_params(&self) -> Result<HashMap<String, Expr>> {
        let mut deps = BTreeMap::new();
        for (name, v) in &self.params {
            if name == "t" || name == "pi" || (name.starts_with('x') && name[1..].parse::<usize>().is_ok()) {
                return Err(Error::validation(format!("params.{name}"), "reserved name"));
            }
            let ids = expr::identifiers(&v.source()).map_err(|e| Error::Parse {
                location: format!("params.{name}, column {}", e.column),
                message: e.message,
            })?;
            let ids: Vec<String> = ids.into_iter().filter(|i| self.params.contains_key(i)).collect();
            deps.insert(name.clone(), ids);
        }
        let mut syms = Symbols::default();
        let mut pending: Vec<&String> = deps.keys().collect();
        while !pending.is_empty() {
            let ready: Vec<&String> = pending
                .iter()
                .copied()
                .filter(|p| deps[*p].iter().all(|d| syms.params.contains_key(d)))
                .collect();
            if ready.is_empty() {
                return Err(Error::validation(
                    format!("params.{}", pending[0]),
                    "parameter definitions form a cycle",
                ));
            }
            for name in ready {
                let e = expr::parse(&self.params[name].source(), &syms).map_err(|e| Error::Parse {
                    location: format!("params.{name}, column {}", e.column),
                    message: e.message,
                })?;
                syms.params.insert(name.clone(), e);
            }
            pending.retain(|p| !syms.params.contains_key(*p));
        }
        Ok(syms.params)
    }

    pub fn build(&self) -> Result<BuiltScenario> {
        let (n, r) = self.dims()?;
        let params = self.resolve_params()?;
        let syms = Symbols { n_vars: n, params };
        let specs = self
            .constraints
            .iter()
            .map(|c| {
                let spec = ConstraintSpec::from_exprs(
                    &c.name,
                    &c.output,
                    c.lower.as_ref().map(NumOrExpr::source).as_deref(),
                    c.upper.as_ref().map(NumOrExpr::source).as_deref(),
                    &syms,
                )?;
                if !c.allow_crossing {
                    spec.check_width(self.integration.horizon, FUNNEL_CHECK_SAMPLES, FUNNEL_CHECK_EPS)
                        .map_err(|e| match e {
                            Error::Validation { message, .. } => {
                                Error::validation(format!("constraints.{}", c.name), message)
                            }
                            other => other,
                        })?;
                }
                Ok(spec)
            })
            .collect::<Result<Vec<_>>>()?;
        let set = ConstraintSet::from_unordered(n, specs)?;
        let nu = self.consolidation.nu;
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::validation("consolidation.nu", "must be a finite value > 0"));
        }
        let cons = Consolidation::new(set, nu)?;

        let (plant, x0) = match self.plant.model {
            PlantKind::Robot => {
                let d = RobotParams::default();
                let p = RobotParams {
                    m_r: self.plant.m_r.unwrap_or(d.m_r),
                    i_r: self.plant.i_r.unwrap_or(d.i_r),
                    d1: self.plant.d1.unwrap_or(d.d1),
                    d2: self.plant.d2.unwrap_or(d.d2),
                    l: self.plant.l.unwrap_or(d.l),
                    disturbance: match self.plant.disturbance {
                        Some(DisturbanceKind::None) => Disturbance::None,
                        _ => Disturbance::Standard,
                    },
                };
                p.validate()?;
                let mut x0 = self.initial.x.clone();
                x0.push(self.initial.theta.unwrap_or(0.0));
                (robot_plant(p), x0)
            }
            PlantKind::IntegratorChain => {
                if self.initial.theta.is_some() {
                    return Err(Error::validation("initial.theta", "only the robot model has a heading"));
                }
                (integrator_chain(n, r), self.initial.x.clone())
            }
        };
        if self.initial.x.len() != n * r {
            return Err(Error::validation(
                "initial.x",
                format!("expected {} values, got {}", n * r, self.initial.x.len()),
            ));
        }
        if let Some(xt) = &self.initial.x_tilde {
            if xt.len() != n {
                return Err(Error::validation("initial.x_tilde", format!("expected {n} values")));
            }
        }

        let mut resolved = BTreeMap::new();
        let b = &self.bound;
        let x1 = &x0[..n];
        let alpha0 = cons.alpha(0.0, x1)?;
        let rho0 = match b.rho0.resolve("bound.rho0")? {
            Some(v) => v,
            None => {
                let v = auto_rho0(alpha0).min(b.rho_inf);
                resolved.insert("bound.rho0".to_string(), json!(v));
                v
            }
        };
        let nominal = FiniteTimeBoundParams {
            t_final: b.t_final,
            beta: b.beta,
            rho0,
            rho_inf: b.rho_inf,
        };
        nominal.validate().map_err(|e| match e {
            Error::Validation { field, message } => Error::validation(format!("bound.{field}"), message),
            other => other,
        })?;
        let (bound, rho_alpha0) = match b.policy {
            PolicyKind::Static => {
                for (name, v) in [("mu", b.mu), ("k_alpha", b.k_alpha), ("eps_g", b.eps_g), ("mu_chi", b.mu_chi)] {
                    if v.is_some() {
                        return Err(Error::validation(format!("bound.{name}"), "only used by the adaptive policy"));
                    }
                }
                (BoundPolicy::Static(nominal), finite_time_bound(&nominal, 0.0).0)
            }
            PolicyKind::Adaptive => {
                let estimator = EstimatorParams {
                    k_alpha: required(b.k_alpha, "bound.k_alpha")?,
                    eps_g: required(b.eps_g, "bound.eps_g")?,
                    mu_chi: required(b.mu_chi, "bound.mu_chi")?,
                    x_tilde0: self.initial.x_tilde.clone(),
                };
                let mu = required(b.mu, "bound.mu")?;
                let xt = estimator.x_tilde0.clone().unwrap_or_else(|| x1.to_vec());
                let alpha_hat0 = cons.alpha(0.0, &xt)?;
                let a = AdaptiveBound { nominal, mu, estimator };
                let rho = adaptive_bound(&a.nominal, mu, 0.0, alpha_hat0, 0.0).value;
                let policy = BoundPolicy::Adaptive(a);
                policy.validate().map_err(|e| match e {
                    Error::Validation { field, message } => Error::validation(format!("bound.{field}"), message),
                    other => other,
                })?;
                (policy, rho)
            }
        };
        if !(rho_alpha0 < alpha0) {
            return Err(Error::InitialBoundViolation {
                rho0: rho_alpha0,
                alpha0,
            });
        }

        let c = &self.controller;
        let gains = c.gains.clone().ok_or_else(|| Error::validation("controller.gains", "missing"))?;
        if gains.len() != r {
            return Err(Error::validation(
                "controller.gains",
                format!("expected {r} gains, got {}", gains.len()),
            ));
        }
        let blocks = r - 1;
        let funnel_specs = if blocks == 0 {
            Vec::new()
        } else {
            let theta0 = c
                .theta0
                .clone()
                .unwrap_or(PerFunnel::All(NumOrAuto::Word("auto".into())))
                .expand("controller.theta0", blocks, n)?;
            let theta_inf = c
                .theta_inf
                .as_ref()
                .ok_or_else(|| Error::validation("controller.theta_inf", "missing"))?
                .expand("controller.theta_inf", blocks, n)?;
            let decay = c
                .decay
                .as_ref()
                .ok_or_else(|| Error::validation("controller.decay", "missing"))?
                .expand("controller.decay", blocks, n)?;
            let mut out = Vec::with_capacity(blocks);
            for i in 0..blocks {
                let mut row = Vec::with_capacity(n);
                for j in 0..n {
                    row.push(FunnelSpec {
                        theta0: theta0[i][j].resolve("controller.theta0")?,
                        theta_inf: theta_inf[i][j],
                        l: decay[i][j],
                    });
                }
                out.push(row);
            }
            out
        };
        let funnels = resolve_funnels(&cons, &gains, c.upsilon, &funnel_specs, rho_alpha0, 0.0, &x0)?;
        if funnel_specs.iter().flatten().any(|s| s.theta0.is_none()) {
            let chosen: Vec<Vec<f64>> = funnels.iter().map(|row| row.iter().map(|p| p.theta0).collect()).collect();
            resolved.insert("controller.theta0".to_string(), json!(chosen));
        }
        let controller = ControllerConfig::new(r, n, gains, c.upsilon, funnels)?;

        let integration = IntegrationSettings {
            step: self.integration.step,
            horizon: self.integration.horizon,
            record_stride: self.integration.stride,
        };
        let scenario = Scenario {
            name: self.name.clone(),
            plant,
            cons,
            bound,
            controller,
            integration,
            x0,
        };
        scenario.validate()?;

        let region = match &self.region {
            None => None,
            Some(reg) => {
                let g = GridSpec::new(
                    reg.lo.clone(),
                    reg.hi.clone(),
                    reg.resolution.unwrap_or(DEFAULT_GRID_RESOLUTION),
                )
                .map_err(|_| Error::validation("region", "needs lo < hi per dimension and resolution >= 2"))?;
                if g.dim() != n {
                    return Err(Error::validation("region", format!("expected {n} dimensions")));
                }
                Some(g)
            }
        };
        Ok(BuiltScenario {
            scenario,
            resolved,
            region,
        })
    }
}

/// Reads a scenario from a path, or from the built-in catalog with `builtin:<name>`.
pub fn load_scenario(source: &str) -> Result<ScenarioFile> {
    if let Some(name) = source.strip_prefix("builtin:") {
        let text = catalog::get(name).ok_or_else(|| {
            Error::Usage(format!(
                "unknown builtin `{name}`; available: {}",
                catalog::names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        return ScenarioFile::parse(text);
    }
    ScenarioFile::parse(&std::fs::read_to_string(Path::new(source))?)
}

/// Loads and builds in one call.
pub fn parse_scenario(source: &str) -> Result<BuiltScenario> {
    load_scenario(source)?.build()
}
