//! Time-varying bound functions and smooth switches.

use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::estimator::EstimatorParams;
use crate::expr::{Expr, Tape, Wrt};

/// Scalar function of time with its derivative.
pub trait TimeFunction: Debug + Send + Sync {
    fn value(&self, t: f64) -> f64;
    fn derivative(&self, t: f64) -> f64;
    fn value_and_derivative(&self, t: f64) -> (f64, f64) {
        (self.value(t), self.derivative(t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Constant(pub f64);

impl TimeFunction for Constant {
    fn value(&self, _t: f64) -> f64 {
        self.0
    }
    fn derivative(&self, _t: f64) -> f64 {
        0.0
    }
}

/// Time function given by an expression in `t` only.
#[derive(Clone, Debug)]
pub struct ExprTimeFunction {
    expr: Expr,
    /// Outputs: value, derivative.
    tape: Tape,
}

impl ExprTimeFunction {
    pub fn new(expr: Expr) -> Result<Self> {
        if expr.depends_on_state() {
            return Err(Error::Contract("bound expressions may depend on t only".into()));
        }
        let derivative = expr.derivative(Wrt::Time);
        Ok(ExprTimeFunction {
            tape: Tape::build(&[&expr, &derivative]),
            expr,
        })
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }
}

impl TimeFunction for ExprTimeFunction {
    fn value(&self, t: f64) -> f64 {
        self.tape.eval(t, &[])
    }
    fn derivative(&self, t: f64) -> f64 {
        self.value_and_derivative(t).1
    }
    fn value_and_derivative(&self, t: f64) -> (f64, f64) {
        let mut out = [0.0; 2];
        self.tape.eval_into(t, &[], &mut out);
        (out[0], out[1])
    }
}

/// Parameters of the appointed-time bound that rises from `rho0` to `rho_inf` at `t_final`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiniteTimeBoundParams {
    pub t_final: f64,
    pub beta: f64,
    pub rho0: f64,
    pub rho_inf: f64,
}

impl FiniteTimeBoundParams {
    pub fn new(t_final: f64, beta: f64, rho0: f64, rho_inf: f64) -> Result<Self> {
        let p = FiniteTimeBoundParams {
            t_final,
            beta,
            rho0,
            rho_inf,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0) {
            return Err(Error::validation("T", "must be > 0"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::validation("beta", "must lie in (0, 1)"));
        }
        if !(self.rho0 <= self.rho_inf) {
            return Err(Error::validation("rho0", "must not exceed rho_inf"));
        }
        Ok(())
    }
}

/// Value and derivative of the appointed-time bound.
pub fn finite_time_bound(p: &FiniteTimeBoundParams, t: f64) -> (f64, f64) {
    if t >= p.t_final {
        return (p.rho_inf, 0.0);
    }
    let q = 1.0 / (1.0 - p.beta);
    let s = (p.t_final - t) / p.t_final;
    let span = p.rho0 - p.rho_inf;
    let w = s.powf(q);
    // Weighted form so that t = 0 returns rho0 exactly.
    let value = w * p.rho0 + (1.0 - w) * p.rho_inf;
    let derivative = -q / p.t_final * s.powf(q - 1.0) * span;
    (value, derivative)
}

impl TimeFunction for FiniteTimeBoundParams {
    fn value(&self, t: f64) -> f64 {
        finite_time_bound(self, t).0
    }
    fn derivative(&self, t: f64) -> f64 {
        finite_time_bound(self, t).1
    }
}

/// Initial bound placed strictly below the initial consolidated value.
pub fn auto_rho0(alpha0: f64) -> f64 {
    alpha0.min(0.0) - (0.25 * alpha0.abs()).max(0.25)
}

/// Exponentially shrinking funnel for one intermediate error component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerfFunnelParams {
    pub theta0: f64,
    pub theta_inf: f64,
    pub l: f64,
}

impl PerfFunnelParams {
    pub fn new(theta0: f64, theta_inf: f64, l: f64) -> Result<Self> {
        if !(theta_inf > 0.0) {
            return Err(Error::validation("theta_inf", "must be > 0"));
        }
        if !(theta0 >= theta_inf) {
            return Err(Error::validation("theta0", "must be >= theta_inf"));
        }
        if !(l > 0.0) {
            return Err(Error::validation("decay", "must be > 0"));
        }
        Ok(PerfFunnelParams {
            theta0,
            theta_inf,
            l,
        })
    }
}

pub fn perf_funnel(p: &PerfFunnelParams, t: f64) -> (f64, f64) {
    let decay = (-p.l * t).exp();
    let span = p.theta0 - p.theta_inf;
    (span * decay + p.theta_inf, -p.l * span * decay)
}

/// Gate that is 1 below zero and fades to 0 at `mu_chi`.
pub fn chi_switch(z: f64, mu_chi: f64) -> f64 {
    if z < 0.0 {
        1.0
    } else if z <= mu_chi {
        let r = z / mu_chi;
        2.0 * r * r * r - 3.0 * r * r + 1.0
    } else {
        0.0
    }
}

pub fn chi_switch_derivative(z: f64, mu_chi: f64) -> f64 {
    if (0.0..=mu_chi).contains(&z) {
        let r = z / mu_chi;
        (6.0 * r * r - 6.0 * r) / mu_chi
    } else {
        0.0
    }
}

/// Switch that is 0 below zero and rises to 1 at `mu`.
pub fn iota_switch(phi: f64, mu: f64) -> f64 {
    if phi > mu {
        1.0
    } else if phi >= 0.0 {
        let r = phi / mu;
        -2.0 * r * r * r + 3.0 * r * r
    } else {
        0.0
    }
}

pub fn iota_switch_derivative(phi: f64, mu: f64) -> f64 {
    if (0.0..=mu).contains(&phi) {
        let r = phi / mu;
        (6.0 * r - 6.0 * r * r) / mu
    } else {
        0.0
    }
}

/// Adaptive-policy parameters: nominal bound, switching width and estimator tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveBound {
    pub nominal: FiniteTimeBoundParams,
    pub mu: f64,
    pub estimator: EstimatorParams,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BoundPolicy {
    Static(FiniteTimeBoundParams),
    Adaptive(AdaptiveBound),
}

impl BoundPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            BoundPolicy::Static(p) => p.validate(),
            BoundPolicy::Adaptive(a) => {
                a.nominal.validate()?;
                if !(a.mu > 0.0) {
                    return Err(Error::validation("mu", "must be > 0"));
                }
                a.estimator.validate()
            }
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, BoundPolicy::Adaptive(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveBoundValue {
    pub value: f64,
    pub derivative: f64,
    pub iota: f64,
    pub varrho: f64,
}

/// Lower bound that follows the nominal bound while the estimate clears it by `mu`
/// and otherwise trails the estimate by `mu`.
pub fn adaptive_bound(
    nominal: &FiniteTimeBoundParams,
    mu: f64,
    t: f64,
    alpha_hat: f64,
    alpha_hat_dot: f64,
) -> AdaptiveBoundValue {
    let (varrho, varrho_dot) = finite_time_bound(nominal, t);
    let phi = alpha_hat - varrho;
    let iota = iota_switch(phi, mu);
    let iota_dot = iota_switch_derivative(phi, mu) * (alpha_hat_dot - varrho_dot);
    let value = iota * varrho + (1.0 - iota) * (alpha_hat - mu);
    let derivative =
        iota_dot * (varrho - alpha_hat + mu) + iota * varrho_dot + (1.0 - iota) * alpha_hat_dot;
    AdaptiveBoundValue {
        value,
        derivative,
        iota,
        varrho,
    }
}
