//! Continuous-time tracking of the maximizer of `alpha(t, .)`.
//!
//! `x_tilde' = k_alpha grad - grad / (|grad|^2 + eps_g chi(|grad|)) * dalpha_dt`.
//! The first term climbs, the second cancels the explicit drift of `alpha` in time.
//! The estimate `alpha_hat = alpha(t, x_tilde)` can only approach the true maximum
//! from below.

use nalgebra::DVector;

use crate::bounds::chi_switch;
use crate::constraint::{AlphaEval, Consolidation};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorParams {
    pub k_alpha: f64,
    pub eps_g: f64,
    pub mu_chi: f64,
    /// Initial optimizer guess; `None` starts from `x1(0)`.
    pub x_tilde0: Option<Vec<f64>>,
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k_alpha", self.k_alpha),
            ("eps_g", self.eps_g),
            ("mu_chi", self.mu_chi),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(name, "must be a finite value > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    pub x_tilde: DVector<f64>,
    pub alpha_hat: f64,
}

impl EstimatorState {
    pub fn new(cons: &Consolidation, t: f64, x_tilde: DVector<f64>) -> Result<Self> {
        let alpha_hat = cons.alpha(t, x_tilde.as_slice())?;
        Ok(EstimatorState { x_tilde, alpha_hat })
    }
}

/// Flow direction from an already evaluated point.
pub fn rhs_from_eval(p: &EstimatorParams, ev: &AlphaEval) -> DVector<f64> {
    let g2 = ev.grad.norm_squared();
    let gate = chi_switch(g2.sqrt(), p.mu_chi);
    let correction = ev.dalpha_dt / (g2 + p.eps_g * gate);
    &ev.grad * (p.k_alpha - correction)
}

pub fn estimator_rhs(
    cons: &Consolidation,
    p: &EstimatorParams,
    t: f64,
    x_tilde: &[f64],
) -> Result<DVector<f64>> {
    Ok(rhs_from_eval(p, &cons.evaluate(t, x_tilde)?))
}

pub fn estimator_output(cons: &Consolidation, t: f64, state: &EstimatorState) -> Result<f64> {
    cons.alpha(t, state.x_tilde.as_slice())
}

/// Total time derivative of `alpha_hat` along the flow.
pub fn estimator_output_dot(
    cons: &Consolidation,
    p: &EstimatorParams,
    t: f64,
    state: &EstimatorState,
) -> Result<f64> {
    let ev = cons.evaluate(t, state.x_tilde.as_slice())?;
    Ok(output_dot_from_eval(p, &ev))
}

pub fn output_dot_from_eval(p: &EstimatorParams, ev: &AlphaEval) -> f64 {
    ev.dalpha_dt + ev.grad.dot(&rhs_from_eval(p, ev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::{Constant, ExprTimeFunction};
    use crate::constraint::tests::{example1, syms};
    use crate::constraint::{ConstraintSet, ConstraintSpec, ExprChannel};
    use crate::expr;
    use crate::sim::rk4_step;
    use approx::assert_relative_eq;

    fn params(k: f64) -> EstimatorParams {
        EstimatorParams {
            k_alpha: k,
            eps_g: 1.0,
            mu_chi: 0.1,
            x_tilde0: None,
        }
    }

    fn single(kind: &str, bound: &str) -> Consolidation {
        let ch = ExprChannel::parse("h", "x1", &syms(1)).unwrap();
        let b = ExprTimeFunction::new(expr::parse(bound, &syms(0)).unwrap()).unwrap();
        let spec = if kind == "lower" {
            ConstraintSpec::lower(ch, b)
        } else {
            ConstraintSpec::upper(ch, b)
        };
        Consolidation::new(ConstraintSet::new(1, vec![spec]).unwrap(), 10.0).unwrap()
    }

    fn moving_funnel() -> Consolidation {
        let ch = ExprChannel::parse("h", "x1", &syms(1)).unwrap();
        let lo = ExprTimeFunction::new(expr::parse("sin(t) - 1", &syms(0)).unwrap()).unwrap();
        let hi = ExprTimeFunction::new(expr::parse("sin(t) + 1", &syms(0)).unwrap()).unwrap();
        Consolidation::new(
            ConstraintSet::new(1, vec![ConstraintSpec::funnel(ch, lo, hi)]).unwrap(),
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn stationary_at_symmetric_center() {
        let ch = ExprChannel::parse("h", "x1", &syms(1)).unwrap();
        let c = Consolidation::new(
            ConstraintSet::new(1, vec![ConstraintSpec::funnel(ch, Constant(-2.0), Constant(2.0))]).unwrap(),
            10.0,
        )
        .unwrap();
        assert_eq!(estimator_rhs(&c, &params(2.0), 0.0, &[0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn pure_ascent_on_static_set() {
        let c = Consolidation::new(example1(), 10.0).unwrap();
        let x = [0.4, -1.2];
        let g = c.grad_alpha(0.0, &x).unwrap();
        let r = estimator_rhs(&c, &params(2.0), 0.0, &x).unwrap();
        assert_relative_eq!((r - g * 2.0).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn singleton_upper_bound_hand_value() {
        let c = single("upper", "2 + sin(t)");
        let p = EstimatorParams {
            k_alpha: 2.0,
            eps_g: 1.0,
            mu_chi: 0.5,
            x_tilde0: None,
        };
        assert_relative_eq!(estimator_rhs(&c, &p, 0.0, &[0.3]).unwrap()[0], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn output_is_alpha_at_estimate() {
        let c = single("lower", "0.5*t");
        let s = EstimatorState::new(&c, 2.0, DVector::from_vec(vec![3.0])).unwrap();
        assert_eq!(estimator_output(&c, 2.0, &s).unwrap(), 3.0 - 1.0);
        assert_eq!(s.alpha_hat, 2.0);
    }

    #[test]
    fn output_dot_examples() {
        let ch = ExprChannel::parse("h", "x1", &syms(1)).unwrap();
        let c = Consolidation::new(
            ConstraintSet::new(1, vec![ConstraintSpec::funnel(ch, Constant(-1.0), Constant(1.0))]).unwrap(),
            10.0,
        )
        .unwrap();
        let s = EstimatorState::new(&c, 0.0, DVector::from_vec(vec![0.0])).unwrap();
        assert_eq!(estimator_output_dot(&c, &params(2.0), 0.0, &s).unwrap(), 0.0);

        let c = Consolidation::new(example1(), 10.0).unwrap();
        let s = EstimatorState::new(&c, 0.0, DVector::from_vec(vec![1.5, 2.0])).unwrap();
        let g = c.grad_alpha(0.0, s.x_tilde.as_slice()).unwrap();
        let d = estimator_output_dot(&c, &params(2.0), 0.0, &s).unwrap();
        assert_relative_eq!(d, 2.0 * g.norm_squared(), max_relative = 1e-14);
        assert!(d >= 0.0);
    }

    #[test]
    fn output_dot_matches_fd_along_flow() {
        let c = moving_funnel();
        let p = params(2.0);
        let h = 1e-3;
        let mut t = 0.0;
        let mut y = DVector::from_vec(vec![0.7]);
        let mut hist = Vec::new();
        for _ in 0..3000 {
            hist.push((t, y.clone()));
            y = rk4_step(|tt, yy: &DVector<f64>| estimator_rhs(&c, &p, tt, yy.as_slice()).unwrap(), t, &y, h);
            t += h;
        }
        for k in [500usize, 1200, 2500] {
            let (tk, ref xk) = hist[k];
            let s = EstimatorState::new(&c, tk, xk.clone()).unwrap();
            let d = estimator_output_dot(&c, &p, tk, &s).unwrap();
            let ap = c.alpha(hist[k + 1].0, hist[k + 1].1.as_slice()).unwrap();
            let am = c.alpha(hist[k - 1].0, hist[k - 1].1.as_slice()).unwrap();
            let fd = (ap - am) / (2.0 * h);
            assert!((d - fd).abs() <= 1e-3 * fd.abs().max(1.0), "k={k}: {d} vs {fd}");
        }
    }

    #[test]
    fn ascent_is_monotone_on_static_sets() {
        let c = Consolidation::new(example1(), 10.0).unwrap();
        let p = params(2.0);
        let mut y = DVector::from_vec(vec![-1.7, 3.1]);
        let mut prev = c.alpha(0.0, y.as_slice()).unwrap();
        for k in 0..5000 {
            let t = k as f64 * 1e-3;
            y = rk4_step(|tt, yy: &DVector<f64>| estimator_rhs(&c, &p, tt, yy.as_slice()).unwrap(), t, &y, 1e-3);
            let a = c.alpha(0.0, y.as_slice()).unwrap();
            assert!(a >= prev - 1e-15);
            prev = a;
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = params(2.0);
        p.eps_g = 0.0;
        assert!(p.validate().is_err());
    }
}
