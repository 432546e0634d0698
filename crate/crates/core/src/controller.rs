//! Low-complexity backstepping law.
//!
//! Step 1 acts on the consolidated constraint: `e_alpha = alpha - rho_alpha`,
//! `eps_alpha = ln(e_alpha / upsilon)`, `s1 = -k1 grad(alpha) eps_alpha / e_alpha`.
//! Steps `i = 2..r` keep `e_i = x_i - s_{i-1}` inside shrinking funnels through
//! `eps = ln((1 + e_hat) / (1 - e_hat))`, `s_i = -k_i xi eps`. The input is `u = s_r`.
//! The law is static feedback: no derivative of any intermediate signal is formed.

use nalgebra::DVector;
use thiserror::Error;

use crate::bounds::{perf_funnel, PerfFunnelParams};
use crate::constraint::Consolidation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Error)]
pub enum Singularity {
    #[error("consolidating constraint lost (e_alpha = {e_alpha:e})")]
    ConstraintTransform { e_alpha: f64 },
    /// `block` is the backstepping step `i >= 2`, `channel` is 1-based.
    #[error("intermediate funnel left at block {block}, channel {channel} (e_hat = {e_hat})")]
    IntermediateFunnel { block: usize, channel: usize, e_hat: f64 },
}

impl Singularity {
    pub fn tag(&self) -> &'static str {
        match self {
            Singularity::ConstraintTransform { .. } => "constraint_transform_singularity",
            Singularity::IntermediateFunnel { .. } => "intermediate_funnel_singularity",
        }
    }
}

/// Normalized error left its funnel; `channel` is 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Error)]
#[error("normalized error {e_hat} at channel {channel} is outside (-1, 1)")]
pub struct FunnelExit {
    pub channel: usize,
    pub e_hat: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerConfig {
    pub r: usize,
    pub n: usize,
    pub gains: Vec<f64>,
    pub upsilon: f64,
    /// `funnels[i - 2][j]` bounds `e_{i,j}`.
    pub funnels: Vec<Vec<PerfFunnelParams>>,
}

impl ControllerConfig {
    pub fn new(
        r: usize,
        n: usize,
        gains: Vec<f64>,
        upsilon: f64,
        funnels: Vec<Vec<PerfFunnelParams>>,
    ) -> Result<Self> {
        let cfg = ControllerConfig {
            r,
            n,
            gains,
            upsilon,
            funnels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.n == 0 {
            return Err(Error::validation("controller", "order and dimension must be >= 1"));
        }
        if self.gains.len() != self.r {
            return Err(Error::validation(
                "controller.gains",
                format!("expected {} gains, got {}", self.r, self.gains.len()),
            ));
        }
        if let Some(k) = self.gains.iter().find(|k| !(**k > 0.0)) {
            return Err(Error::validation("controller.gains", format!("gain {k} is not > 0")));
        }
        if !(self.upsilon > 0.0) {
            return Err(Error::validation("controller.upsilon", "must be > 0"));
        }
        if self.funnels.len() != self.r - 1 || self.funnels.iter().any(|f| f.len() != self.n) {
            return Err(Error::validation(
                "controller.funnels",
                format!("expected {} x {} funnel parameter sets", self.r - 1, self.n),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerDiagnostics {
    pub e_alpha: f64,
    pub eps_alpha: f64,
    /// `e[k]` is `e_{k+2}`.
    pub e: Vec<DVector<f64>>,
    pub e_hat: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
    /// `s[k]` is `s_{k+1}`; the last entry is the input.
    pub s: Vec<DVector<f64>>,
}

impl ControllerDiagnostics {
    pub fn max_abs_e_hat(&self) -> f64 {
        self.e_hat
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn transform_alpha(e_alpha: f64, upsilon: f64) -> Result<f64, Singularity> {
    if !(e_alpha > 0.0) {
        return Err(Singularity::ConstraintTransform { e_alpha });
    }
    Ok((e_alpha / upsilon).ln())
}

fn s1_parts(
    cons: &Consolidation,
    k1: f64,
    upsilon: f64,
    rho_alpha: f64,
    t: f64,
    x1: &[f64],
) -> Result<(DVector<f64>, f64, f64)> {
    let ev = cons.evaluate(t, x1)?;
    let e_alpha = ev.alpha - rho_alpha;
    let eps_alpha = transform_alpha(e_alpha, upsilon).map_err(|kind| Error::Singularity { t, kind })?;
    Ok((ev.grad * (-k1 * eps_alpha / e_alpha), e_alpha, eps_alpha))
}

/// First intermediate control: gradient ascent on `alpha` scaled by the barrier.
pub fn s1(
    cons: &Consolidation,
    cfg: &ControllerConfig,
    rho_alpha: f64,
    t: f64,
    x1: &[f64],
) -> Result<DVector<f64>> {
    Ok(s1_parts(cons, cfg.gains[0], cfg.upsilon, rho_alpha, t, x1)?.0)
}

pub fn intermediate_error(x_i: &[f64], s_prev: &DVector<f64>) -> Result<DVector<f64>> {
    if x_i.len() != s_prev.len() {
        return Err(Error::dim("intermediate error", s_prev.len(), x_i.len()));
    }
    Ok(DVector::from_iterator(
        x_i.len(),
        x_i.iter().zip(s_prev.iter()).map(|(a, b)| a - b),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub e_hat: DVector<f64>,
    pub eps: DVector<f64>,
    pub xi: DVector<f64>,
}

/// Componentwise `e_hat = e / theta`, its log transform and the transform's slope.
pub fn normalize_and_transform(e: &DVector<f64>, theta: &[(f64, f64)]) -> Result<Normalized, FunnelExit> {
    let n = e.len();
    let mut e_hat = DVector::zeros(n);
    let mut eps = DVector::zeros(n);
    let mut xi = DVector::zeros(n);
    for j in 0..n {
        let th = theta[j].0;
        let eh = e[j] / th;
        if !(eh.abs() < 1.0) {
            return Err(FunnelExit {
                channel: j + 1,
                e_hat: eh,
            });
        }
        e_hat[j] = eh;
        eps[j] = ((1.0 + eh) / (1.0 - eh)).ln();
        xi[j] = 2.0 / (th * (1.0 - eh * eh));
    }
    Ok(Normalized { e_hat, eps, xi })
}

pub fn s_i(k_i: f64, xi: &DVector<f64>, eps: &DVector<f64>) -> DVector<f64> {
    xi.component_mul(eps) * -k_i
}

/// Evaluates `s_1, ..., s_r` at `(t, x)` and returns `u = s_r` with diagnostics.
/// `x` stacks `x_1, ..., x_r`.
pub fn control_u(
    cons: &Consolidation,
    cfg: &ControllerConfig,
    rho_alpha: f64,
    t: f64,
    x: &[f64],
) -> Result<(DVector<f64>, ControllerDiagnostics)> {
    let n = cfg.n;
    if x.len() != n * cfg.r {
        return Err(Error::dim("controller state", n * cfg.r, x.len()));
    }
    let (s_first, e_alpha, eps_alpha) = s1_parts(cons, cfg.gains[0], cfg.upsilon, rho_alpha, t, &x[..n])?;
    let mut diag = ControllerDiagnostics {
        e_alpha,
        eps_alpha,
        e: Vec::with_capacity(cfg.r - 1),
        e_hat: Vec::with_capacity(cfg.r - 1),
        xi: Vec::with_capacity(cfg.r - 1),
        s: vec![s_first],
    };
    for i in 2..=cfg.r {
        let xi_block = &x[(i - 1) * n..i * n];
        let e = intermediate_error(xi_block, diag.s.last().unwrap())?;
        let theta: Vec<(f64, f64)> = cfg.funnels[i - 2].iter().map(|p| perf_funnel(p, t)).collect();
        let norm = normalize_and_transform(&e, &theta).map_err(|f| Error::Singularity {
            t,
            kind: Singularity::IntermediateFunnel {
                block: i,
                channel: f.channel,
                e_hat: f.e_hat,
            },
        })?;
        diag.s.push(s_i(cfg.gains[i - 1], &norm.xi, &norm.eps));
        diag.e.push(e);
        diag.e_hat.push(norm.e_hat);
        diag.xi.push(norm.xi);
    }
    Ok((diag.s.last().unwrap().clone(), diag))
}

/// Margins inside which a discretized run is considered to have lost a guarantee.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingularityGuard {
    pub e_alpha_min: f64,
    pub e_hat_max: f64,
}

impl Default for SingularityGuard {
    fn default() -> Self {
        SingularityGuard {
            e_alpha_min: 1e-9,
            e_hat_max: 1.0 - 1e-9,
        }
    }
}

impl SingularityGuard {
    pub fn check(&self, d: &ControllerDiagnostics) -> Option<Singularity> {
        if !(d.e_alpha > self.e_alpha_min) {
            return Some(Singularity::ConstraintTransform { e_alpha: d.e_alpha });
        }
        for (k, eh) in d.e_hat.iter().enumerate() {
            for (j, v) in eh.iter().enumerate() {
                if !(v.abs() < self.e_hat_max) {
                    return Some(Singularity::IntermediateFunnel {
                        block: k + 2,
                        channel: j + 1,
                        e_hat: *v,
                    });
                }
            }
        }
        None
    }
}

/// Funnel parameters as written by the user; `theta0 = None` asks for automatic selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FunnelSpec {
    pub theta0: Option<f64>,
    pub theta_inf: f64,
    pub l: f64,
}

/// Automatic initial funnel width: `1.5 |e(0)| + 0.1`, never below `theta_inf`.
pub fn auto_theta0(e0: f64, theta_inf: f64) -> f64 {
    (1.5 * e0.abs() + 0.1).max(theta_inf)
}

/// Resolves every funnel block in order, since `e_i(0)` depends on `s_{i-1}(0)`,
/// which in turn depends on the funnels of earlier blocks.
pub fn resolve_funnels(
    cons: &Consolidation,
    gains: &[f64],
    upsilon: f64,
    specs: &[Vec<FunnelSpec>],
    rho_alpha0: f64,
    t0: f64,
    x0: &[f64],
) -> Result<Vec<Vec<PerfFunnelParams>>> {
    let n = cons.n();
    let r = specs.len() + 1;
    if gains.len() != r {
        return Err(Error::validation(
            "controller.gains",
            format!("expected {r} gains, got {}", gains.len()),
        ));
    }
    if x0.len() < n * r {
        return Err(Error::dim("initial state", n * r, x0.len()));
    }
    let (mut s_prev, _, _) = s1_parts(cons, gains[0], upsilon, rho_alpha0, t0, &x0[..n])?;
    let mut out = Vec::with_capacity(r - 1);
    for (k, block) in specs.iter().enumerate() {
        let i = k + 2;
        if block.len() != n {
            return Err(Error::validation(
                "controller.funnels",
                format!("block {i} needs {n} entries, got {}", block.len()),
            ));
        }
        let e = intermediate_error(&x0[(i - 1) * n..i * n], &s_prev)?;
        let mut params = Vec::with_capacity(n);
        for (j, spec) in block.iter().enumerate() {
            let theta0 = match spec.theta0 {
                Some(v) => {
                    if !(v > e[j].abs()) {
                        return Err(Error::validation(
                            "controller.theta0",
                            format!("block {i}, channel {}: {v} does not exceed |e(0)| = {}", j + 1, e[j].abs()),
                        ));
                    }
                    v
                }
                None => auto_theta0(e[j], spec.theta_inf),
            };
            params.push(PerfFunnelParams::new(theta0, spec.theta_inf, spec.l)?);
        }
        let theta: Vec<(f64, f64)> = params.iter().map(|p| perf_funnel(p, t0)).collect();
        let norm = normalize_and_transform(&e, &theta).map_err(|f| Error::Singularity {
            t: t0,
            kind: Singularity::IntermediateFunnel {
                block: i,
                channel: f.channel,
                e_hat: f.e_hat,
            },
        })?;
        s_prev = s_i(gains[i - 1], &norm.xi, &norm.eps);
        out.push(params);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::Constant;
    use crate::constraint::tests::{example1, syms};
    use crate::constraint::{ConstraintSet, ConstraintSpec, ExprChannel};
    use approx::assert_relative_eq;

    fn lbo_1d() -> Consolidation {
        let ch = ExprChannel::parse("h", "x1", &syms(1)).unwrap();
        Consolidation::new(
            ConstraintSet::new(1, vec![ConstraintSpec::lower(ch, Constant(0.0))]).unwrap(),
            10.0,
        )
        .unwrap()
    }

    fn cfg(r: usize, n: usize) -> ControllerConfig {
        let f = PerfFunnelParams::new(2.0, 0.1, 1.0).unwrap();
        ControllerConfig::new(r, n, vec![1.0; r], 8.0, vec![vec![f; n]; r - 1]).unwrap()
    }

    #[test]
    fn transform_alpha_examples() {
        assert_eq!(transform_alpha(8.0, 8.0).unwrap(), 0.0);
        assert_relative_eq!(transform_alpha(8.0 * std::f64::consts::E, 8.0).unwrap(), 1.0);
        let v = transform_alpha(1e-12, 8.0).unwrap();
        assert_relative_eq!(v, (1e-12f64 / 8.0).ln());
        assert!(v < -29.0 && v > -30.0);
        assert!(matches!(
            transform_alpha(0.0, 8.0),
            Err(Singularity::ConstraintTransform { .. })
        ));
    }

    #[test]
    fn s1_examples() {
        let c = lbo_1d();
        let s = s1(&c, &cfg(1, 1), 0.0, 0.0, &[1.0]).unwrap();
        assert_relative_eq!(s[0], 8f64.ln(), epsilon = 1e-12);
        // e_alpha = upsilon makes the barrier vanish.
        let s = s1(&c, &cfg(1, 1), -7.0, 0.0, &[1.0]).unwrap();
        assert_eq!(s[0], 0.0);
        let ch = ExprChannel::parse("h", "x1", &syms(1)).unwrap();
        let f = Consolidation::new(
            ConstraintSet::new(1, vec![ConstraintSpec::funnel(ch, Constant(-2.0), Constant(2.0))]).unwrap(),
            10.0,
        )
        .unwrap();
        assert_eq!(s1(&f, &cfg(1, 1), 0.0, 0.0, &[0.0]).unwrap()[0], 0.0);
        assert!(matches!(
            s1(&c, &cfg(1, 1), 2.0, 3.5, &[1.0]),
            Err(Error::Singularity { t, kind: Singularity::ConstraintTransform { .. } }) if t == 3.5
        ));
    }

    #[test]
    fn intermediate_error_examples() {
        let s = DVector::from_vec(vec![0.5, -1.0]);
        assert_eq!(intermediate_error(&[1.0, 2.0], &s).unwrap().as_slice(), &[0.5, 3.0]);
        assert_eq!(intermediate_error(&[0.5, -1.0], &s).unwrap().as_slice(), &[0.0, 0.0]);
        assert!(intermediate_error(&[1.0], &s).is_err());
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_and_transform(&DVector::from_vec(vec![0.0, 0.5, -0.5]), &[(2.0, 0.0), (1.0, 0.0), (1.0, 0.0)]).unwrap();
        assert_eq!(n.eps[0], 0.0);
        assert_eq!(n.xi[0], 1.0);
        assert_relative_eq!(n.eps[1], 3f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(n.xi[1], 8.0 / 3.0, epsilon = 1e-15);
        assert_eq!(n.eps[2], -n.eps[1]);
        let err = normalize_and_transform(&DVector::from_vec(vec![0.1, 1.0]), &[(1.0, 0.0), (1.0, 0.0)]).unwrap_err();
        assert_eq!(err.channel, 2);
    }

    #[test]
    fn s_i_examples() {
        let n = normalize_and_transform(&DVector::from_vec(vec![0.5, -0.2]), &[(1.0, 0.0), (1.0, 0.0)]).unwrap();
        let s = s_i(1.0, &n.xi, &n.eps);
        assert_relative_eq!(s[0], -(8.0 / 3.0) * 3f64.ln(), epsilon = 1e-14);
        assert!(s[0] < 0.0 && s[1] > 0.0);
        assert_eq!(s_i(2.0, &n.xi, &DVector::zeros(2)).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn control_u_degenerate_orders() {
        let c = Consolidation::new(example1(), 10.0).unwrap();
        let x1 = [0.3, -0.4];
        let (u, d) = control_u(&c, &cfg(1, 2), -1.0, 0.0, &x1).unwrap();
        assert_eq!(u, s1(&c, &cfg(1, 2), -1.0, 0.0, &x1).unwrap());
        assert!(d.e_hat.is_empty());

        let s = s1(&c, &cfg(2, 2), -1.0, 0.0, &x1).unwrap();
        let x = [x1[0], x1[1], s[0], s[1]];
        let (u, d) = control_u(&c, &cfg(2, 2), -1.0, 0.0, &x).unwrap();
        assert_eq!(u.as_slice(), &[0.0, 0.0]);
        assert_eq!(d.e[0].as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn control_u_reports_funnel_exit() {
        let c = Consolidation::new(example1(), 10.0).unwrap();
        let r = control_u(&c, &cfg(2, 2), -1.0, 1.0, &[0.3, -0.4, 50.0, 0.0]);
        assert!(matches!(
            r,
            Err(Error::Singularity { kind: Singularity::IntermediateFunnel { block: 2, channel: 1, .. }, .. })
        ));
    }

    #[test]
    fn control_u_is_pure() {
        let c = Consolidation::new(example1(), 10.0).unwrap();
        let s = s1(&c, &cfg(2, 2), -1.0, 0.7, &[0.3, -0.4]).unwrap();
        let x = [0.3, -0.4, s[0] + 0.05, s[1] - 0.02];
        let a = control_u(&c, &cfg(2, 2), -1.0, 0.7, &x).unwrap();
        let b = control_u(&c, &cfg(2, 2), -1.0, 0.7, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn s1_is_negative_gradient_of_barrier_energy() {
        let c = Consolidation::new(example1(), 10.0).unwrap();
        let (t, rho) = (0.0, -1.5);
        let v1 = |x: &[f64]| 0.5 * ((c.alpha(t, x).unwrap() - rho) / 8.0).ln().powi(2);
        let h = 1e-6;
        for x in [[0.3, -0.4], [1.2, 0.9], [-1.0, 1.5]] {
            let s = s1(&c, &cfg(1, 2), rho, t, &x).unwrap();
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = -(v1(&xp) - v1(&xm)) / (2.0 * h);
                assert!((s[i] - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{x:?} {i}: {} vs {fd}", s[i]);
            }
        }
    }

    #[test]
    fn s_i_is_negative_gradient_of_transformed_energy() {
        let theta = [(1.3, 0.0), (0.7, 0.0)];
        let v = |e: &[f64]| {
            let n = normalize_and_transform(&DVector::from_column_slice(e), &theta).unwrap();
            0.5 * n.eps.norm_squared()
        };
        let e = [0.4, -0.5];
        let n = normalize_and_transform(&DVector::from_column_slice(&e), &theta).unwrap();
        let s = s_i(1.7, &n.xi, &n.eps);
        let h = 1e-6;
        for j in 0..2 {
            let mut ep = e;
            let mut em = e;
            ep[j] += h;
            em[j] -= h;
            let fd = -1.7 * (v(&ep) - v(&em)) / (2.0 * h);
            assert!((s[j] - fd).abs() <= 1e-4 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn barrier_blows_up_as_margin_vanishes() {
        let c = lbo_1d();
        let x = [1.0];
        let alpha = c.alpha(0.0, &x).unwrap();
        let mut prev = 0.0;
        for k in 1..40 {
            let e_alpha = 8.0 * 2f64.powi(-k);
            let s = s1(&c, &cfg(1, 1), alpha - e_alpha, 0.0, &x).unwrap().norm();
            assert!(s > prev, "k={k}");
            prev = s;
        }
    }

    #[test]
    fn guard_flags_margins() {
        let g = SingularityGuard::default();
        let mut d = ControllerDiagnostics {
            e_alpha: 1e-10,
            eps_alpha: 0.0,
            e: vec![],
            e_hat: vec![DVector::from_vec(vec![0.2])],
            xi: vec![],
            s: vec![],
        };
        assert!(matches!(g.check(&d), Some(Singularity::ConstraintTransform { .. })));
        d.e_alpha = 1.0;
        assert_eq!(g.check(&d), None);
        d.e_hat[0][0] = -(1.0 - 1e-10);
        assert!(matches!(g.check(&d), Some(Singularity::IntermediateFunnel { block: 2, channel: 1, .. })));
    }

    #[test]
    fn auto_theta_contains_initial_errors() {
        let c = Consolidation::new(example1(), 10.0).unwrap();
        let spec = FunnelSpec {
            theta0: None,
            theta_inf: 0.1,
            l: 1.0,
        };
        let x0 = [0.3, -0.4, 2.0, -3.0, 0.5, 0.5];
        let f = resolve_funnels(&c, &[1.0, 1.0, 1.0], 8.0, &[vec![spec; 2], vec![spec; 2]], -1.0, 0.0, &x0).unwrap();
        let cfg = ControllerConfig::new(3, 2, vec![1.0; 3], 8.0, f.clone()).unwrap();
        let (_, d) = control_u(&c, &cfg, -1.0, 0.0, &x0).unwrap();
        for (k, e) in d.e.iter().enumerate() {
            for j in 0..2 {
                assert_relative_eq!(f[k][j].theta0, 1.5 * e[j].abs() + 0.1, epsilon = 1e-12);
            }
        }
        let tight = FunnelSpec {
            theta0: Some(0.01),
            ..spec
        };
        assert!(resolve_funnels(&c, &[1.0, 1.0], 8.0, &[vec![tight; 2]], -1.0, 0.0, &x0[..4]).is_err());
    }
}
