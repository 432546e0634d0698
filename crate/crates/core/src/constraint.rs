//! Constraint representation, the min-distance metric and its log-sum-exp consolidation.
//!
//! A set of `m` output constraints with `p` funnels maps to the vector
//! `psi in R^(m+p)`: every funnel contributes `(h - lower, upper - h)`, lower-bounded
//! channels contribute `h - lower`, upper-bounded channels `upper - h`, in that order.
//! The consolidated value is `alpha = -(1/nu) ln sum exp(-nu psi_i)`, which satisfies
//! `alpha <= min psi <= alpha + ln(m+p)/nu`.
//!
//! Gradient-based control relies on every critical point of `alpha(t, .)` being a
//! global maximizer. That condition is assumed, not checked; see
//! [`crate::oracle::critical_point_scan`] for a sampled detector.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use smallvec::SmallVec;

use crate::bounds::{ExprTimeFunction, TimeFunction};
use crate::error::{Error, Result};
use crate::expr::{self, Expr, ExprError, Symbols, Tape, Wrt};

/// Where a channel's derivatives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivativeSource {
    Analytic,
    /// Central differences; for cross-checks only.
    FiniteDifference,
}

/// Scalar output `h(t, x1)` with first and second derivatives.
pub trait OutputChannel: Debug + Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn value(&self, t: f64, x: &[f64]) -> f64;
    fn gradient(&self, t: f64, x: &[f64]) -> DVector<f64>;
    fn time_partial(&self, t: f64, x: &[f64]) -> f64;
    fn hessian(&self, t: f64, x: &[f64]) -> DMatrix<f64>;
    /// Value and time partial, with the gradient written into `grad`.
    fn first_order(&self, t: f64, x: &[f64], grad: &mut [f64]) -> (f64, f64) {
        grad.copy_from_slice(self.gradient(t, x).as_slice());
        (self.value(t, x), self.time_partial(t, x))
    }
    fn derivative_source(&self) -> DerivativeSource {
        DerivativeSource::Analytic
    }
}

/// Channel defined by an expression, differentiated symbolically.
#[derive(Clone, Debug)]
pub struct ExprChannel {
    name: String,
    dim: usize,
    expr: Expr,
    value: Tape,
    /// Outputs: value, gradient, time partial.
    first: Tape,
    /// Outputs: row-major upper triangle of the Hessian.
    hess: Tape,
}

impl ExprChannel {
    pub fn new(name: impl Into<String>, expr: Expr, dim: usize) -> Self {
        let partials: Vec<Expr> = (0..dim).map(|i| expr.derivative(Wrt::Var(i))).collect();
        let dt = expr.derivative(Wrt::Time);
        let mut first: Vec<&Expr> = vec![&expr];
        first.extend(partials.iter());
        first.push(&dt);
        let first = Tape::build(&first);
        let mut second = Vec::with_capacity(dim * (dim + 1) / 2);
        for (i, d) in partials.iter().enumerate() {
            for j in i..dim {
                second.push(d.derivative(Wrt::Var(j)));
            }
        }
        let hess = Tape::build(&second.iter().collect::<Vec<_>>());
        ExprChannel {
            name: name.into(),
            dim,
            value: expr.compile(),
            first,
            hess,
            expr,
        }
    }

    pub fn parse(name: impl Into<String>, src: &str, syms: &Symbols) -> Result<Self, ExprError> {
        Ok(Self::new(name, expr::parse(src, syms)?, syms.n_vars))
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }
}

impl OutputChannel for ExprChannel {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.value.eval(t, x)
    }
    fn gradient(&self, t: f64, x: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim);
        self.first_order(t, x, g.as_mut_slice());
        g
    }
    fn time_partial(&self, t: f64, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim];
        self.first_order(t, x, &mut g).1
    }
    fn first_order(&self, t: f64, x: &[f64], grad: &mut [f64]) -> (f64, f64) {
        let mut out: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, self.dim + 2);
        self.first.eval_into(t, x, &mut out);
        grad.copy_from_slice(&out[1..=self.dim]);
        (out[0], out[self.dim + 1])
    }
    fn hessian(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim;
        let mut vals = vec![0.0; self.hess.outputs()];
        self.hess.eval_into(t, x, &mut vals);
        let mut h = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                h[(i, j)] = vals[k];
                h[(j, i)] = vals[k];
                k += 1;
            }
        }
        h
    }
}

type ScalarFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// Channel known only by its values; derivatives by central differences.
#[derive(Clone)]
pub struct FdChannel {
    name: String,
    dim: usize,
    f: Arc<ScalarFn>,
}

impl Debug for FdChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FdChannel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish()
    }
}

impl FdChannel {
    pub const STEP: f64 = 1e-6;
    /// Second differences use a wider step to keep cancellation error small.
    pub const HESSIAN_STEP: f64 = 1e-4;

    pub fn new(
        name: impl Into<String>,
        dim: usize,
        f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        FdChannel {
            name: name.into(),
            dim,
            f: Arc::new(f),
        }
    }
}

impl OutputChannel for FdChannel {
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.f)(t, x)
    }
    fn gradient(&self, t: f64, x: &[f64]) -> DVector<f64> {
        let h = Self::STEP;
        let mut xp = x.to_vec();
        DVector::from_fn(self.dim, |i, _| {
            xp[i] = x[i] + h;
            let fp = (self.f)(t, &xp);
            xp[i] = x[i] - h;
            let fm = (self.f)(t, &xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
    }
    fn time_partial(&self, t: f64, x: &[f64]) -> f64 {
        let h = Self::STEP;
        ((self.f)(t + h, x) - (self.f)(t - h, x)) / (2.0 * h)
    }
    fn hessian(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let h = Self::HESSIAN_STEP;
        let n = self.dim;
        let mut xp = x.to_vec();
        let mut at = |di: usize, si: f64, dj: usize, sj: f64| {
            xp.copy_from_slice(x);
            xp[di] += si * h;
            xp[dj] += sj * h;
            (self.f)(t, &xp)
        };
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = (at(i, 1.0, j, 1.0) - at(i, 1.0, j, -1.0) - at(i, -1.0, j, 1.0)
                    + at(i, -1.0, j, -1.0))
                    / (4.0 * h * h);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
    fn derivative_source(&self) -> DerivativeSource {
        DerivativeSource::FiniteDifference
    }
}

#[derive(Clone, Debug)]
pub enum ConstraintKind {
    Funnel {
        lower: Arc<dyn TimeFunction>,
        upper: Arc<dyn TimeFunction>,
    },
    LowerBounded {
        lower: Arc<dyn TimeFunction>,
    },
    UpperBounded {
        upper: Arc<dyn TimeFunction>,
    },
}

impl ConstraintKind {
    fn rank(&self) -> u8 {
        match self {
            ConstraintKind::Funnel { .. } => 0,
            ConstraintKind::LowerBounded { .. } => 1,
            ConstraintKind::UpperBounded { .. } => 2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ConstraintKind::Funnel { .. } => "funnel",
            ConstraintKind::LowerBounded { .. } => "lower",
            ConstraintKind::UpperBounded { .. } => "upper",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConstraintSpec {
    pub channel: Arc<dyn OutputChannel>,
    pub kind: ConstraintKind,
}

impl ConstraintSpec {
    pub fn funnel(
        channel: impl OutputChannel + 'static,
        lower: impl TimeFunction + 'static,
        upper: impl TimeFunction + 'static,
    ) -> Self {
        ConstraintSpec {
            channel: Arc::new(channel),
            kind: ConstraintKind::Funnel {
                lower: Arc::new(lower),
                upper: Arc::new(upper),
            },
        }
    }

    pub fn lower(channel: impl OutputChannel + 'static, lower: impl TimeFunction + 'static) -> Self {
        ConstraintSpec {
            channel: Arc::new(channel),
            kind: ConstraintKind::LowerBounded {
                lower: Arc::new(lower),
            },
        }
    }

    pub fn upper(channel: impl OutputChannel + 'static, upper: impl TimeFunction + 'static) -> Self {
        ConstraintSpec {
            channel: Arc::new(channel),
            kind: ConstraintKind::UpperBounded {
                upper: Arc::new(upper),
            },
        }
    }

    /// Expression-defined constraint; `None` marks an absent side.
    pub fn from_exprs(
        name: &str,
        output: &str,
        lower: Option<&str>,
        upper: Option<&str>,
        syms: &Symbols,
    ) -> Result<Self> {
        let wrap = |what: &str, e: ExprError| Error::Parse {
            location: format!("{name}.{what}, column {}", e.column),
            message: e.message,
        };
        let channel = ExprChannel::parse(name, output, syms).map_err(|e| wrap("output", e))?;
        let time_fn = |what: &str, src: &str| -> Result<Arc<dyn TimeFunction>> {
            let e = expr::parse(src, syms).map_err(|e| wrap(what, e))?;
            let f = ExprTimeFunction::new(e).map_err(|_| {
                Error::validation(format!("{name}.{what}"), "bound expressions may depend on t only")
            })?;
            Ok(Arc::new(f))
        };
        let kind = match (lower, upper) {
            (Some(l), Some(u)) => ConstraintKind::Funnel {
                lower: time_fn("lower", l)?,
                upper: time_fn("upper", u)?,
            },
            (Some(l), None) => ConstraintKind::LowerBounded {
                lower: time_fn("lower", l)?,
            },
            (None, Some(u)) => ConstraintKind::UpperBounded {
                upper: time_fn("upper", u)?,
            },
            (None, None) => {
                return Err(Error::validation(name, "constraint needs at least one bound"));
            }
        };
        Ok(ConstraintSpec {
            channel: Arc::new(channel),
            kind,
        })
    }
}

impl ConstraintSpec {
    /// For a funnel, checks `upper - lower >= eps` at `samples` evenly spaced times in `[0, horizon]`.
    pub fn check_width(&self, horizon: f64, samples: usize, eps: f64) -> Result<()> {
        let ConstraintKind::Funnel { lower, upper } = &self.kind else {
            return Ok(());
        };
        let samples = samples.max(2);
        for k in 0..samples {
            let t = horizon * k as f64 / (samples - 1) as f64;
            let width = upper.value(t) - lower.value(t);
            if !(width >= eps) {
                return Err(Error::validation(
                    self.channel.name(),
                    format!("funnel width {width:.6e} < {eps:e} at t = {t}"),
                ));
            }
        }
        Ok(())
    }
}

/// Constraints ordered funnels first, then lower-bounded, then upper-bounded.
#[derive(Clone, Debug)]
pub struct ConstraintSet {
    specs: Vec<ConstraintSpec>,
    n: usize,
    funnels: usize,
}

impl ConstraintSet {
    pub fn new(n: usize, specs: Vec<ConstraintSpec>) -> Result<Self> {
        for w in specs.windows(2) {
            if w[0].kind.rank() > w[1].kind.rank() {
                return Err(Error::Contract(format!(
                    "constraint `{}` ({}) is listed after `{}` ({}); order must be funnel, lower, upper",
                    w[1].channel.name(),
                    w[1].kind.label(),
                    w[0].channel.name(),
                    w[0].kind.label()
                )));
            }
        }
        for s in &specs {
            if s.channel.dim() != n {
                return Err(Error::dim("constraint channel", n, s.channel.dim()));
            }
        }
        let funnels = specs
            .iter()
            .filter(|s| matches!(s.kind, ConstraintKind::Funnel { .. }))
            .count();
        Ok(ConstraintSet { specs, n, funnels })
    }

    /// Stable-sorts by kind before building.
    pub fn from_unordered(n: usize, mut specs: Vec<ConstraintSpec>) -> Result<Self> {
        specs.sort_by_key(|s| s.kind.rank());
        Self::new(n, specs)
    }

    pub fn specs(&self) -> &[ConstraintSpec] {
        &self.specs
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.specs.len()
    }

    pub fn funnel_count(&self) -> usize {
        self.funnels
    }

    pub fn psi_len(&self) -> usize {
        self.specs.len() + self.funnels
    }

    /// Checks `upper - lower >= eps` for every funnel at `samples` evenly spaced times in `[0, horizon]`.
    pub fn check_funnels(&self, horizon: f64, samples: usize, eps: f64) -> Result<()> {
        self.specs
            .iter()
            .try_for_each(|s| s.check_width(horizon, samples, eps))
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::dim("x1", self.n, x.len()));
        }
        Ok(())
    }

    fn psi_into(&self, t: f64, x: &[f64], out: &mut SmallVec<[f64; 8]>) {
        out.clear();
        for s in &self.specs {
            let h = s.channel.value(t, x);
            match &s.kind {
                ConstraintKind::Funnel { lower, upper } => {
                    out.push(h - lower.value(t));
                    out.push(upper.value(t) - h);
                }
                ConstraintKind::LowerBounded { lower } => out.push(h - lower.value(t)),
                ConstraintKind::UpperBounded { upper } => out.push(upper.value(t) - h),
            }
        }
    }

    pub fn eval_psi(&self, t: f64, x: &[f64]) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let mut psi = SmallVec::new();
        self.psi_into(t, x, &mut psi);
        Ok(DVector::from_column_slice(&psi))
    }

    pub fn alpha_bar(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut psi = SmallVec::new();
        self.psi_into(t, x, &mut psi);
        Ok(min_of(&psi))
    }
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Max-shifted soft-min: returns `alpha` and fills `weights` with the normalized terms.
fn softmin(psi: &[f64], nu: f64, weights: &mut SmallVec<[f64; 8]>) -> f64 {
    weights.clear();
    let lo = min_of(psi);
    if !lo.is_finite() {
        return lo;
    }
    let mut sum = 0.0;
    for &p in psi {
        let w = (-nu * (p - lo)).exp();
        weights.push(w);
        sum += w;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    lo - sum.ln() / nu
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Membership {
    /// alpha > 0.
    InOmega,
    /// min psi > 0 but alpha <= 0.
    InObarOnly,
    Outside,
}

/// First-order quantities of the consolidated constraint at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaEval {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub grad: DVector<f64>,
    pub dalpha_dt: f64,
}

/// Per-channel pieces shared by the derivative routines.
struct Terms {
    alpha: f64,
    alpha_bar: f64,
    dalpha_dt: f64,
    grads: Vec<DVector<f64>>,
    /// Sum of softmin weights of the channel's psi entries, signed by orientation.
    coeff: SmallVec<[f64; 8]>,
    /// Sum of softmin weights regardless of sign.
    mass: SmallVec<[f64; 8]>,
}

impl Terms {
    fn gradient(&self, n: usize) -> DVector<f64> {
        let mut grad = DVector::zeros(n);
        for (g, c) in self.grads.iter().zip(&self.coeff) {
            grad.axpy(*c, g, 1.0);
        }
        grad
    }
}

#[derive(Clone, Debug)]
pub struct Consolidation {
    set: ConstraintSet,
    nu: f64,
}

impl Consolidation {
    pub fn new(set: ConstraintSet, nu: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::validation("nu", "must be a finite value > 0"));
        }
        Ok(Consolidation { set, nu })
    }

    pub fn set(&self) -> &ConstraintSet {
        &self.set
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn n(&self) -> usize {
        self.set.n
    }

    /// Width of the gap between `alpha` and `alpha_bar`: `ln(m+p)/nu`.
    pub fn sandwich_width(&self) -> f64 {
        (self.set.psi_len() as f64).ln() / self.nu
    }

    pub fn eval_psi(&self, t: f64, x: &[f64]) -> Result<DVector<f64>> {
        self.set.eval_psi(t, x)
    }

    pub fn alpha_bar(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.set.alpha_bar(t, x)
    }

    pub fn alpha(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.alpha_and_bar(t, x)?.0)
    }

    /// `(alpha, alpha_bar)` from one pass over the channels.
    pub fn alpha_and_bar(&self, t: f64, x: &[f64]) -> Result<(f64, f64)> {
        self.set.check_dim(x)?;
        let mut psi = SmallVec::new();
        self.set.psi_into(t, x, &mut psi);
        let mut w = SmallVec::new();
        let a = softmin(&psi, self.nu, &mut w);
        Ok((a, min_of(&psi)))
    }

    pub fn membership(&self, t: f64, x: &[f64]) -> Result<Membership> {
        let (a, bar) = self.alpha_and_bar(t, x)?;
        Ok(if a > 0.0 {
            Membership::InOmega
        } else if bar > 0.0 {
            Membership::InObarOnly
        } else {
            Membership::Outside
        })
    }

    /// Softmin weights and time partials of psi, with per-channel gradients.
    fn terms(&self, t: f64, x: &[f64]) -> Terms {
        let mut psi: SmallVec<[f64; 8]> = SmallVec::new();
        let mut dpsi: SmallVec<[f64; 8]> = SmallVec::new();
        let mut grads = Vec::with_capacity(self.set.m());
        for s in &self.set.specs {
            let mut g = DVector::zeros(self.set.n);
            let (h, ht) = s.channel.first_order(t, x, g.as_mut_slice());
            grads.push(g);
            match &s.kind {
                ConstraintKind::Funnel { lower, upper } => {
                    let (lo, dlo) = lower.value_and_derivative(t);
                    let (up, dup) = upper.value_and_derivative(t);
                    psi.push(h - lo);
                    dpsi.push(ht - dlo);
                    psi.push(up - h);
                    dpsi.push(dup - ht);
                }
                ConstraintKind::LowerBounded { lower } => {
                    let (lo, dlo) = lower.value_and_derivative(t);
                    psi.push(h - lo);
                    dpsi.push(ht - dlo);
                }
                ConstraintKind::UpperBounded { upper } => {
                    let (up, dup) = upper.value_and_derivative(t);
                    psi.push(up - h);
                    dpsi.push(dup - ht);
                }
            }
        }
        let mut w = SmallVec::new();
        let alpha = softmin(&psi, self.nu, &mut w);
        let alpha_bar = min_of(&psi);
        let mut coeff = SmallVec::new();
        let mut mass = SmallVec::new();
        let mut k = 0;
        for s in &self.set.specs {
            match s.kind {
                ConstraintKind::Funnel { .. } => {
                    coeff.push(w[k] - w[k + 1]);
                    mass.push(w[k] + w[k + 1]);
                    k += 2;
                }
                ConstraintKind::LowerBounded { .. } => {
                    coeff.push(w[k]);
                    mass.push(w[k]);
                    k += 1;
                }
                ConstraintKind::UpperBounded { .. } => {
                    coeff.push(-w[k]);
                    mass.push(w[k]);
                    k += 1;
                }
            }
        }
        let dalpha_dt: f64 = w.iter().zip(&dpsi).map(|(wi, di)| wi * di).sum();
        Terms {
            alpha,
            alpha_bar,
            dalpha_dt,
            grads,
            coeff,
            mass,
        }
    }

    /// `alpha`, `alpha_bar`, gradient in x1 and partial in t.
    pub fn evaluate(&self, t: f64, x: &[f64]) -> Result<AlphaEval> {
        self.set.check_dim(x)?;
        let terms = self.terms(t, x);
        let grad = terms.gradient(self.set.n);
        Ok(AlphaEval {
            alpha: terms.alpha,
            alpha_bar: terms.alpha_bar,
            grad,
            dalpha_dt: terms.dalpha_dt,
        })
    }

    pub fn grad_alpha(&self, t: f64, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.evaluate(t, x)?.grad)
    }

    pub fn dalpha_dt(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(t, x)?.dalpha_dt)
    }

    /// Full Hessian in x1, symmetrized after assembly.
    pub fn hessian_alpha(&self, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        self.set.check_dim(x)?;
        let n = self.set.n;
        let terms = self.terms(t, x);
        let grad = terms.gradient(n);
        let mut hess = DMatrix::zeros(n, n);
        let mut outer = DMatrix::zeros(n, n);
        for (i, s) in self.set.specs.iter().enumerate() {
            let c = terms.coeff[i];
            if c != 0.0 {
                hess += s.channel.hessian(t, x) * c;
            }
            let g = &terms.grads[i];
            outer.ger(terms.mass[i], g, g, 1.0);
        }
        outer.ger(-1.0, &grad, &grad, 1.0);
        hess -= outer * self.nu;
        let sym = (&hess + hess.transpose()) * 0.5;
        Ok(sym)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::bounds::Constant;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::collections::HashMap;

    pub(crate) fn syms(n: usize) -> Symbols {
        Symbols {
            n_vars: n,
            params: HashMap::new(),
        }
    }

    fn ch(name: &str, src: &str, n: usize) -> ExprChannel {
        ExprChannel::parse(name, src, &syms(n)).unwrap()
    }

    fn tf(src: &str) -> ExprTimeFunction {
        ExprTimeFunction::new(expr::parse(src, &syms(0)).unwrap()).unwrap()
    }

    pub(crate) fn example1() -> ConstraintSet {
        ConstraintSet::new(
            2,
            vec![
                ConstraintSpec::funnel(ch("h1", "x1", 2), Constant(-2.0), Constant(2.0)),
                ConstraintSpec::lower(ch("h2", "-x1 + x2", 2), Constant(-2.0)),
                ConstraintSpec::upper(ch("h3", "0.3*x1^2 + x2", 2), Constant(4.0)),
            ],
        )
        .unwrap()
    }

    fn example2() -> ConstraintSet {
        ConstraintSet::new(
            2,
            vec![
                ConstraintSpec::funnel(ch("h1", "x1", 2), Constant(-3.0), Constant(2.0)),
                ConstraintSpec::funnel(ch("h2", "0.3*x1^2 - x2", 2), Constant(-2.0), Constant(2.0)),
            ],
        )
        .unwrap()
    }

    fn moving_set() -> ConstraintSet {
        ConstraintSet::new(
            2,
            vec![
                ConstraintSpec::funnel(
                    ch("h1", "x1", 2),
                    tf("6.5 - 6.5*cos(0.24*t) - 3"),
                    tf("6.5 - 6.5*cos(0.24*t) + 2"),
                ),
                ConstraintSpec::funnel(
                    ch("h2", "0.3*cos(0.24*t)*(x1 - 6.5 + 6.5*cos(0.24*t))^2 - x2", 2),
                    Constant(-2.0),
                    Constant(2.0),
                ),
            ],
        )
        .unwrap()
    }

    fn funnel_1d(c: f64) -> ConstraintSet {
        ConstraintSet::new(1, vec![ConstraintSpec::funnel(ch("h", "x1", 1), Constant(-c), Constant(c))])
            .unwrap()
    }

    fn fd_grad(c: &Consolidation, t: f64, x: &[f64]) -> DVector<f64> {
        let h = 1e-5;
        DVector::from_fn(x.len(), |i, _| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            (c.alpha(t, &xp).unwrap() - c.alpha(t, &xm).unwrap()) / (2.0 * h)
        })
    }

    #[test]
    fn example1_psi_at_origin() {
        let psi = example1().eval_psi(0.0, &[0.0, 0.0]).unwrap();
        assert_eq!(psi.as_slice(), &[2.0, 2.0, 2.0, 4.0]);
        assert_eq!(example1().alpha_bar(0.0, &[0.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn psi_trivial_cases() {
        let lbo = ConstraintSet::new(1, vec![ConstraintSpec::lower(ch("h", "x1", 1), Constant(0.0))]).unwrap();
        assert_eq!(lbo.eval_psi(0.0, &[0.0]).unwrap().as_slice(), &[0.0]);
        assert_eq!(funnel_1d(1.5).eval_psi(0.0, &[0.0]).unwrap().as_slice(), &[1.5, 1.5]);
        let s = ConstraintSet::new(
            1,
            vec![
                ConstraintSpec::lower(ch("a", "x1", 1), Constant(0.0)),
                ConstraintSpec::upper(ch("b", "x1", 1), Constant(2.0)),
            ],
        )
        .unwrap();
        assert_eq!(s.alpha_bar(0.0, &[3.0]).unwrap(), -1.0);
    }

    #[test]
    fn dimension_and_order_are_checked() {
        assert!(matches!(example1().eval_psi(0.0, &[0.0]), Err(Error::Dimension { .. })));
        let bad = ConstraintSet::new(
            1,
            vec![
                ConstraintSpec::lower(ch("a", "x1", 1), Constant(0.0)),
                ConstraintSpec::funnel(ch("b", "x1", 1), Constant(-1.0), Constant(1.0)),
            ],
        );
        assert!(matches!(bad, Err(Error::Contract(_))));
        let sorted = ConstraintSet::from_unordered(
            1,
            vec![
                ConstraintSpec::upper(ch("c", "x1", 1), Constant(3.0)),
                ConstraintSpec::lower(ch("a", "x1", 1), Constant(0.0)),
                ConstraintSpec::funnel(ch("b", "x1", 1), Constant(-1.0), Constant(1.0)),
            ],
        )
        .unwrap();
        let names: Vec<_> = sorted.specs().iter().map(|s| s.channel.name().to_string()).collect();
        assert_eq!(names, ["b", "a", "c"]);
        assert_eq!(sorted.psi_len(), 4);
        assert!(Consolidation::new(example1(), -1.0).is_err());
    }

    #[test]
    fn alpha_closed_forms() {
        let single = Consolidation::new(
            ConstraintSet::new(1, vec![ConstraintSpec::lower(ch("h", "x1", 1), Constant(0.3))]).unwrap(),
            7.0,
        )
        .unwrap();
        assert_eq!(single.alpha(0.0, &[1.7]).unwrap(), 1.7 - 0.3);
        let pair = Consolidation::new(funnel_1d(1.0), 2.0).unwrap();
        assert_relative_eq!(pair.alpha(0.0, &[0.0]).unwrap(), 1.0 - 2f64.ln() / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn alpha_survives_huge_exponents() {
        let c = Consolidation::new(funnel_1d(1000.0), 10.0).unwrap();
        let a = c.alpha(0.0, &[0.0]).unwrap();
        assert_relative_eq!(a, 1000.0 - 2f64.ln() / 10.0, epsilon = 1e-9);
        let g = c.grad_alpha(0.0, &[999.0]).unwrap();
        assert!(g[0].is_finite());
    }

    #[test]
    fn gradient_examples() {
        let lbo = Consolidation::new(
            ConstraintSet::new(1, vec![ConstraintSpec::lower(ch("h", "x1", 1), tf("sin(t)"))]).unwrap(),
            10.0,
        )
        .unwrap();
        for x in [-3.0, 0.0, 5.0] {
            assert_eq!(lbo.grad_alpha(1.0, &[x]).unwrap()[0], 1.0);
        }
        let f = Consolidation::new(funnel_1d(2.0), 10.0).unwrap();
        assert_eq!(f.grad_alpha(0.0, &[0.0]).unwrap()[0], 0.0);
        let e1 = Consolidation::new(example1(), 10.0).unwrap();
        let x = [0.5, -0.3];
        let g = e1.grad_alpha(0.0, &x).unwrap();
        let fd = fd_grad(&e1, 0.0, &x);
        assert!((&g - &fd).norm() <= 1e-5 * fd.norm().max(1.0));
    }

    #[test]
    fn time_partial_examples() {
        let e1 = Consolidation::new(example1(), 10.0).unwrap();
        assert_eq!(e1.dalpha_dt(3.0, &[0.2, 0.1]).unwrap(), 0.0);
        let ubo = Consolidation::new(
            ConstraintSet::new(1, vec![ConstraintSpec::upper(ch("h", "x1", 1), tf("2 + sin(t)"))]).unwrap(),
            10.0,
        )
        .unwrap();
        assert_relative_eq!(ubo.dalpha_dt(0.7, &[0.4]).unwrap(), 0.7f64.cos(), epsilon = 1e-15);
        let mv = Consolidation::new(moving_set(), 10.0).unwrap();
        let (t, x, h) = (7.3, [4.0, 1.0], 1e-5);
        let fd = (mv.alpha(t + h, &x).unwrap() - mv.alpha(t - h, &x).unwrap()) / (2.0 * h);
        assert_relative_eq!(mv.dalpha_dt(t, &x).unwrap(), fd, max_relative = 1e-5);
    }

    #[test]
    fn hessian_examples() {
        let affine = Consolidation::new(
            ConstraintSet::new(2, vec![ConstraintSpec::lower(ch("h", "2*x1 - x2", 2), Constant(0.0))]).unwrap(),
            10.0,
        )
        .unwrap();
        assert_eq!(affine.hessian_alpha(0.0, &[0.3, 0.2]).unwrap(), DMatrix::zeros(2, 2));
        let f = Consolidation::new(funnel_1d(2.0), 10.0).unwrap();
        assert_relative_eq!(f.hessian_alpha(0.0, &[0.0]).unwrap()[(0, 0)], -10.0, epsilon = 1e-12);
        let e2 = Consolidation::new(example2(), 10.0).unwrap();
        let (t, x, h) = (0.0, [0.4, -0.2], 1e-5);
        let hess = e2.hessian_alpha(t, &x).unwrap();
        let mut fd = DMatrix::zeros(2, 2);
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let col = (e2.grad_alpha(t, &xp).unwrap() - e2.grad_alpha(t, &xm).unwrap()) / (2.0 * h);
            fd.set_column(j, &col);
        }
        assert!((&hess - &fd).norm() <= 1e-4 * fd.norm().max(1.0));
        assert_eq!(hess, hess.transpose());
    }

    #[test]
    fn membership_examples() {
        let f = Consolidation::new(funnel_1d(2.0), 10.0).unwrap();
        assert_eq!(f.membership(0.0, &[0.0]).unwrap(), Membership::InOmega);
        assert_relative_eq!(f.alpha(0.0, &[0.0]).unwrap(), 1.930_685_281_9, epsilon = 1e-9);
        // Corner of the box [0,1]^2 at distance 0.03 from two faces.
        let boxed = Consolidation::new(
            ConstraintSet::new(
                2,
                vec![
                    ConstraintSpec::funnel(ch("a", "x1", 2), Constant(0.0), Constant(10.0)),
                    ConstraintSpec::funnel(ch("b", "x2", 2), Constant(0.0), Constant(10.0)),
                ],
            )
            .unwrap(),
            10.0,
        )
        .unwrap();
        assert_eq!(boxed.membership(0.0, &[0.03, 0.03]).unwrap(), Membership::InObarOnly);
        assert_eq!(boxed.membership(0.0, &[-0.5, 3.0]).unwrap(), Membership::Outside);
    }

    #[test]
    fn fd_channel_matches_expr_channel() {
        let e = ch("h", "0.3*x1^2*sin(t) + x2^3", 2);
        let f = FdChannel::new("h", 2, |t, x| 0.3 * x[0] * x[0] * t.sin() + x[1].powi(3));
        let (t, x) = (0.8, [0.7, -1.1]);
        assert!((e.gradient(t, &x) - f.gradient(t, &x)).norm() < 1e-8);
        assert!((e.time_partial(t, &x) - f.time_partial(t, &x)).abs() < 1e-8);
        assert!((e.hessian(t, &x) - f.hessian(t, &x)).norm() < 1e-5);
        assert_eq!(f.derivative_source(), DerivativeSource::FiniteDifference);
    }

    #[test]
    fn funnel_width_check() {
        let crossed = ConstraintSet::new(
            1,
            vec![ConstraintSpec::funnel(ch("h", "x1", 1), tf("sin(t)"), tf("0.5"))],
        )
        .unwrap();
        assert!(crossed.check_funnels(10.0, 1000, 1e-6).is_err());
        assert!(example1().check_funnels(10.0, 1000, 1e-6).is_ok());
    }

    #[test]
    fn empty_set_is_unbounded_above() {
        let c = Consolidation::new(ConstraintSet::new(2, vec![]).unwrap(), 10.0).unwrap();
        assert_eq!(c.alpha(0.0, &[0.0, 0.0]).unwrap(), f64::INFINITY);
    }

    proptest! {
        #[test]
        fn sandwich_holds(x1 in -8.0f64..8.0, x2 in -8.0f64..8.0, nu in 0.5f64..50.0) {
            let c = Consolidation::new(example2(), nu).unwrap();
            let (a, bar) = c.alpha_and_bar(0.0, &[x1, x2]).unwrap();
            prop_assert!(a <= bar + 1e-12);
            prop_assert!(bar <= a + c.sandwich_width() + 1e-12);
        }

        #[test]
        fn sandwich_tightens_with_nu(x1 in -5.0f64..5.0, x2 in -5.0f64..5.0, nu in 0.5f64..20.0) {
            let lo = Consolidation::new(example1(), nu).unwrap();
            let hi = Consolidation::new(example1(), 2.0 * nu).unwrap();
            let bar = lo.alpha_bar(0.0, &[x1, x2]).unwrap();
            let gap = bar - hi.alpha(0.0, &[x1, x2]).unwrap();
            prop_assert!(gap <= hi.sandwich_width() + 1e-12);
            prop_assert!(hi.sandwich_width() < lo.sandwich_width());
        }

        #[test]
        fn permuting_funnels_permutes_psi(x1 in -5.0f64..5.0, x2 in -5.0f64..5.0, t in 0.0f64..20.0) {
            let s = moving_set();
            let mut swapped = s.specs().to_vec();
            swapped.swap(0, 1);
            let p = ConstraintSet::new(2, swapped).unwrap();
            let a = s.eval_psi(t, &[x1, x2]).unwrap();
            let b = p.eval_psi(t, &[x1, x2]).unwrap();
            prop_assert_eq!(a.len(), s.psi_len());
            prop_assert_eq!((a[0], a[1], a[2], a[3]), (b[2], b[3], b[0], b[1]));
            let ca = Consolidation::new(s, 10.0).unwrap();
            let cb = Consolidation::new(p, 10.0).unwrap();
            prop_assert_eq!(ca.alpha_bar(t, &[x1, x2]).unwrap(), cb.alpha_bar(t, &[x1, x2]).unwrap());
            let (va, vb) = (ca.alpha(t, &[x1, x2]).unwrap(), cb.alpha(t, &[x1, x2]).unwrap());
            prop_assert!((va - vb).abs() <= 1e-12 * va.abs().max(1.0));
        }

        #[test]
        fn symmetric_funnel_center_is_stationary(c in 0.1f64..50.0, nu in 0.5f64..50.0) {
            let f = Consolidation::new(funnel_1d(c), nu).unwrap();
            prop_assert_eq!(f.grad_alpha(0.0, &[0.0]).unwrap()[0], 0.0);
        }

        #[test]
        fn gradient_matches_fd_on_moving_set(x1 in -4.0f64..16.0, x2 in -6.0f64..6.0, t in 0.0f64..25.0) {
            let c = Consolidation::new(moving_set(), 10.0).unwrap();
            let g = c.grad_alpha(t, &[x1, x2]).unwrap();
            let fd = fd_grad(&c, t, &[x1, x2]);
            prop_assert!((&g - &fd).norm() <= 1e-5 * fd.norm().max(1.0));
        }
    }
}
