//! Brute-force references and sampled diagnostics.
//!
//! Everything here is a heuristic over finite samples: a report can refute a
//! property ("flagged", "found") but never certify it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::constraint::{Consolidation, OutputChannel};
use crate::error::{Error, Result};
use crate::sim::SimulationTrace;

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Points per dimension.
    pub resolution: usize,
    pub polish_steps: usize,
    /// Initial ascent step; `None` uses `0.1 / nu`.
    pub polish_rate: Option<f64>,
}

impl GridSpec {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, resolution: usize) -> Result<Self> {
        let g = GridSpec {
            lo,
            hi,
            resolution,
            polish_steps: 50,
            polish_rate: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() || self.lo.is_empty() {
            return Err(Error::validation("grid", "lo and hi need the same nonzero length"));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l < h)) {
            return Err(Error::validation("grid", "every lo must be below its hi"));
        }
        if self.resolution < 2 {
            return Err(Error::validation("grid", "resolution must be >= 2"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn cell(&self, d: usize) -> f64 {
        (self.hi[d] - self.lo[d]) / (self.resolution - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid point for a flat index (first coordinate varies fastest).
    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        (0..self.dim())
            .map(|d| {
                let k = idx % self.resolution;
                idx /= self.resolution;
                self.lo[d] + self.cell(d) * k as f64
            })
            .collect()
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(d, v)| *v >= self.lo[d] && *v <= self.hi[d])
    }

    fn near_edge(&self, x: &[f64]) -> bool {
        x.iter().enumerate().any(|(d, v)| {
            let c = self.cell(d) * (1.0 - 1e-9);
            v - self.lo[d] < c || self.hi[d] - v < c
        })
    }

    fn check(&self, cons: &Consolidation) -> Result<()> {
        self.validate()?;
        if self.dim() != cons.n() {
            return Err(Error::dim("grid dimension", cons.n(), self.dim()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaStar {
    pub alpha_star: f64,
    pub argmax: Vec<f64>,
    /// Largest `alpha_bar` seen on the grid or at the argmax.
    pub alpha_bar_star: f64,
    /// Refined argmax lies within one cell of the box edge.
    pub on_boundary: bool,
}

fn total_order(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

/// Grid maximum of `alpha` at time `t`, refined by monotone gradient ascent.
pub fn alpha_star_grid(cons: &Consolidation, t: f64, grid: &GridSpec) -> Result<AlphaStar> {
    grid.check(cons)?;
    let (best_idx, best, bar_max) = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let (a, bar) = cons.alpha_and_bar(t, &grid.point(i)).unwrap_or((f64::NAN, f64::NAN));
            (i, total_order(a), total_order(bar))
        })
        .reduce(
            || (usize::MAX, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |a, b| {
                let pick = if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a };
                (pick.0, pick.1, a.2.max(b.2))
            },
        );
    let mut x = grid.point(best_idx);
    let mut a = best;
    let mut rate = grid.polish_rate.unwrap_or(0.1 / cons.nu());
    for _ in 0..grid.polish_steps {
        let g = cons.grad_alpha(t, &x)?;
        if g.norm() == 0.0 {
            break;
        }
        let cand: Vec<f64> = x.iter().zip(g.iter()).map(|(xi, gi)| xi + rate * gi).collect();
        let ca = if grid.contains(&cand) {
            total_order(cons.alpha(t, &cand)?)
        } else {
            f64::NEG_INFINITY
        };
        if ca > a {
            x = cand;
            a = ca;
            rate *= 1.5;
        } else {
            rate *= 0.5;
        }
    }
    let bar_here = cons.alpha_bar(t, &x)?;
    Ok(AlphaStar {
        alpha_star: a,
        on_boundary: grid.near_edge(&x),
        argmax: x,
        alpha_bar_star: bar_max.max(bar_here),
    })
}

/// `alpha_star_grid` at each time, in parallel over times.
pub fn alpha_star_series(cons: &Consolidation, times: &[f64], grid: &GridSpec) -> Result<Vec<AlphaStar>> {
    times
        .par_iter()
        .map(|&t| alpha_star_grid(cons, t, grid))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSample {
    pub t: f64,
    pub alpha_star: f64,
    pub alpha_bar_star: f64,
    pub alpha: f64,
    pub alpha_hat: Option<f64>,
    pub on_boundary: bool,
}

impl OracleSample {
    pub fn gap(&self) -> f64 {
        self.alpha_star - self.alpha
    }

    pub fn estimation_error(&self) -> Option<f64> {
        self.alpha_hat.map(|h| self.alpha_star - h)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ViolationReport {
    pub samples: Vec<OracleSample>,
    /// Runs of samples whose estimated `alpha_bar*` is negative.
    pub infeasible_windows: Vec<(f64, f64)>,
    /// Runs where `alpha* + ln(m+p)/nu < 0`, which rules out any feasible point.
    pub certain_infeasible_windows: Vec<(f64, f64)>,
    /// Runs where the smooth maximum itself is negative.
    pub alpha_star_negative_windows: Vec<(f64, f64)>,
    /// Largest `alpha* - alpha` inside infeasible windows, or over all samples if there are none.
    pub max_gap: f64,
    pub estimation_error_max: Option<f64>,
    /// `mu + max estimation error + tolerance`; present for adaptive runs with windows.
    pub gap_bound: Option<f64>,
    pub gap_holds: Option<bool>,
}

impl ViolationReport {
    pub fn window_overlaps(&self, a: f64, b: f64) -> bool {
        self.infeasible_windows.iter().any(|(s, e)| *s <= b && *e >= a)
    }
}

fn windows(samples: &[OracleSample], pred: impl Fn(&OracleSample) -> bool) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut open: Option<(f64, f64)> = None;
    for s in samples {
        if pred(s) {
            open = Some(match open {
                Some((a, _)) => (a, s.t),
                None => (s.t, s.t),
            });
        } else if let Some(w) = open.take() {
            out.push(w);
        }
    }
    out.extend(open);
    out
}

/// Compares a trace against the grid oracle every `stride` recorded rows.
pub fn violation_report(
    trace: &SimulationTrace,
    cons: &Consolidation,
    grid: &GridSpec,
    mu: Option<f64>,
    stride: usize,
    tolerance: f64,
) -> Result<ViolationReport> {
    if trace.records.is_empty() {
        return Ok(ViolationReport::default());
    }
    let rows: Vec<_> = trace
        .records
        .iter()
        .step_by(stride.max(1))
        .filter(|r| r.alpha.is_finite())
        .collect();
    let times: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let stars = alpha_star_series(cons, &times, grid)?;
    let samples: Vec<OracleSample> = rows
        .iter()
        .zip(stars)
        .map(|(r, s)| OracleSample {
            t: r.t,
            alpha_star: s.alpha_star,
            alpha_bar_star: s.alpha_bar_star.max(s.alpha_star),
            alpha: r.alpha,
            alpha_hat: r.alpha_hat,
            on_boundary: s.on_boundary,
        })
        .collect();
    let width = cons.sandwich_width();
    let infeasible_windows = windows(&samples, |s| s.alpha_bar_star < 0.0);
    let certain_infeasible_windows = windows(&samples, |s| s.alpha_star + width < 0.0);
    let alpha_star_negative_windows = windows(&samples, |s| s.alpha_star < 0.0);
    let in_window = |s: &OracleSample| infeasible_windows.iter().any(|(a, b)| s.t >= *a && s.t <= *b);
    let gaps = |f: &dyn Fn(&OracleSample) -> bool| {
        samples
            .iter()
            .filter(|s| f(s))
            .map(OracleSample::gap)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let max_gap = if infeasible_windows.is_empty() {
        gaps(&|_| true)
    } else {
        gaps(&in_window)
    };
    let estimation_error_max = samples
        .iter()
        .filter_map(OracleSample::estimation_error)
        .reduce(f64::max);
    let (gap_bound, gap_holds) = match (mu, estimation_error_max) {
        (Some(mu), Some(e)) if !infeasible_windows.is_empty() => {
            let bound = mu + e.max(0.0) + tolerance;
            (Some(bound), Some(max_gap <= bound))
        }
        _ => (None, None),
    };
    Ok(ViolationReport {
        samples,
        infeasible_windows,
        certain_infeasible_windows,
        alpha_star_negative_windows,
        max_gap,
        estimation_error_max,
        gap_bound,
        gap_holds,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundednessReport {
    pub radii: Vec<f64>,
    /// Smallest `-alpha` over all directions at each radius.
    pub min_neg_alpha: Vec<f64>,
    /// Unit directions along which `-alpha` stopped growing on the outer radii.
    pub flagged: Vec<Vec<f64>>,
}

impl BoundednessReport {
    pub fn likely_unbounded(&self) -> bool {
        !self.flagged.is_empty()
    }
}

fn directions(n: usize, count: usize) -> Vec<Vec<f64>> {
    match n {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let mut out: Vec<Vec<f64>> = (0..n)
                .flat_map(|d| {
                    [1.0, -1.0].map(|s| {
                        let mut v = vec![0.0; n];
                        v[d] = s;
                        v
                    })
                })
                .collect();
            while out.len() < count {
                let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-3 {
                    out.push(v.iter().map(|x| x / norm).collect());
                }
            }
            out
        }
    }
}

/// Samples `-alpha` on spheres about the origin. A direction is flagged when
/// `-alpha` fails to strictly increase between consecutive radii in the outer half.
pub fn check_boundedness_sampled(
    cons: &Consolidation,
    t: f64,
    radii: &[f64],
    direction_count: usize,
) -> Result<BoundednessReport> {
    if radii.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::validation("radii", "must be strictly increasing"));
    }
    let dirs = directions(cons.n(), direction_count.max(1));
    let mut table = vec![vec![0.0; radii.len()]; dirs.len()];
    for (di, d) in dirs.iter().enumerate() {
        for (ri, r) in radii.iter().enumerate() {
            let x: Vec<f64> = d.iter().map(|c| c * r).collect();
            table[di][ri] = -cons.alpha(t, &x)?;
        }
    }
    let min_neg_alpha = (0..radii.len())
        .map(|ri| table.iter().map(|row| row[ri]).fold(f64::INFINITY, f64::min))
        .collect();
    let half = radii.len() / 2;
    let flagged = dirs
        .iter()
        .zip(&table)
        .filter(|(_, row)| row[half.saturating_sub(1)..].windows(2).any(|w| !(w[1] > w[0])))
        .map(|(d, _)| d.clone())
        .collect();
    Ok(BoundednessReport {
        radii: radii.to_vec(),
        min_neg_alpha,
        flagged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticalKind {
    Maximum,
    Minimum,
    Saddle,
    Degenerate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticalPoint {
    pub point: Vec<f64>,
    pub grad_norm: f64,
    pub eigenvalues: Vec<f64>,
    pub kind: CriticalKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanOptions {
    pub grad_tol: f64,
    pub newton_iters: usize,
    /// Eigenvalues below this fraction of the largest magnitude count as zero.
    pub eig_rel_tol: f64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            grad_tol: 1e-8,
            newton_iters: 60,
            eig_rel_tol: 1e-6,
        }
    }
}

fn classify(eig: &[f64], rel: f64) -> CriticalKind {
    let scale = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = rel * scale.max(1e-300);
    let pos = eig.iter().any(|v| *v > tol);
    let neg = eig.iter().any(|v| *v < -tol);
    match (pos, neg) {
        (false, _) => CriticalKind::Maximum,
        (true, true) => CriticalKind::Saddle,
        (true, false) if eig.iter().all(|v| *v > tol) => CriticalKind::Minimum,
        _ => CriticalKind::Degenerate,
    }
}

fn pseudo_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(h.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = DVector::zeros(g.len());
    for (k, lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() > 1e-8 * scale {
            let v = eig.eigenvectors.column(k);
            out += v * (v.dot(g) / lam);
        }
    }
    out
}

/// Critical points of `alpha(t, .)` inside the grid box, classified by the Hessian.
pub fn critical_point_scan(cons: &Consolidation, t: f64, grid: &GridSpec) -> Result<Vec<CriticalPoint>> {
    critical_point_scan_with(cons, t, grid, ScanOptions::default())
}

pub fn critical_point_scan_with(
    cons: &Consolidation,
    t: f64,
    grid: &GridSpec,
    opts: ScanOptions,
) -> Result<Vec<CriticalPoint>> {
    grid.check(cons)?;
    let n = grid.dim();
    let res = grid.resolution;
    let norms: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            cons.grad_alpha(t, &grid.point(i))
                .map(|g| g.norm())
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let stride = |d: usize| res.pow(d as u32);
    let candidates: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let v = norms[i];
            (0..n).all(|d| {
                let k = (i / stride(d)) % res;
                let lower = k == 0 || norms[i - stride(d)] >= v;
                let upper = k + 1 == res || norms[i + stride(d)] > v;
                lower && upper
            })
        })
        .collect();

    let refined: Vec<Option<CriticalPoint>> = candidates
        .par_iter()
        .map(|&i| -> Result<Option<CriticalPoint>> {
            let mut x = DVector::from_vec(grid.point(i));
            for _ in 0..opts.newton_iters {
                let g = cons.grad_alpha(t, x.as_slice())?;
                if g.norm() < opts.grad_tol {
                    break;
                }
                let h = cons.hessian_alpha(t, x.as_slice())?;
                x -= pseudo_solve(&h, &g);
                if !x.iter().all(|v| v.is_finite()) {
                    return Ok(None);
                }
            }
            let g = cons.grad_alpha(t, x.as_slice())?;
            if !(g.norm() < opts.grad_tol) || !grid.contains(x.as_slice()) {
                return Ok(None);
            }
            let h = cons.hessian_alpha(t, x.as_slice())?;
            let eig: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
            Ok(Some(CriticalPoint {
                point: x.as_slice().to_vec(),
                grad_norm: g.norm(),
                kind: classify(&eig, opts.eig_rel_tol),
                eigenvalues: eig,
            }))
        })
        .collect::<Result<_>>()?;

    let min_cell = (0..n).map(|d| grid.cell(d)).fold(f64::INFINITY, f64::min);
    let mut out: Vec<CriticalPoint> = Vec::new();
    for cp in refined.into_iter().flatten() {
        let dup = out.iter().any(|o| {
            o.point
                .iter()
                .zip(&cp.point)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                < 2.0 * min_cell
        });
        if !dup {
            out.push(cp);
        }
    }
    Ok(out)
}

/// Critical points that are not maxima.
pub fn non_maximum(points: &[CriticalPoint]) -> Vec<&CriticalPoint> {
    points.iter().filter(|p| p.kind != CriticalKind::Maximum).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdOptions {
    pub samples: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub t_range: (f64, f64),
    pub seed: u64,
    pub first_order_tol: f64,
    pub hessian_tol: f64,
}

impl FdOptions {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, t_range: (f64, f64)) -> Self {
        FdOptions {
            samples: 1000,
            lo,
            hi,
            t_range,
            seed: 7,
            first_order_tol: 1e-5,
            hessian_tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FdErrors {
    pub gradient: f64,
    pub time_partial: f64,
    pub hessian: f64,
}

impl FdErrors {
    fn absorb(&mut self, g: f64, dt: f64, h: f64) {
        self.gradient = self.gradient.max(g);
        self.time_partial = self.time_partial.max(dt);
        self.hessian = self.hessian.max(h);
    }

    fn passes(&self, first: f64, second: f64) -> bool {
        self.gradient <= first && self.time_partial <= first && self.hessian <= second
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FdReport {
    pub samples: usize,
    /// Errors of the consolidated value's derivatives.
    pub alpha: FdErrors,
    /// Errors of each channel's derivatives, by name.
    pub channels: Vec<(String, FdErrors)>,
    /// Names of failing quantities, such as `h2.gradient` or `alpha.hessian`.
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }
}

const FD_STEP: f64 = 1e-5;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> DVector<f64> {
    let mut xp = x.to_vec();
    DVector::from_fn(x.len(), |i, _| {
        xp[i] = x[i] + FD_STEP;
        let a = f(&xp);
        xp[i] = x[i] - FD_STEP;
        let b = f(&xp);
        xp[i] = x[i];
        (a - b) / (2.0 * FD_STEP)
    })
}

fn fd_jacobian(f: impl Fn(&[f64]) -> DVector<f64>, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let mut m = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for j in 0..n {
        xp[j] = x[j] + FD_STEP;
        let a = f(&xp);
        xp[j] = x[j] - FD_STEP;
        let b = f(&xp);
        xp[j] = x[j];
        m.set_column(j, &((a - b) / (2.0 * FD_STEP)));
    }
    m
}

fn channel_errors(ch: &dyn OutputChannel, t: f64, x: &[f64]) -> (f64, f64, f64) {
    let g = ch.gradient(t, x);
    let fd_g = fd_gradient(|y| ch.value(t, y), x);
    let dt = ch.time_partial(t, x);
    let fd_dt = (ch.value(t + FD_STEP, x) - ch.value(t - FD_STEP, x)) / (2.0 * FD_STEP);
    let h = ch.hessian(t, x);
    let fd_h = fd_jacobian(|y| ch.gradient(t, y), x);
    (rel_vec(&g, &fd_g), rel(dt, fd_dt), rel_mat(&h, &fd_h))
}

/// Central-difference agreement of channel and consolidated derivatives at random samples.
pub fn fd_validate(cons: &Consolidation, opts: &FdOptions) -> Result<FdReport> {
    let n = cons.n();
    if opts.lo.len() != n || opts.hi.len() != n {
        return Err(Error::dim("fd sampling box", n, opts.lo.len()));
    }
    let specs = cons.set().specs();
    let mut report = FdReport {
        samples: opts.samples,
        channels: specs
            .iter()
            .map(|s| (s.channel.name().to_string(), FdErrors::default()))
            .collect(),
        ..FdReport::default()
    };
    if specs.is_empty() {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.samples {
        let t = rng.gen_range(opts.t_range.0..=opts.t_range.1);
        let x: Vec<f64> = (0..n).map(|d| rng.gen_range(opts.lo[d]..=opts.hi[d])).collect();
        for (k, s) in specs.iter().enumerate() {
            let (g, dt, h) = channel_errors(s.channel.as_ref(), t, &x);
            report.channels[k].1.absorb(g, dt, h);
        }
        let ev = cons.evaluate(t, &x)?;
        let fd_g = fd_gradient(|y| cons.alpha(t, y).unwrap(), &x);
        let fd_dt = (cons.alpha(t + FD_STEP, &x)? - cons.alpha(t - FD_STEP, &x)?) / (2.0 * FD_STEP);
        let hess = cons.hessian_alpha(t, &x)?;
        let fd_h = fd_jacobian(|y| cons.grad_alpha(t, y).unwrap(), &x);
        report
            .alpha
            .absorb(rel_vec(&ev.grad, &fd_g), rel(ev.dalpha_dt, fd_dt), rel_mat(&hess, &fd_h));
    }
    let (first, second) = (opts.first_order_tol, opts.hessian_tol);
    let mut failures = Vec::new();
    let mut note = |name: &str, e: &FdErrors| {
        if e.gradient > first {
            failures.push(format!("{name}.gradient"));
        }
        if e.time_partial > first {
            failures.push(format!("{name}.time_partial"));
        }
        if e.hessian > second {
            failures.push(format!("{name}.hessian"));
        }
    };
    for (name, e) in &report.channels {
        note(name, e);
    }
    note("alpha", &report.alpha);
    report.failures = failures;
    debug_assert!(report.pass() == (report.alpha.passes(first, second) && report.channels.iter().all(|(_, e)| e.passes(first, second))));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::Constant;
    use crate::constraint::tests::{example1, syms};
    use crate::constraint::{ConstraintSet, ConstraintSpec, ExprChannel};
    use std::sync::Arc;

    fn ch(name: &str, src: &str, n: usize) -> ExprChannel {
        ExprChannel::parse(name, src, &syms(n)).unwrap()
    }

    fn funnel_1d(lo: f64, hi: f64) -> Consolidation {
        Consolidation::new(
            ConstraintSet::new(1, vec![ConstraintSpec::funnel(ch("h", "x1", 1), Constant(lo), Constant(hi))]).unwrap(),
            10.0,
        )
        .unwrap()
    }

    fn annulus() -> Consolidation {
        Consolidation::new(
            ConstraintSet::new(
                2,
                vec![ConstraintSpec::funnel(ch("h", "x1^2 + x2^2", 2), Constant(9.0), Constant(16.0))],
            )
            .unwrap(),
            10.0,
        )
        .unwrap()
    }

    fn example2() -> Consolidation {
        Consolidation::new(
            ConstraintSet::new(
                2,
                vec![
                    ConstraintSpec::funnel(ch("h1", "x1", 2), Constant(-3.0), Constant(2.0)),
                    ConstraintSpec::funnel(ch("h2", "0.3*x1^2 - x2", 2), Constant(-2.0), Constant(2.0)),
                ],
            )
            .unwrap(),
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn one_dimensional_funnel_maximum() {
        let g = GridSpec::new(vec![-5.0], vec![5.0], 201).unwrap();
        let s = alpha_star_grid(&funnel_1d(-2.0, 2.0), 0.0, &g).unwrap();
        assert!((s.alpha_star - (2.0 - 2f64.ln() / 10.0)).abs() < 1e-4);
        assert!(s.argmax[0].abs() < 1e-6);
        assert!(!s.on_boundary);
    }

    #[test]
    fn crossed_funnel_maximum() {
        let g = GridSpec::new(vec![-5.0], vec![5.0], 201).unwrap();
        let s = alpha_star_grid(&funnel_1d(1.0, -1.0), 0.0, &g).unwrap();
        assert!((s.alpha_star - (-1.0 - 2f64.ln() / 10.0)).abs() < 1e-9);
        assert!((s.alpha_bar_star + 1.0).abs() < 1e-9);
    }

    #[test]
    fn unbounded_set_flags_boundary() {
        let c = Consolidation::new(
            ConstraintSet::new(1, vec![ConstraintSpec::lower(ch("h", "x1", 1), Constant(0.0))]).unwrap(),
            10.0,
        )
        .unwrap();
        let g = GridSpec::new(vec![-5.0], vec![5.0], 101).unwrap();
        assert!(alpha_star_grid(&c, 0.0, &g).unwrap().on_boundary);
    }

    #[test]
    fn maximum_dominates_grid_and_refines_monotonically() {
        let c = Consolidation::new(example1(), 10.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for res in [11, 21, 41, 81] {
            let mut g = GridSpec::new(vec![-6.0, -6.0], vec![6.0, 6.0], res).unwrap();
            g.polish_steps = 0;
            let s = alpha_star_grid(&c, 0.0, &g).unwrap();
            for i in 0..g.len() {
                assert!(c.alpha(0.0, &g.point(i)).unwrap() <= s.alpha_star);
            }
            assert!(s.alpha_star >= prev);
            prev = s.alpha_star;
        }
    }

    #[test]
    fn windows_are_ordered_runs() {
        let mk = |t: f64, a: f64| OracleSample {
            t,
            alpha_star: a,
            alpha_bar_star: a,
            alpha: a,
            alpha_hat: None,
            on_boundary: false,
        };
        let s = vec![mk(0.0, 1.0), mk(1.0, -1.0), mk(2.0, -1.0), mk(3.0, 1.0), mk(4.0, -2.0)];
        assert_eq!(windows(&s, |x| x.alpha_star < 0.0), vec![(1.0, 2.0), (4.0, 4.0)]);
    }

    #[test]
    fn empty_trace_gives_empty_report() {
        use crate::sim::{SimulationTrace, TraceLayout};
        let tr = SimulationTrace::empty(
            "x",
            TraceLayout {
                n: 1,
                r: 1,
                aux_names: vec![],
                adaptive: false,
            },
        );
        let g = GridSpec::new(vec![-1.0], vec![1.0], 11).unwrap();
        let r = violation_report(&tr, &funnel_1d(-1.0, 1.0), &g, None, 1, 1e-3).unwrap();
        assert_eq!(r, ViolationReport::default());
    }

    #[test]
    fn boundedness_examples() {
        let radii = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];
        let full = Consolidation::new(example1(), 10.0).unwrap();
        assert!(!check_boundedness_sampled(&full, 0.0, &radii, 64).unwrap().likely_unbounded());

        let mut specs = example1().specs().to_vec();
        specs.remove(1);
        let open = Consolidation::new(ConstraintSet::new(2, specs.clone()).unwrap(), 10.0).unwrap();
        let rep = check_boundedness_sampled(&open, 0.0, &radii, 64).unwrap();
        assert!(rep
            .flagged
            .iter()
            .any(|d| d[0].abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12));

        specs.push(ConstraintSpec::upper(ch("ball", "x1^2 + x2^2", 2), Constant(100.0)));
        let closed = Consolidation::new(ConstraintSet::from_unordered(2, specs).unwrap(), 10.0).unwrap();
        assert!(!check_boundedness_sampled(&closed, 0.0, &radii, 64).unwrap().likely_unbounded());
    }

    #[test]
    fn annulus_has_interior_minimum() {
        let g = GridSpec::new(vec![-6.0, -6.0], vec![6.0, 6.0], 61).unwrap();
        let cps = critical_point_scan(&annulus(), 0.0, &g).unwrap();
        let bad = non_maximum(&cps);
        assert!(bad
            .iter()
            .any(|p| p.point.iter().all(|v| v.abs() < 1e-6) && p.kind == CriticalKind::Minimum));
    }

    #[test]
    fn example2_has_a_single_maximum() {
        let g = GridSpec::new(vec![-8.0, -8.0], vec![8.0, 8.0], 81).unwrap();
        let cps = critical_point_scan(&example2(), 0.0, &g).unwrap();
        assert_eq!(cps.len(), 1, "{cps:?}");
        assert_eq!(cps[0].kind, CriticalKind::Maximum);
        assert!(cps[0].eigenvalues.iter().all(|v| *v < 0.0));
    }

    #[test]
    fn concave_single_constraint_has_no_bad_points() {
        let c = Consolidation::new(
            ConstraintSet::new(2, vec![ConstraintSpec::upper(ch("h", "x1^2 + x2^2", 2), Constant(4.0))]).unwrap(),
            10.0,
        )
        .unwrap();
        let g = GridSpec::new(vec![-3.0, -3.0], vec![3.0, 3.0], 41).unwrap();
        assert!(non_maximum(&critical_point_scan(&c, 0.0, &g).unwrap()).is_empty());
    }

    #[derive(Debug)]
    struct Skewed(ExprChannel);

    impl OutputChannel for Skewed {
        fn name(&self) -> &str {
            "skewed"
        }
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn value(&self, t: f64, x: &[f64]) -> f64 {
            self.0.value(t, x)
        }
        fn gradient(&self, t: f64, x: &[f64]) -> DVector<f64> {
            self.0.gradient(t, x) * 1.1
        }
        fn time_partial(&self, t: f64, x: &[f64]) -> f64 {
            self.0.time_partial(t, x)
        }
        fn hessian(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
            self.0.hessian(t, x)
        }
    }

    #[test]
    fn fd_validate_passes_and_names_corrupt_channel() {
        let mut opts = FdOptions::new(vec![-4.0, -4.0], vec![4.0, 4.0], (0.0, 10.0));
        opts.samples = 100;
        let good = fd_validate(&Consolidation::new(example1(), 10.0).unwrap(), &opts).unwrap();
        assert!(good.pass(), "{good:?}");

        let mut specs = example1().specs().to_vec();
        specs[1].channel = Arc::new(Skewed(ch("h2", "-x1 + x2", 2)));
        let bad = Consolidation::new(ConstraintSet::new(2, specs).unwrap(), 10.0).unwrap();
        let rep = fd_validate(&bad, &opts).unwrap();
        assert!(!rep.pass());
        assert!(rep.failures.iter().any(|f| f == "skewed.gradient"));

        let empty = Consolidation::new(ConstraintSet::new(2, vec![]).unwrap(), 10.0).unwrap();
        assert!(fd_validate(&empty, &opts).unwrap().pass());
    }
}
