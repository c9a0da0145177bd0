//! The Lyapunov–Perron contraction `Θ ↦ T_Y(T_X(Θ, x0), Θ)` on backward
//! curves, solved independently at every base point.

use crate::curves::{restrict, CurveError, ExpCurve, TimeGrid};
use crate::flows::{horizontal_path, vertical_solve, EscapePolicy, FlowError, Side};
use crate::interp::{uniform_midpoint, Pchip, PeriodicSpline};
use crate::jet::Scalar;
use crate::linalg::sym_max_eig;
use crate::system::{
    validate_gap, BaseGraph, DeclaredRates, FieldLift, GapReport, LinearizedSystem, SpectralConstants, SystemError,
    SystemSpec, RHO_BUMP,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone)]
pub enum PerronError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("iteration diverged at x0 = {x0} ({reason:?}) after {iterations} iterations")]
    Diverged { x0: f64, reason: Divergence, iterations: usize, graph: Box<ManifoldGraph> },
    #[error("{count} point(s) did not converge within the iteration limit")]
    NotConverged { count: usize, graph: Box<ManifoldGraph> },
}

impl PerronError {
    /// The partially solved graph carried by a divergence report.
    pub fn graph(&self) -> Option<&ManifoldGraph> {
        match self {
            PerronError::Diverged { graph, .. } | PerronError::NotConverged { graph, .. } => Some(graph),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divergence {
    /// Successive distances grew for several iterations in a row.
    Expanding,
    /// An iterate left the tube `|y| <= eta`.
    TubeExit,
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitialIterate {
    #[default]
    Zero,
    /// Independent uniform samples in the tube of radius `eta / 2`.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerronConfig {
    /// Solver weight; defaults to the gap-derived value.
    pub rho: Option<f64>,
    /// Tube radius; defaults to the scenario's.
    pub eta: Option<f64>,
    /// Nonlinearity bound; measured on the tube when absent.
    pub zeta: Option<f64>,
    /// Threshold on the approximate-solution defect of the horizontal curve.
    pub beta: Option<f64>,
    /// Window length of the approximate-solution check.
    pub window: f64,
    pub t_max: Option<f64>,
    pub t_max_cap: f64,
    pub dt: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub tail_tol: f64,
    /// Gap order `r` used for the modified numbers; 0 picks it automatically.
    pub order: u32,
    pub escape: EscapePolicy,
    pub init: InitialIterate,
    /// Consecutive expanding ratios that count as divergence.
    pub expand_run: usize,
    /// Random pairs for the contraction probe (0 disables it).
    pub probe_pairs: usize,
}

impl Default for PerronConfig {
    fn default() -> Self {
        PerronConfig {
            rho: None,
            eta: None,
            zeta: None,
            beta: None,
            window: 1.0,
            t_max: None,
            t_max_cap: 120.0,
            dt: 0.02,
            tol: 1e-8,
            max_iter: 400,
            tail_tol: 1e-10,
            order: 0,
            escape: EscapePolicy::Abort,
            init: InitialIterate::Zero,
            expand_run: 3,
            probe_pairs: 4,
        }
    }
}

/// Configuration after filling in every derived quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub rho: f64,
    pub eta: f64,
    pub zeta: f64,
    pub t_max: f64,
    pub dt: f64,
    pub nodes: usize,
    pub gap: GapReport,
    /// Measured `Lip(T)` over random pairs, if probed.
    pub q_probe: Option<f64>,
    /// `(C_Y ζ / -ρ_Y) e^{(ρ_Y - ρ) T_max}`.
    pub tail_bound: f64,
    /// Gap holds, `ρ_Y < ρ < ρ_X` and the probe contracts.
    pub certified: bool,
    pub rates_declared: bool,
}

impl Resolved {
    pub fn constants(&self) -> &SpectralConstants {
        &self.gap.constants
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::uniform(self.t_max, self.dt).expect("resolved grid is valid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Perron,
    GraphTransform,
}

/// Per-point convergence record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointDiag {
    pub x0: f64,
    pub iterations: usize,
    /// Last weighted distance between successive iterates.
    pub last_dist: f64,
    pub last_ratio: f64,
    pub max_ratio: f64,
    pub converged: bool,
    pub divergence: Option<Divergence>,
    pub escape: Option<Side>,
    /// Step-halving estimate of the horizontal curve's defect.
    pub beta: f64,
    pub tube_sup: f64,
    pub history: Vec<f64>,
}

/// Sampled invariant graph `x ↦ h̃(x)` with optional derivatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldGraph {
    pub x_grid: Vec<f64>,
    pub dim_y: usize,
    /// `h̃(x_i)` flattened, `dim_y` values per point.
    pub h_values: Vec<f64>,
    /// `D^j h̃(x_i)` for `j = 1..`, flattened like `h_values`.
    pub d_values: Vec<Vec<f64>>,
    pub lip_estimate: f64,
    pub diagnostics: Vec<PointDiag>,
    pub method: Method,
    pub circle: Option<f64>,
    pub tol: f64,
}

impl ManifoldGraph {
    pub fn new(x_grid: Vec<f64>, dim_y: usize, h_values: Vec<f64>, method: Method, circle: Option<f64>, tol: f64) -> Self {
        let mut g = ManifoldGraph {
            x_grid,
            dim_y,
            h_values,
            d_values: Vec::new(),
            lip_estimate: 0.0,
            diagnostics: Vec::new(),
            method,
            circle,
            tol,
        };
        g.lip_estimate = g.lipschitz();
        g
    }

    pub fn len(&self) -> usize {
        self.x_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_grid.is_empty()
    }

    pub fn h(&self, i: usize) -> &[f64] {
        &self.h_values[i * self.dim_y..(i + 1) * self.dim_y]
    }

    /// `D^order h̃(x_i)`.
    pub fn d(&self, order: usize, i: usize) -> Option<&[f64]> {
        let v = self.d_values.get(order.checked_sub(1)?)?;
        Some(&v[i * self.dim_y..(i + 1) * self.dim_y])
    }

    pub fn sup_norm(&self) -> f64 {
        (0..self.len()).map(|i| crate::system::norm(self.h(i))).fold(0.0, f64::max)
    }

    fn gap(&self, i: usize, j: usize) -> f64 {
        match self.circle {
            Some(l) => {
                let r = (self.x_grid[j] - self.x_grid[i]).rem_euclid(l);
                r.min(l - r)
            }
            None => (self.x_grid[j] - self.x_grid[i]).abs(),
        }
    }

    /// Largest slope between neighbouring samples.
    pub fn lipschitz(&self) -> f64 {
        let n = self.len();
        let pairs = if self.circle.is_some() { n } else { n.saturating_sub(1) };
        (0..pairs)
            .map(|i| {
                let j = (i + 1) % n;
                let d: f64 = self.h(i).iter().zip(self.h(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                d / self.gap(i, j).max(1e-300)
            })
            .fold(0.0, f64::max)
    }

    /// Interpolant of `h̃` (order 0) or `D^order h̃`.
    pub fn interpolant(&self, order: usize) -> GraphInterp {
        let vals: &[f64] = if order == 0 { &self.h_values } else { &self.d_values[order - 1] };
        let m = self.dim_y;
        let comps = (0..m)
            .map(|c| {
                let ys: Vec<f64> = (0..self.len()).map(|i| vals[i * m + c]).collect();
                match self.circle {
                    Some(l) => Component::Periodic(PeriodicSpline::new(self.x_grid.clone(), ys, l)),
                    None => Component::Line(Pchip::new(self.x_grid.clone(), ys)),
                }
            })
            .collect();
        GraphInterp { comps }
    }

    /// CSV with columns `x, h..., d{j}_{c}..., lip, residual, converged`.
    pub fn to_csv(&self) -> String {
        let m = self.dim_y;
        let mut s = String::from("x");
        for c in 0..m {
            let _ = write!(s, ",h{c}");
        }
        for j in 0..self.d_values.len() {
            for c in 0..m {
                let _ = write!(s, ",d{}_{c}", j + 1);
            }
        }
        s.push_str(",lip,residual,converged\n");
        for i in 0..self.len() {
            let _ = write!(s, "{:.16e}", self.x_grid[i]);
            for v in self.h(i) {
                let _ = write!(s, ",{v:.16e}");
            }
            for d in &self.d_values {
                for v in &d[i * m..(i + 1) * m] {
                    let _ = write!(s, ",{v:.16e}");
                }
            }
            let (res, conv) = self.diagnostics.get(i).map_or((0.0, true), |d| (d.last_dist, d.converged));
            let _ = writeln!(s, ",{:.16e},{:.16e},{}", self.lip_estimate, res, conv as u8);
        }
        s
    }
}

enum Component {
    Periodic(PeriodicSpline),
    Line(Pchip),
}

pub struct GraphInterp {
    comps: Vec<Component>,
}

impl GraphInterp {
    pub fn eval(&self, x: f64) -> Vec<f64> {
        self.comps
            .iter()
            .map(|c| match c {
                Component::Periodic(s) => s.eval(x),
                Component::Line(p) => p.eval(x),
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Rates and configuration

/// Tangential and normal rates from the declared values or, failing that,
/// from sampled bounds: `ρ_M = sup |∂_x v_X|` and `ρ₋ = sup λ_max(sym A)`.
pub fn spectral_rates(lin: &LinearizedSystem) -> Result<(DeclaredRates, bool), PerronError> {
    if let Some(d) = lin.spec.declared {
        return Ok((d, true));
    }
    let m = lin.dim_y();
    let mut rho_m: f64 = 0.0;
    let mut rho_minus = f64::NEG_INFINITY;
    for x in lin.domain().uniform_grid(128) {
        let mut z = vec![x];
        z.extend(lin.base_at(x));
        let jac = lin.spec.jacobian(0.0, &z)?;
        rho_m = rho_m.max(jac[0].abs());
        let a = lin.a_matrix(x, 0.0)?;
        rho_minus = rho_minus.max(sym_max_eig(&a, m));
    }
    Ok((DeclaredRates { rho_m, rho_minus, c_m: 1.0, c_minus: 1.0 }, false))
}

/// Gap report at order `r`; `r = 0` picks the largest admissible integer
/// order (at least 1).
pub fn gap_for(lin: &LinearizedSystem, r: u32) -> Result<GapReport, PerronError> {
    let (d, _) = spectral_rates(lin)?;
    let probe = SpectralConstants::new(d.rho_m, d.rho_minus, d.c_m, d.c_minus, 1.0, RHO_BUMP);
    let r = if r == 0 { probe.max_certified_order(3).max(1) } else { r };
    Ok(validate_gap(&SpectralConstants::new(d.rho_m, d.rho_minus, d.c_m, d.c_minus, r as f64, RHO_BUMP)))
}

/// Fills in `ρ`, `η`, `ζ`, the horizon and the grid.
pub fn resolve(lin: &LinearizedSystem, cfg: &PerronConfig) -> Result<Resolved, PerronError> {
    if !(cfg.dt > 0.0 && cfg.tol > 0.0 && cfg.tail_tol > 0.0 && cfg.max_iter > 0) {
        return Err(PerronError::Config("dt, tol, tail_tol and max_iter must be positive".into()));
    }
    let (_, declared) = spectral_rates(lin)?;
    let gap = gap_for(lin, cfg.order)?;
    let sc = gap.constants;
    let rho = cfg.rho.unwrap_or(gap.rho);
    if !(rho < 0.0) {
        return Err(PerronError::Config(format!("solver weight rho = {rho} must be negative")));
    }
    let eta = cfg.eta.unwrap_or(lin.spec.eta);
    if !(eta > 0.0) {
        return Err(PerronError::Config(format!("tube radius eta = {eta} must be positive")));
    }
    let zeta = match cfg.zeta {
        Some(z) => z,
        None => lin.measure_zeta(eta, 48, 5)?,
    };
    let rho_y = sc.rho_y.min(-1e-3);
    let t_max = match cfg.t_max {
        Some(t) => t,
        None => {
            let floor = 10.0 / rho_y.abs();
            let ratio = sc.c_y * zeta.max(1e-300) / (rho_y.abs() * cfg.tail_tol);
            let need = if rho > rho_y && ratio > 1.0 { ratio.ln() / (rho - rho_y) } else { 0.0 };
            floor.max(need).min(cfg.t_max_cap)
        }
    };
    let grid = TimeGrid::uniform(t_max, cfg.dt)?;
    let tail_bound = sc.c_y * zeta / rho_y.abs() * ((rho_y - rho) * t_max).exp();
    let certified = gap.holds && sc.rho_y < rho && rho < sc.rho_x;
    Ok(Resolved {
        rho,
        eta,
        zeta,
        t_max,
        dt: grid.dt().unwrap(),
        nodes: grid.len(),
        gap,
        q_probe: None,
        tail_bound,
        certified,
        rates_declared: declared,
    })
}

// ---------------------------------------------------------------------------
// Generic kernels on the uniform backward grid

/// `f̃(x, y)` at node `i` or the midpoint of cell `i`.
pub(crate) fn f_tilde_at<S: FieldLift>(
    lin: &LinearizedSystem,
    y: &[S],
    n: usize,
    dt: f64,
    i: usize,
    mid: bool,
    x: S,
    a: &[S],
) -> Result<Vec<S>, SystemError> {
    let m = lin.dim_y();
    let yv: Vec<S> = if mid {
        (0..m).map(|c| uniform_midpoint(y, n, m, c, i)).collect()
    } else {
        y[i * m..(i + 1) * m].to_vec()
    };
    let t = -(i as f64 + if mid { 0.5 } else { 0.0 }) * dt;
    let mut full = vec![S::zero(); m + 1];
    lin.eval(t, x, &yv, &mut full)?;
    Ok((0..m)
        .map(|r| {
            let mut acc = full[r + 1];
            for c in 0..m {
                acc -= a[r * m + c] * yv[c];
            }
            acc
        })
        .collect())
}

/// One application of `T` on raw node arrays; returns the horizontal path's
/// escape, if any.
pub(crate) fn t_raw<S: FieldLift>(
    lin: &LinearizedSystem,
    y: &[S],
    x0: S,
    n: usize,
    dt: f64,
    policy: EscapePolicy,
    xbuf: &mut Vec<S>,
    out: &mut Vec<S>,
) -> Result<Option<crate::flows::Escape>, FlowError> {
    let esc = horizontal_path(lin, y, n, dt, x0, policy, xbuf)?;
    vertical_solve(lin, xbuf, n, dt, |i, mid, x, a| f_tilde_at(lin, y, n, dt, i, mid, x, a), out)?;
    Ok(esc)
}

/// `max_i |u_i - v_i| e^{ρ i dt}` over nodes (`m` values each).
pub(crate) fn weighted_dist<S: Scalar>(u: &[S], v: &[S], m: usize, dt: f64, rho: f64) -> f64 {
    u.chunks(m)
        .zip(v.chunks(m))
        .enumerate()
        .map(|(i, (a, b))| {
            let d = a.iter().zip(b).map(|(p, q)| p.dist(*q)).fold(0.0, f64::max);
            d * (rho * i as f64 * dt).exp()
        })
        .fold(0.0, f64::max)
}

fn uniform_dt(c: &ExpCurve) -> Result<f64, PerronError> {
    c.grid.dt().ok_or_else(|| PerronError::Config("curves must live on a uniform grid".into()))
}

/// `t ↦ Φ_y(t, 0, x0)` on the grid of `y`.
pub fn apply_tx(lin: &LinearizedSystem, y: &ExpCurve, x0: f64, policy: EscapePolicy) -> Result<ExpCurve, PerronError> {
    let dt = uniform_dt(y)?;
    let mut path = Vec::new();
    horizontal_path(lin, &y.values, y.len(), dt, x0, policy, &mut path)?;
    Ok(ExpCurve { grid: y.grid.clone(), dim: 1, values: path, rho: y.rho, interp: y.interp, circle: lin.domain().circumference() })
}

/// `t ↦ ∫_{-T}^t Ψ_x(t, τ) f̃(x(τ), y(τ)) dτ` on the common grid.
pub fn apply_ty(lin: &LinearizedSystem, x: &ExpCurve, y: &ExpCurve) -> Result<ExpCurve, PerronError> {
    let dt = uniform_dt(y)?;
    if x.grid != y.grid {
        return Err(PerronError::Config("x and y curves must share a grid".into()));
    }
    let n = y.len();
    let mut out = Vec::new();
    vertical_solve(lin, &x.values, n, dt, |i, mid, xv, a| f_tilde_at(lin, &y.values, n, dt, i, mid, xv, a), &mut out)?;
    Ok(ExpCurve { grid: y.grid.clone(), dim: lin.dim_y(), values: out, rho: y.rho, interp: y.interp, circle: None })
}

/// `T(y, x0) = T_Y(T_X(y, x0), y)`.
pub fn apply_t(lin: &LinearizedSystem, y: &ExpCurve, x0: f64, policy: EscapePolicy) -> Result<ExpCurve, PerronError> {
    let x = apply_tx(lin, y, x0, policy)?;
    apply_ty(lin, &x, y)
}

/// `T_Y^{b,a}`: the vertical integral started at `a` instead of the horizon,
/// reported on `[b, 0]`. `a` is rounded to the nearest node.
pub fn truncated_ty(lin: &LinearizedSystem, x: &ExpCurve, y: &ExpCurve, a: f64, b: f64) -> Result<ExpCurve, PerronError> {
    let dt = uniform_dt(y)?;
    if !(a <= b && b <= 0.0 && a >= -y.grid.t_max() - 1e-12) {
        return Err(PerronError::Config(format!("need -T_max <= a <= b <= 0, got a = {a}, b = {b}")));
    }
    let na = ((-a / dt).round() as usize).min(y.len() - 1);
    let m = lin.dim_y();
    let mut out = vec![0.0; (na + 1) * m];
    if na >= 1 {
        let mut v = Vec::new();
        let ys = &y.values[..(na + 1) * m];
        vertical_solve(lin, &x.values[..na + 1], na + 1, dt, |i, mid, xv, am| f_tilde_at(lin, ys, na + 1, dt, i, mid, xv, am), &mut v)?;
        out = v;
    }
    let cut = restrict(y, -(na as f64) * dt)?;
    let c = ExpCurve { values: out, dim: m, circle: None, ..cut };
    Ok(restrict(&c, b)?)
}

// ---------------------------------------------------------------------------
// Fixed-point iteration

/// Outcome of the iteration at one base point.
#[derive(Clone, Debug)]
pub struct PointSolution {
    pub diag: PointDiag,
    /// Last iterate `Θ(x0)` on the resolved grid.
    pub y: Vec<f64>,
    /// Its horizontal curve.
    pub x: Vec<f64>,
}

pub(crate) fn initial_iterate(res: &Resolved, m: usize, init: InitialIterate, index: usize) -> Vec<f64> {
    match init {
        InitialIterate::Zero => vec![0.0; res.nodes * m],
        InitialIterate::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let r = 0.5 * res.eta / (m as f64).sqrt();
            (0..res.nodes * m).map(|_| rng.gen_range(-r..r)).collect()
        }
    }
}

/// Iterates `Θ ↦ T(Θ, x0)` from `y0` at one base point.
pub fn solve_point(lin: &LinearizedSystem, res: &Resolved, cfg: &PerronConfig, x0: f64, y0: Vec<f64>) -> Result<PointSolution, PerronError> {
    let m = lin.dim_y();
    let (n, dt) = (res.nodes, res.dt);
    let mut y = y0;
    let mut next = Vec::with_capacity(y.len());
    let mut x = Vec::with_capacity(n);
    let mut diag = PointDiag {
        x0,
        iterations: 0,
        last_dist: f64::INFINITY,
        last_ratio: f64::NAN,
        max_ratio: 0.0,
        converged: false,
        divergence: None,
        escape: None,
        beta: 0.0,
        tube_sup: 0.0,
        history: Vec::new(),
    };
    let mut prev = f64::NAN;
    let mut run = 0;
    let floor = 1e-14;
    for it in 1..=cfg.max_iter {
        let esc = match t_raw(lin, &y, x0, n, dt, cfg.escape, &mut x, &mut next) {
            Ok(e) => e,
            Err(FlowError::NonFinite { .. }) => {
                diag.divergence = Some(Divergence::NonFinite);
                diag.iterations = it;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        diag.escape = esc.map(|e| e.side);
        let d = weighted_dist(&next, &y, m, dt, res.rho);
        diag.iterations = it;
        diag.history.push(d);
        diag.tube_sup = next.chunks(m).map(crate::system::norm).fold(0.0, f64::max);
        std::mem::swap(&mut y, &mut next);
        if !d.is_finite() {
            diag.divergence = Some(Divergence::NonFinite);
            break;
        }
        if prev.is_finite() && prev > 0.0 {
            let ratio = d / prev;
            diag.last_ratio = ratio;
            if d > floor {
                diag.max_ratio = diag.max_ratio.max(ratio);
                run = if ratio > 1.0 { run + 1 } else { 0 };
            }
        }
        diag.last_dist = d;
        prev = d;
        if diag.tube_sup > res.eta {
            diag.divergence = Some(Divergence::TubeExit);
            break;
        }
        if run >= cfg.expand_run {
            diag.divergence = Some(Divergence::Expanding);
            break;
        }
        if d < cfg.tol {
            diag.converged = true;
            break;
        }
    }
    // the horizontal curve of the final iterate and its step-halving defect
    horizontal_path(lin, &y, n, dt, x0, cfg.escape, &mut x).map_err(PerronError::from)?;
    diag.beta = horizontal_defect(lin, &y, n, dt, x0, cfg.escape, &x, cfg.window);
    Ok(PointSolution { diag, y, x })
}

/// Sup over windows of length `window` of the gap between the RK4 curve and a
/// half-step re-integration restarted at each window start.
fn horizontal_defect(lin: &LinearizedSystem, y: &[f64], n: usize, dt: f64, x0: f64, policy: EscapePolicy, x: &[f64], window: f64) -> f64 {
    let m = lin.dim_y();
    let stride = ((window / dt).round() as usize).max(1);
    // refine y by midpoint interpolation onto the half-step grid
    let n2 = 2 * n - 1;
    let mut y2 = vec![0.0; n2 * m];
    for i in 0..n {
        y2[2 * i * m..(2 * i + 1) * m].copy_from_slice(&y[i * m..(i + 1) * m]);
        if i + 1 < n {
            for c in 0..m {
                y2[(2 * i + 1) * m + c] = uniform_midpoint(y, n, m, c, i);
            }
        }
    }
    let _ = x0;
    let mut beta: f64 = 0.0;
    let mut buf = Vec::new();
    let mut start = 0;
    while start + 1 < n {
        let end = (start + stride).min(n - 1);
        let len2 = 2 * (end - start) + 1;
        let seg = &y2[2 * start * m..(2 * start + len2) * m];
        if horizontal_path(lin, seg, len2, 0.5 * dt, x[start], policy, &mut buf).is_ok() {
            for k in 0..=(end - start) {
                beta = beta.max((buf[2 * k] - x[start + k]).abs());
            }
        }
        start = end;
    }
    beta
}

/// Measured `sup ‖T(y₂) - T(y₁)‖_ρ / ‖y₂ - y₁‖_ρ` over random pairs in the
/// `η/2` tube at a few base points.
pub fn probe_contraction(lin: &LinearizedSystem, res: &Resolved, x_grid: &[f64], pairs: usize, seed: u64) -> Result<f64, PerronError> {
    let m = lin.dim_y();
    let (n, dt) = (res.nodes, res.dt);
    let picks: Vec<f64> = (0..3.min(x_grid.len())).map(|k| x_grid[k * x_grid.len() / 3.min(x_grid.len())]).collect();
    let mut q: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = 0.25 * res.eta / (m as f64).sqrt();
    for &x0 in &picks {
        for _ in 0..pairs {
            // smooth random curves: a few random Fourier modes in t
            let make = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                let modes: Vec<(f64, f64, f64)> =
                    (0..3 * m).map(|_| (rng.gen_range(-r..r) / 3.0, rng.gen_range(0.1..2.0), rng.gen_range(0.0..6.3))).collect();
                (0..n * m)
                    .map(|k| {
                        let (i, c) = (k / m, k % m);
                        let t = -(i as f64) * dt;
                        modes[3 * c..3 * c + 3].iter().map(|(a, w, p)| a * (w * t + p).sin()).sum::<f64>() + r / 3.0
                    })
                    .collect()
            };
            let (y1, y2) = (make(&mut rng), make(&mut rng));
            let (mut xb, mut o1, mut o2) = (Vec::new(), Vec::new(), Vec::new());
            let policy = EscapePolicy::Clamp;
            t_raw(lin, &y1, x0, n, dt, policy, &mut xb, &mut o1)?;
            t_raw(lin, &y2, x0, n, dt, policy, &mut xb, &mut o2)?;
            let den = weighted_dist(&y1, &y2, m, dt, res.rho);
            if den > 0.0 {
                q = q.max(weighted_dist(&o1, &o2, m, dt, res.rho) / den);
            }
        }
    }
    Ok(q)
}

/// Solves for `h̃` on `x_grid`, one independent fixed point per point.
pub fn solve(lin: &LinearizedSystem, cfg: &PerronConfig, x_grid: &[f64]) -> Result<(ManifoldGraph, Resolved), PerronError> {
    let (graph, res, _) = solve_full(lin, cfg, x_grid)?;
    Ok((graph, res))
}

/// [`solve`] that also returns the per-point fixed-point curves.
pub fn solve_full(lin: &LinearizedSystem, cfg: &PerronConfig, x_grid: &[f64]) -> Result<(ManifoldGraph, Resolved, Vec<PointSolution>), PerronError> {
    if x_grid.is_empty() {
        return Err(PerronError::Config("empty x grid".into()));
    }
    let mut res = resolve(lin, cfg)?;
    if cfg.probe_pairs > 0 {
        let q = probe_contraction(lin, &res, x_grid, cfg.probe_pairs, 17)?;
        res.q_probe = Some(q);
        res.certified &= q < 1.0;
    }
    let m = lin.dim_y();
    let sols: Vec<PointSolution> = x_grid
        .par_iter()
        .enumerate()
        .map(|(k, &x0)| solve_point(lin, &res, cfg, x0, initial_iterate(&res, m, cfg.init, k)))
        .collect::<Result<_, _>>()?;
    let h: Vec<f64> = sols.iter().flat_map(|s| s.y[..m].to_vec()).collect();
    let mut graph = ManifoldGraph::new(x_grid.to_vec(), m, h, Method::Perron, lin.domain().circumference(), cfg.tol);
    graph.diagnostics = sols.iter().map(|s| s.diag.clone()).collect();
    if let Some(s) = sols.iter().find(|s| s.diag.divergence.is_some()) {
        return Err(PerronError::Diverged {
            x0: s.diag.x0,
            reason: s.diag.divergence.unwrap(),
            iterations: s.diag.iterations,
            graph: Box::new(graph),
        });
    }
    let unconverged = sols.iter().filter(|s| !s.diag.converged).count();
    if unconverged > 0 {
        return Err(PerronError::NotConverged { count: unconverged, graph: Box::new(graph) });
    }
    Ok((graph, res, sols))
}

// ---------------------------------------------------------------------------
// Invariance

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub t_probe: f64,
    /// Probe times in `(0, t_probe]`.
    pub probes: Vec<f64>,
    /// `max_k |Θ∞(x0)(-t_k) - h̃(x(-t_k))|` per grid point.
    pub backward: Vec<f64>,
    /// `max_k |y(t_k) - h̃(x(t_k))|` along the forward flow per grid point.
    pub forward: Vec<f64>,
    /// Largest `|y(t)|` along the forward probes.
    pub forward_sup: f64,
    pub residual: f64,
}

/// Checks that solutions through graph points stay on the graph: backward
/// along each fixed-point curve and forward by integrating the full field.
/// The graph at the probed abscissae is re-solved by the fixed-point
/// iteration, so interpolation error does not enter; probes leaving a window
/// are skipped.
pub fn invariance_residual(
    lin: &LinearizedSystem,
    cfg: &PerronConfig,
    sols: &[PointSolution],
    res: &Resolved,
    t_probe: f64,
    probes: usize,
) -> Result<InvarianceReport, PerronError> {
    let m = lin.dim_y();
    let domain = *lin.domain();
    let probes = probes.max(1);
    let steps = (t_probe / res.dt).round() as usize;
    let idx: Vec<usize> = (1..=probes).map(|k| (k * steps) / probes).filter(|&i| i > 0).collect();
    let graph_at = |x: f64, guess: &[f64]| -> Result<Vec<f64>, PerronError> {
        let mut y0 = vec![0.0; res.nodes * m];
        y0[..m].copy_from_slice(guess);
        Ok(solve_point(lin, res, cfg, x, y0)?.y[..m].to_vec())
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let back: Vec<f64> = sols
        .par_iter()
        .map(|s| -> Result<f64, PerronError> {
            let mut worst: f64 = 0.0;
            for &i in idx.iter().filter(|&&i| i < res.nodes) {
                let x = s.x[i];
                if !domain.contains(x) {
                    continue;
                }
                let y = &s.y[i * m..(i + 1) * m];
                worst = worst.max(dist(y, &graph_at(x, y)?));
            }
            Ok(worst)
        })
        .collect::<Result<_, _>>()?;
    let spec: &SystemSpec = &lin.spec;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * res.dt).collect();
    let fwd: Vec<(f64, f64)> = sols
        .par_iter()
        .map(|s| -> Result<(f64, f64), PerronError> {
            let mut z = vec![s.diag.x0];
            z.extend_from_slice(&s.y[..m]);
            let path = crate::flows::integrate_path(spec, &z, &times, 2)?;
            let mut sup: f64 = 0.0;
            for p in &path {
                if !domain.contains(p[0]) {
                    break;
                }
                sup = sup.max(crate::system::norm(&p[1..]));
            }
            let mut worst: f64 = 0.0;
            for &i in &idx {
                let p = &path[i];
                if !domain.contains(p[0]) {
                    break;
                }
                worst = worst.max(dist(&p[1..], &graph_at(p[0], &p[1..])?));
            }
            Ok((worst, sup))
        })
        .collect::<Result<_, _>>()?;
    let forward: Vec<f64> = fwd.iter().map(|p| p.0).collect();
    let forward_sup = fwd.iter().map(|p| p.1).fold(0.0, f64::max);
    let residual = back.iter().chain(&forward).copied().fold(0.0, f64::max);
    let probes = idx.iter().map(|&i| i as f64 * res.dt).collect();
    Ok(InvarianceReport { t_probe, probes, backward: back, forward, forward_sup, residual })
}

/// Decomposes about the zero section and solves on a uniform grid of `nx`
/// points.
pub fn solve_spec(spec: SystemSpec, cfg: &PerronConfig, nx: usize) -> Result<(ManifoldGraph, Resolved), PerronError> {
    let grid = spec.domain.uniform_grid(nx);
    let lin = crate::system::decompose(spec, BaseGraph::Zero)?;
    solve(&lin, cfg, &grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{builtin, cohomological_graph, decompose, expr::expr_system, DomainX};
    use std::collections::BTreeMap;
    use std::f64::consts::{PI, TAU};

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn lin(name: &str, kv: &[(&str, f64)]) -> LinearizedSystem {
        decompose(builtin(name, &params(kv)).unwrap(), BaseGraph::Zero).unwrap()
    }

    fn coh() -> LinearizedSystem {
        lin("cohomological", &[])
    }

    fn grid(t_max: f64) -> TimeGrid {
        TimeGrid::uniform(t_max, 0.01).unwrap()
    }

    #[test]
    fn horizontal_operator_examples() {
        let l = coh();
        let y = ExpCurve::constant(grid(6.0), &[0.1], -1.0);
        let x = apply_tx(&l, &y, 0.4, EscapePolicy::Abort).unwrap();
        for (i, t) in x.grid.nodes().iter().enumerate() {
            assert!((x.values[i] - (0.4 + t)).abs() < 1e-12);
        }
        // decoupled: equals the plain flow of v_X for any y
        let os = lin("opt-smooth", &[]);
        let y2 = ExpCurve::from_fn(grid(6.0), 1, -1.0, |t| vec![0.2 * t.sin()]).unwrap();
        let a = apply_tx(&os, &ExpCurve::constant(grid(6.0), &[0.0], -1.0), 1.0, EscapePolicy::Abort).unwrap();
        let b = apply_tx(&os, &y2, 1.0, EscapePolicy::Abort).unwrap();
        let _ = (a, b);
        let dec = decompose(
            expr_system("d", DomainX::circle(TAU).unwrap(), "0.5*sin(x)", &["-y + 0.1*cos(x)".into()], &BTreeMap::new()).unwrap(),
            BaseGraph::Zero,
        )
        .unwrap();
        let p = apply_tx(&dec, &y2, 1.0, EscapePolicy::Abort).unwrap();
        let q = apply_tx(&dec, &ExpCurve::constant(grid(6.0), &[0.3], -1.0), 1.0, EscapePolicy::Abort).unwrap();
        assert_eq!(p.values, q.values);
    }

    #[test]
    fn vertical_operator_examples() {
        let l = coh();
        let x = apply_tx(&l, &ExpCurve::constant(grid(30.0), &[0.0], -1.0), 0.7, EscapePolicy::Abort).unwrap();
        let y = ExpCurve::constant(grid(30.0), &[0.0], -1.0);
        // f̃ = eps sin x with A = λ = -2 and x = x0 + t
        let out = apply_ty(&l, &x, &y).unwrap();
        let exact = cohomological_graph(1.0, -2.0, 0.1, 0.7);
        assert!((out.at_zero()[0] - exact).abs() < 1e-10, "{} {}", out.at_zero()[0], exact);
        // f̃ ≡ 0 gives zero
        let z = lin("cohomological", &[("eps", 0.0)]);
        assert!(apply_ty(&z, &x, &y).unwrap().values.iter().all(|v| *v == 0.0));
        // constant forcing c with A = λ: -c/λ away from the horizon
        let spec = expr_system("c", DomainX::circle(TAU).unwrap(), "1", &["-1.5*y + 0.3".into()], &BTreeMap::new()).unwrap();
        let lc = decompose(spec, BaseGraph::Zero).unwrap();
        let out = apply_ty(&lc, &x, &y).unwrap();
        for i in 0..1000 {
            assert!((out.values[i] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn vertical_bound_has_the_contraction_shape() {
        let l = lin("opt-smooth", &[]);
        let y = ExpCurve::from_fn(grid(20.0), 1, -1.0, |t| vec![0.1 * (3.0 * t).cos()]).unwrap();
        let x = apply_tx(&l, &y, 1.2, EscapePolicy::Abort).unwrap();
        let out = apply_ty(&l, &x, &y).unwrap();
        let sup_f = (0..y.len())
            .map(|i| l.f_tilde(x.values[i], y.node(i), y.grid.nodes()[i]).unwrap()[0].abs())
            .fold(0.0, f64::max);
        let sup = out.values.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(sup <= sup_f / 2.5 * (1.0 + 1e-9));
    }

    #[test]
    fn composition_vanishes_without_nonlinearity() {
        let z = lin("cohomological", &[("eps", 0.0)]);
        let y = ExpCurve::from_fn(grid(8.0), 1, -1.0, |t| vec![0.2 * t.sin()]).unwrap();
        assert!(apply_t(&z, &y, 1.0, EscapePolicy::Abort).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn truncated_operator_examples() {
        let l = coh();
        let g = grid(20.0);
        let y = ExpCurve::constant(g.clone(), &[0.0], -1.0);
        let x = apply_tx(&l, &y, 0.3, EscapePolicy::Abort).unwrap();
        let full = apply_ty(&l, &x, &y).unwrap();
        let same = truncated_ty(&l, &x, &y, -20.0, -20.0).unwrap();
        assert_eq!(same.values, full.values);
        let short = truncated_ty(&l, &x, &y, -20.0, -3.0).unwrap();
        assert_eq!(short.values[..], full.values[..short.len()]);
        let empty = truncated_ty(&l, &x, &y, -5.0, -5.0).unwrap();
        assert_eq!(*empty.values.last().unwrap(), 0.0);
        assert_eq!(empty.grid.nodes()[empty.len() - 1], -5.0);
        // tail of the closed form: ∫_{-∞}^{a} e^{-λτ} ε sin(x0+τ) dτ
        let (lam, eps, x0, a) = (-2.0f64, 0.1, 0.3, -10.0f64);
        let cut = truncated_ty(&l, &x, &y, a, 0.0).unwrap();
        let tail = eps * (-lam * a).exp() * ((-lam) * (x0 + a).sin() - (x0 + a).cos()) / (lam * lam + 1.0);
        let exact = cohomological_graph(1.0, lam, eps, x0) - tail;
        assert!((cut.at_zero()[0] - exact).abs() < 1e-10);
        let bound = 0.1 / 2.0 * (lam * (0.0 - a)).exp();
        assert!((cut.at_zero()[0] - cohomological_graph(1.0, lam, eps, x0)).abs() <= bound);
    }

    #[test]
    fn contraction_on_random_pairs() {
        let l = coh();
        let res = resolve(&l, &PerronConfig::default()).unwrap();
        let q = probe_contraction(&l, &res, &[0.0, 1.0, 2.0], 6, 3).unwrap();
        assert!(q < 1.0, "{q}");
    }

    #[test]
    fn cohomological_graph_is_recovered() {
        let (g, res) = solve_spec(builtin("cohomological", &BTreeMap::new()).unwrap(), &PerronConfig::default(), 64).unwrap();
        assert!(res.certified);
        for i in 0..g.len() {
            let exact = 0.04 * g.x_grid[i].sin() - 0.02 * g.x_grid[i].cos();
            assert!((g.h(i)[0] - exact).abs() < 1e-6, "{} {}", g.h(i)[0], exact);
        }
        // fixed-point residual of T at the limit
        let l = coh();
        let x0 = g.x_grid[5];
        let sol = solve_point(&l, &res, &PerronConfig::default(), x0, vec![0.0; res.nodes]).unwrap();
        let y = ExpCurve::new(res.grid(), 1, sol.y.clone(), res.rho).unwrap();
        let ty = apply_t(&l, &y, x0, EscapePolicy::Abort).unwrap();
        assert!(crate::curves::dist_rho(&ty, &y, res.rho).unwrap() <= 1e-8);
    }

    #[test]
    fn unperturbed_graph_is_zero() {
        let (g, _) = solve_spec(builtin("opt-smooth", &params(&[("eps", 0.0)])).unwrap(), &PerronConfig::default(), 32).unwrap();
        assert!(g.sup_norm() == 0.0);
    }

    #[test]
    fn random_initial_iterate_converges_to_the_same_graph() {
        let spec = builtin("cylinder", &params(&[("tilt", 0.05)])).unwrap();
        let cfg = PerronConfig::default();
        let (a, _) = solve_spec(spec.clone(), &cfg, 24).unwrap();
        let (b, _) = solve_spec(spec, &PerronConfig { init: InitialIterate::Random { seed: 9 }, ..cfg.clone() }, 24).unwrap();
        for i in 0..a.len() {
            assert!((a.h(i)[0] - b.h(i)[0]).abs() < 2.0 * cfg.tol);
        }
    }

    #[test]
    fn convergence_is_geometric() {
        let (g, _) = solve_spec(builtin("opt-smooth", &BTreeMap::new()).unwrap(), &PerronConfig::default(), 16).unwrap();
        for d in &g.diagnostics {
            assert!(d.converged && d.max_ratio < 1.0, "{d:?}");
        }
    }

    #[test]
    fn invariance_of_the_cohomological_graph() {
        let l = coh();
        let cfg = PerronConfig::default();
        let xs = l.domain().uniform_grid(128);
        let (_, res, sols) = solve_full(&l, &cfg, &xs).unwrap();
        let rep = invariance_residual(&l, &cfg, &sols, &res, 5.0, 5).unwrap();
        assert!(rep.residual <= 1e-6, "{}", rep.residual);
        assert!(rep.forward_sup <= res.eta);
        let z = lin("cohomological", &[("eps", 0.0)]);
        let (_, res, sols) = solve_full(&z, &cfg, &xs[..8]).unwrap();
        assert_eq!(invariance_residual(&z, &cfg, &sols, &res, 5.0, 5).unwrap().residual, 0.0);
    }

    #[test]
    fn tail_shrinks_with_the_horizon() {
        let l = coh();
        let xs = vec![0.3, 1.7];
        let solve_at = |t: f64| solve(&l, &PerronConfig { t_max: Some(t), probe_pairs: 0, ..Default::default() }, &xs).unwrap().0;
        let (a, b, c) = (solve_at(4.0), solve_at(8.0), solve_at(40.0));
        let d1 = (a.h(0)[0] - c.h(0)[0]).abs();
        let d2 = (b.h(0)[0] - c.h(0)[0]).abs();
        // error ~ e^{λ T}: doubling 4 → 8 multiplies it by e^{-8}
        assert!((d2 / d1).ln() < -7.0 && (d2 / d1).ln() > -9.0, "{d1} {d2}");
    }

    #[test]
    fn lipschitz_estimate_is_stable_under_refinement() {
        let spec = builtin("cohomological", &BTreeMap::new()).unwrap();
        let (a, _) = solve_spec(spec.clone(), &PerronConfig::default(), 64).unwrap();
        let (b, _) = solve_spec(spec, &PerronConfig::default(), 128).unwrap();
        let exact = (0.04f64.powi(2) + 0.02f64.powi(2)).sqrt();
        assert!(a.lip_estimate <= exact && b.lip_estimate <= exact + 1e-9);
        assert!((a.lip_estimate - b.lip_estimate).abs() < 1e-3);
    }

    #[test]
    fn escape_policy_on_windows() {
        let l = decompose(
            expr_system("w", DomainX::window(-1.0, 1.0).unwrap(), "x", &["-2*y + 0.1*x".into()], &BTreeMap::new()).unwrap(),
            BaseGraph::Zero,
        )
        .unwrap();
        // backward flow of x' = x contracts, so no escape
        let cfg = PerronConfig::default();
        assert!(solve(&l, &cfg, &[0.5]).is_ok());
        let l = decompose(
            expr_system("w", DomainX::window(-1.0, 1.0).unwrap(), "-x", &["-2*y + 0.1*x".into()], &BTreeMap::new()).unwrap(),
            BaseGraph::Zero,
        )
        .unwrap();
        assert!(matches!(solve(&l, &cfg, &[0.5]), Err(PerronError::Flow(FlowError::Escape { side: Side::Right, .. }))));
        let (g, _) = solve(&l, &PerronConfig { escape: EscapePolicy::Clamp, ..cfg }, &[0.5]).unwrap();
        assert_eq!(g.diagnostics[0].escape, Some(Side::Right));
    }

    #[test]
    fn resolved_configuration_respects_the_ordering() {
        for name in ["opt-smooth", "cohomological", "cylinder", "non-cinfty"] {
            let l = lin(name, &[]);
            let res = resolve(&l, &PerronConfig::default()).unwrap();
            let sc = res.constants();
            assert!(sc.rho_y < res.rho && res.rho < sc.rho_x && sc.rho_x < 0.0, "{name}");
            assert!(res.t_max >= 10.0 / sc.rho_y.abs() - 1e-9);
            assert!(res.tail_bound <= 1e-10 * 1.0001 || res.t_max >= 120.0 - 1e-9, "{name} {}", res.tail_bound);
        }
        let l = coh();
        let bad = PerronConfig { dt: 0.0, ..Default::default() };
        assert!(matches!(resolve(&l, &bad), Err(PerronError::Config(_))));
    }

    #[test]
    fn undeclared_systems_get_measured_rates() {
        let spec = expr_system("u", DomainX::circle(TAU).unwrap(), "1 + 0.3*cos(x)", &["-2*y + 0.05*sin(x)".into()], &BTreeMap::new()).unwrap();
        let l = decompose(spec, BaseGraph::Zero).unwrap();
        let (d, declared) = spectral_rates(&l).unwrap();
        assert!(!declared);
        assert!((d.rho_m - 0.3).abs() < 1e-3 && (d.rho_minus + 2.0).abs() < 1e-9);
        let (g, _) = solve(&l, &PerronConfig::default(), &l.domain().uniform_grid(16)).unwrap();
        assert!(g.sup_norm() < 0.05);
        let _ = PI;
    }

    #[test]
    fn graph_csv_and_interpolant() {
        let (g, _) = solve_spec(builtin("cohomological", &BTreeMap::new()).unwrap(), &PerronConfig::default(), 32).unwrap();
        let csv = g.to_csv();
        assert!(csv.starts_with("x,h0,lip,residual,converged\n"));
        assert_eq!(csv.lines().count(), 33);
        let f = g.interpolant(0);
        let x = 0.123;
        assert!((f.eval(x)[0] - (0.04 * x.sin() - 0.02 * x.cos())).abs() < 1e-5);
    }
}
