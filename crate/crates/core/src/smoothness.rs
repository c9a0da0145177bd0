//! Derivatives of the Perron fixed point: formal derivatives of `T`, the
//! fiber-contraction driver, jet iteration for `D^j h̃` and Hölder fits.

use crate::curves::{CurveError, ExpCurve};
use crate::flows::{horizontal_path, linear_forced, EscapePolicy, FlowError};
use crate::interp::{cumulative_integral, uniform_midpoint};
use crate::jet::{Dual, Jet, Scalar, Taylor3};
use crate::linalg::{identity, inverse, matmul};
use crate::perron::{
    apply_ty, initial_iterate, resolve, solve_point, t_raw, weighted_dist, ManifoldGraph, PerronConfig,
    PerronError, Resolved,
};
use crate::system::{LinearizedSystem, SystemError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone)]
pub enum SmoothError {
    #[error(transparent)]
    Perron(#[from] PerronError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("order {order} is not certified by the spectral gap (orders below {max_r} are)")]
    GapViolation { order: usize, max_r: f64 },
    #[error("order {0} is not supported (1..=3)")]
    UnsupportedOrder(usize),
    #[error("fiber contraction did not converge in {iterations} iterations (distance {dist})")]
    NoConvergence { iterations: usize, dist: f64 },
    #[error("only {usable} usable scales (need at least 4)")]
    TooFewScales { usable: usize },
    #[error("{0}")]
    Invalid(String),
}

fn uniform(c: &ExpCurve) -> Result<f64, SmoothError> {
    c.grid.dt().ok_or_else(|| SmoothError::Invalid("curves must live on a uniform grid".into()))
}

fn node_state(x: f64, y: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(1 + y.len());
    z.push(x);
    z.extend_from_slice(y);
    z
}

// ---------------------------------------------------------------------------
// Formal derivatives of T_X and T_Y

/// `t ↦ DΦ_y(t, 0, x0) δx0`.
pub fn d_p_tx(lin: &LinearizedSystem, y: &ExpCurve, x0: f64, dx0: f64, policy: EscapePolicy) -> Result<ExpCurve, SmoothError> {
    let dt = uniform(y)?;
    let yd: Vec<Dual> = y.values.iter().map(|&v| Dual::cst(v)).collect();
    let mut path = Vec::new();
    horizontal_path(lin, &yd, y.len(), dt, Jet::variable(x0, dx0), policy, &mut path)?;
    Ok(ExpCurve { values: path.iter().map(|p| p.c[1]).collect(), dim: 1, circle: None, ..y.clone() })
}

/// `t ↦ ∫_0^t DΦ_y(t, τ) D_y v_X(x_y(τ), y(τ)) δy(τ) dτ`, the derivative of
/// `T_X` in the direction `δy`. In one dimension `DΦ(t, τ) = g(t)/g(τ)` with
/// `g = DΦ(·, 0)`.
pub fn d_y_tx(lin: &LinearizedSystem, y: &ExpCurve, x0: f64, dy: &ExpCurve, policy: EscapePolicy) -> Result<ExpCurve, SmoothError> {
    let dt = uniform(y)?;
    let n = y.len();
    let m = lin.dim_y();
    let yd: Vec<Dual> = y.values.iter().map(|&v| Dual::cst(v)).collect();
    let mut path = Vec::new();
    horizontal_path(lin, &yd, n, dt, Jet::variable(x0, 1.0), policy, &mut path)?;
    let mut k = vec![0.0; n];
    for i in 0..n {
        let t = y.grid.nodes()[i];
        let jac = lin.spec.jacobian(t, &node_state(path[i].c[0], y.node(i)))?;
        let b: f64 = (0..m).map(|c| jac[1 + c] * dy.node(i)[c]).sum();
        k[i] = b / path[i].c[1];
    }
    let acc = cumulative_integral(&k, -dt);
    Ok(ExpCurve { values: (0..n).map(|i| path[i].c[1] * acc[i]).collect(), dim: 1, circle: None, ..y.clone() })
}

/// `D_x A(x)` as a row-major matrix.
fn d_a(lin: &LinearizedSystem, x: f64, t: f64) -> Result<Vec<f64>, SmoothError> {
    let a = lin.a_matrix::<Taylor3>(Jet::variable(x, 1.0), t)?;
    Ok(a.iter().map(|v| v.c[1]).collect())
}

fn forced_on(lin: &LinearizedSystem, x: &ExpCurve, forcing: Vec<f64>, dt: f64) -> Result<Vec<f64>, SmoothError> {
    let n = x.len();
    let m = lin.dim_y();
    let mid: Vec<f64> = (0..(n - 1) * m).map(|k| uniform_midpoint(&forcing, n, m, k % m, k / m)).collect();
    Ok(linear_forced(lin, &x.values, n, dt, &forcing, &mid)?)
}

/// `t ↦ ∫ Ψ_x(t, τ) D_y f̃(x(τ), y(τ)) δy(τ) dτ`.
pub fn d_y_ty(lin: &LinearizedSystem, x: &ExpCurve, y: &ExpCurve, dy: &ExpCurve) -> Result<ExpCurve, SmoothError> {
    let dt = uniform(y)?;
    let (n, m) = (y.len(), lin.dim_y());
    let mut forcing = vec![0.0; n * m];
    for i in 0..n {
        let t = y.grid.nodes()[i];
        let xv = x.values[i];
        let jac = lin.spec.jacobian(t, &node_state(xv, y.node(i)))?;
        let a = lin.a_matrix(xv, t)?;
        for r in 0..m {
            forcing[i * m + r] = (0..m).map(|c| (jac[(r + 1) * (m + 1) + 1 + c] - a[r * m + c]) * dy.node(i)[c]).sum();
        }
    }
    let v = forced_on(lin, x, forcing, dt)?;
    Ok(ExpCurve { values: v, dim: m, circle: None, ..y.clone() })
}

/// Derivative of `T_Y(x, y)` in `x` along `δx`: the `D_x f̃` term plus the
/// variation `D_xΨ` of the linear flow, solved as
/// `δw' = A δw + (DA δx)(w - y) + ∂_x v_Y δx` with `w = T_Y(x, y)`.
pub fn d_x_ty(lin: &LinearizedSystem, x: &ExpCurve, y: &ExpCurve, dx: &ExpCurve) -> Result<ExpCurve, SmoothError> {
    let dt = uniform(y)?;
    let (n, m) = (y.len(), lin.dim_y());
    let w = apply_ty(lin, x, y)?;
    let mut forcing = vec![0.0; n * m];
    for i in 0..n {
        let t = y.grid.nodes()[i];
        let xv = x.values[i];
        let jac = lin.spec.jacobian(t, &node_state(xv, y.node(i)))?;
        let da = d_a(lin, xv, t)?;
        let dxi = dx.values[i];
        for r in 0..m {
            let rot: f64 = (0..m).map(|c| da[r * m + c] * (w.node(i)[c] - y.node(i)[c])).sum();
            forcing[i * m + r] = (rot + jac[(r + 1) * (m + 1)]) * dxi;
        }
    }
    let v = forced_on(lin, x, forcing, dt)?;
    Ok(ExpCurve { values: v, dim: m, circle: None, ..y.clone() })
}

/// `D_xΨ_x(t, τ)[δx] = ∫_τ^t Ψ(t, σ) DA(x(σ)) δx(σ) Ψ(σ, τ) dσ` by direct
/// quadrature over fundamental matrices on the grid of `x` (`t`, `τ` nodes).
pub fn d_x_psi(lin: &LinearizedSystem, x: &ExpCurve, dx: &ExpCurve, t: f64, tau: f64) -> Result<Vec<f64>, SmoothError> {
    let dt = uniform(x)?;
    let m = lin.dim_y();
    let it = (-t / dt).round() as usize;
    let itau = (-tau / dt).round() as usize;
    if it > itau || itau >= x.len() {
        return Err(SmoothError::Invalid(format!("need -T_max <= tau <= t <= 0, got t = {t}, tau = {tau}")));
    }
    let len = itau - it + 1;
    // P_k = Ψ(σ_k, τ) with σ_k = t_{itau - k}, forward in time
    let mut p = vec![identity::<f64>(m)];
    let a_at = |xv: f64, s: f64| lin.a_matrix(xv, s);
    for k in 0..len - 1 {
        let i0 = itau - k;
        let s0 = -(i0 as f64) * dt;
        let xm = uniform_midpoint(&x.values, x.len(), 1, 0, i0 - 1);
        let (a0, am, a1) = (a_at(x.values[i0], s0)?, a_at(xm, s0 + 0.5 * dt)?, a_at(x.values[i0 - 1], s0 + dt)?);
        let cur = &p[k];
        let step = |a: &[f64], q: &[f64]| matmul(a, q, m, m, m);
        let k1 = step(&a0, cur);
        let q2: Vec<f64> = cur.iter().zip(&k1).map(|(c, d)| c + 0.5 * dt * d).collect();
        let k2 = step(&am, &q2);
        let q3: Vec<f64> = cur.iter().zip(&k2).map(|(c, d)| c + 0.5 * dt * d).collect();
        let k3 = step(&am, &q3);
        let q4: Vec<f64> = cur.iter().zip(&k3).map(|(c, d)| c + dt * d).collect();
        let k4 = step(&a1, &q4);
        p.push((0..m * m).map(|j| cur[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])).collect());
    }
    let pt = p[len - 1].clone();
    let mut integrands = vec![vec![0.0; len]; m * m];
    for (k, pk) in p.iter().enumerate() {
        let i = itau - k;
        let s = -(i as f64) * dt;
        let da = d_a(lin, x.values[i], s)?;
        let scaled: Vec<f64> = da.iter().map(|v| v * dx.values[i]).collect();
        let inv = inverse(pk, m).ok_or_else(|| SmoothError::Invalid("singular fundamental matrix".into()))?;
        let prod = matmul(&matmul(&matmul(&pt, &inv, m, m, m), &scaled, m, m, m), pk, m, m, m);
        for j in 0..m * m {
            integrands[j][k] = prod[j];
        }
    }
    Ok(integrands.iter().map(|f| *cumulative_integral(f, dt).last().unwrap()).collect())
}

// ---------------------------------------------------------------------------
// Fiber contraction

#[derive(Clone, Debug, PartialEq)]
pub struct FiberResult<X, Y> {
    pub x: X,
    pub y: Y,
    pub iterations: usize,
    pub base_dist: f64,
    pub fiber_dist: f64,
    /// Last ratio of successive fiber distances.
    pub fiber_ratio: f64,
}

/// Iterates `(x, y) ↦ (F₁(x), F₂(x, y))` until both parts move less than `tol`.
#[allow(clippy::too_many_arguments)]
pub fn fiber_contract<X, Y>(
    base: impl Fn(&X) -> X,
    fiber: impl Fn(&X, &Y) -> Y,
    dist_x: impl Fn(&X, &X) -> f64,
    dist_y: impl Fn(&Y, &Y) -> f64,
    x0: X,
    y0: Y,
    tol: f64,
    max_iter: usize,
) -> Result<FiberResult<X, Y>, SmoothError> {
    let (mut x, mut y) = (x0, y0);
    let mut prev = f64::NAN;
    let mut ratio = f64::NAN;
    for it in 1..=max_iter {
        let ny = fiber(&x, &y);
        let nx = base(&x);
        let (dx, dy) = (dist_x(&nx, &x), dist_y(&ny, &y));
        if prev > 0.0 {
            ratio = dy / prev;
        }
        prev = dy;
        x = nx;
        y = ny;
        if dx < tol && dy < tol {
            return Ok(FiberResult { x, y, iterations: it, base_dist: dx, fiber_dist: dy, fiber_ratio: ratio });
        }
        if !(dx.is_finite() && dy.is_finite()) {
            return Err(SmoothError::NoConvergence { iterations: it, dist: f64::INFINITY });
        }
    }
    Err(SmoothError::NoConvergence { iterations: max_iter, dist: prev })
}

// ---------------------------------------------------------------------------
// Derivatives of h̃

/// Weight exponents `μ_j` of the derivative curves (`j = 1..=k`).
pub fn mu_schedule(rho: f64, rho_y: f64, k: usize, holder_alpha: Option<f64>) -> Vec<f64> {
    (1..=k)
        .map(|j| match holder_alpha {
            Some(a) => a * rho,
            None => -(j as f64 / k as f64) * (0.1 * rho.abs()).min((k as f64 * rho - rho_y) / 2.0),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivDiag {
    pub x0: f64,
    pub iterations: usize,
    /// Measured contraction ratio of each order's curve in its own weight.
    pub ratios: Vec<f64>,
    pub fiber_dist: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub order: usize,
    pub rho: f64,
    pub mu: Vec<f64>,
    pub max_r: f64,
    pub points: Vec<DerivDiag>,
}

/// Configuration for `order`: the gap is evaluated at `r = order`.
pub fn derivative_config(lin: &LinearizedSystem, cfg: &PerronConfig, order: usize) -> Result<(PerronConfig, Resolved), SmoothError> {
    if !(1..=3).contains(&order) {
        return Err(SmoothError::UnsupportedOrder(order));
    }
    let c = PerronConfig { order: order as u32, probe_pairs: 0, ..cfg.clone() };
    let res = resolve(lin, &c)?;
    let max_r = res.gap.max_r;
    if !(res.gap.holds && (order as f64) < max_r) {
        return Err(SmoothError::GapViolation { order, max_r });
    }
    Ok((c, res))
}

fn jet_dists(u: &[Taylor3], v: &[Taylor3], m: usize, dt: f64, rho: f64, mu: &[f64]) -> Vec<f64> {
    (1..=mu.len())
        .map(|j| {
            let w = j as f64 * rho + mu[j - 1];
            u.chunks(m)
                .zip(v.chunks(m))
                .enumerate()
                .map(|(i, (a, b))| {
                    let d = a.iter().zip(b).map(|(p, q)| (p.c[j] - q.c[j]).abs()).fold(0.0, f64::max);
                    d * (w * i as f64 * dt).exp()
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Taylor coefficients `c_1..c_k` of `s ↦ Θ∞(x0 + s)(0)` and diagnostics.
pub fn derivatives_at(
    lin: &LinearizedSystem,
    cfg: &PerronConfig,
    res: &Resolved,
    x0: f64,
    order: usize,
    mu: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>, DerivDiag), SmoothError> {
    let m = lin.dim_y();
    let (n, dt) = (res.nodes, res.dt);
    let base0 = solve_point(lin, res, cfg, x0, initial_iterate(res, m, cfg.init, 0))?;
    if !base0.diag.converged {
        return Err(SmoothError::Perron(PerronError::Config(format!("base fixed point did not converge at x0 = {x0}"))));
    }
    let xj: Taylor3 = Jet::variable(x0, 1.0);
    let policy = cfg.escape;
    let base = |y: &Vec<f64>| -> Vec<f64> {
        let (mut xb, mut out) = (Vec::new(), Vec::new());
        match t_raw(lin, y, x0, n, dt, policy, &mut xb, &mut out) {
            Ok(_) => out,
            Err(_) => vec![f64::NAN; y.len()],
        }
    };
    let last_ratios = std::cell::RefCell::new(vec![f64::NAN; order]);
    let prev_d = std::cell::RefCell::new(vec![f64::NAN; order]);
    let fiber = |y: &Vec<f64>, jets: &Vec<Taylor3>| -> Vec<Taylor3> {
        let lifted: Vec<Taylor3> = jets
            .iter()
            .zip(y)
            .map(|(j, &v)| {
                let mut c = j.c;
                c[0] = v;
                Jet::from_coeffs(c)
            })
            .collect();
        let (mut xb, mut out) = (Vec::new(), Vec::new());
        match t_raw(lin, &lifted, xj, n, dt, policy, &mut xb, &mut out) {
            Ok(_) => out,
            Err(_) => vec![Taylor3::cst(f64::NAN); y.len()],
        }
    };
    let dist_jets = |a: &Vec<Taylor3>, b: &Vec<Taylor3>| -> f64 {
        let d = jet_dists(a, b, m, dt, res.rho, mu);
        let mut pr = prev_d.borrow_mut();
        let mut lr = last_ratios.borrow_mut();
        for j in 0..order {
            // ratios above the roundoff floor only
            if pr[j].is_finite() && pr[j] > 1e-13 && d[j] > 1e-13 {
                lr[j] = d[j] / pr[j];
            }
            pr[j] = d[j];
        }
        d.into_iter().fold(0.0, f64::max)
    };
    let dist_y = |a: &Vec<f64>, b: &Vec<f64>| weighted_dist(a, b, m, dt, res.rho);
    let init: Vec<Taylor3> = base0.y.iter().map(|&v| Taylor3::cst(v)).collect();
    let fr = fiber_contract(base, fiber, dist_y, dist_jets, base0.y.clone(), init, cfg.tol, cfg.max_iter)?;
    let mut fact = 1.0;
    let mut coeffs = Vec::with_capacity(order);
    for j in 1..=order {
        fact *= j as f64;
        coeffs.push((0..m).map(|c| fact * fr.y[c].c[j]).collect::<Vec<f64>>());
    }
    let diag = DerivDiag { x0, iterations: fr.iterations, ratios: last_ratios.into_inner(), fiber_dist: fr.fiber_dist };
    Ok((fr.x[..m].to_vec(), coeffs, diag))
}

/// Fills `D¹h̃ .. D^k h̃` into a solved graph by fiber contraction at each
/// grid point.
pub fn solve_derivatives(
    lin: &LinearizedSystem,
    cfg: &PerronConfig,
    graph: &ManifoldGraph,
    order: usize,
) -> Result<(ManifoldGraph, DerivativeReport), SmoothError> {
    let (c, res) = derivative_config(lin, cfg, order)?;
    let sc = res.gap.constants;
    let mu = mu_schedule(res.rho, sc.rho_y, order, None);
    let m = lin.dim_y();
    let out: Vec<(Vec<f64>, Vec<Vec<f64>>, DerivDiag)> =
        graph.x_grid.par_iter().map(|&x0| derivatives_at(lin, &c, &res, x0, order, &mu)).collect::<Result<_, _>>()?;
    let mut g = graph.clone();
    g.d_values = (0..order).map(|j| out.iter().flat_map(|o| o.1[j].clone()).collect()).collect();
    debug_assert!(g.d_values.iter().all(|d| d.len() == g.len() * m));
    let report =
        DerivativeReport { order, rho: res.rho, mu, max_r: res.gap.max_r, points: out.into_iter().map(|o| o.2).collect() };
    Ok((g, report))
}

/// Central-difference check of `D^order h̃` against `D^{order-1} h̃`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdCheck {
    pub order: usize,
    pub max_err: f64,
    /// Richardson estimate of the central-difference error.
    pub grid_err: f64,
    pub pass: bool,
}

/// Compares `D^order h̃` with central differences of the next lower order over
/// interior grid points (all points on circles). The grid must be uniform.
pub fn fd_check(graph: &ManifoldGraph, order: usize) -> Result<FdCheck, SmoothError> {
    let lower: &[f64] = if order == 1 { &graph.h_values } else { &graph.d_values[order - 2] };
    let upper = graph.d_values.get(order - 1).ok_or_else(|| SmoothError::Invalid(format!("graph has no order-{order} data")))?;
    let n = graph.len();
    let m = graph.dim_y;
    let h = match graph.circle {
        Some(l) => l / n as f64,
        None => graph.x_grid[1] - graph.x_grid[0],
    };
    let at = |i: isize, c: usize| -> Option<f64> {
        let k = if graph.circle.is_some() { i.rem_euclid(n as isize) as usize } else if i < 0 || i >= n as isize { return None } else { i as usize };
        Some(lower[k * m + c])
    };
    let (mut max_err, mut grid_err): (f64, f64) = (0.0, 0.0);
    for i in 0..n as isize {
        for c in 0..m {
            let (Some(a1), Some(b1)) = (at(i + 1, c), at(i - 1, c)) else { continue };
            let d1 = (a1 - b1) / (2.0 * h);
            max_err = max_err.max((d1 - upper[i as usize * m + c]).abs());
            if let (Some(a2), Some(b2)) = (at(i + 2, c), at(i - 2, c)) {
                let d2 = (a2 - b2) / (4.0 * h);
                grid_err = grid_err.max((d2 - d1).abs() / 3.0);
            }
        }
    }
    Ok(FdCheck { order, max_err, grid_err, pass: max_err <= (1e-4f64).max(10.0 * grid_err) })
}

// ---------------------------------------------------------------------------
// Hölder exponents

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub probe: f64,
    pub order: usize,
    pub alpha: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub residual: f64,
    pub usable: usize,
}

/// `count` dyadic-ish scales spaced geometrically over `[lo, hi]`.
pub fn dyadic_scales(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| lo * (hi / lo).powf(i as f64 / (count - 1).max(1) as f64)).collect()
}

/// Default scales `[1e-3, 1e-1] × width`, 8 of them.
pub fn default_scales(width: f64) -> Vec<f64> {
    dyadic_scales(1e-3 * width, 1e-1 * width, 8)
}

/// Slope of `log max_± |f(x* ± s) - f(x*)|` against `log s`.
pub fn holder_fit(f: impl Fn(f64) -> f64, x_star: f64, order: usize, scales: &[f64]) -> Result<HolderReport, SmoothError> {
    let f0 = f(x_star);
    let noise = 1e-13 * (1.0 + f0.abs());
    let pts: Vec<(f64, f64)> = scales
        .iter()
        .filter_map(|&s| {
            let d = (f(x_star + s) - f0).abs().max((f(x_star - s) - f0).abs());
            (d > noise && d.is_finite()).then(|| (s.ln(), d.ln()))
        })
        .collect();
    if pts.len() < 4 {
        return Err(SmoothError::TooFewScales { usable: pts.len() });
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let alpha = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    let residual = (pts.iter().map(|p| (p.1 - my - alpha * (p.0 - mx)).powi(2)).sum::<f64>() / k).sqrt();
    let lo = scales.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scales.iter().copied().fold(0.0, f64::max);
    Ok(HolderReport { probe: x_star, order, alpha, s_min: lo, s_max: hi, residual, usable: pts.len() })
}

/// Hölder fit of `D^order h̃` read off a solved graph by interpolation.
pub fn holder_exponent(graph: &ManifoldGraph, x_star: f64, order: usize, scales: &[f64]) -> Result<HolderReport, SmoothError> {
    if order > graph.d_values.len() {
        return Err(SmoothError::Invalid(format!("graph has derivatives up to order {}", graph.d_values.len())));
    }
    let interp = graph.interpolant(order);
    holder_fit(|x| interp.eval(x)[0], x_star, order, scales)
}

/// Hölder fit of `D^order h̃` with `h̃` re-solved exactly at `x* ± s` (local
/// refinement). Order 0 fits `h̃` itself.
pub fn holder_refined(
    lin: &LinearizedSystem,
    cfg: &PerronConfig,
    x_star: f64,
    order: usize,
    scales: &[f64],
) -> Result<HolderReport, SmoothError> {
    let mut xs = vec![x_star];
    for &s in scales {
        xs.push(x_star + s);
        xs.push(x_star - s);
    }
    let vals: Vec<f64> = if order == 0 {
        let res = resolve(lin, cfg)?;
        xs.par_iter()
            .map(|&x| -> Result<f64, SmoothError> {
                let p = solve_point(lin, &res, cfg, x, vec![0.0; res.nodes * lin.dim_y()])?;
                Ok(p.y[0])
            })
            .collect::<Result<_, _>>()?
    } else {
        let (c, res) = derivative_config(lin, cfg, order)?;
        let mu = mu_schedule(res.rho, res.gap.constants.rho_y, order, None);
        xs.par_iter()
            .map(|&x| -> Result<f64, SmoothError> { Ok(derivatives_at(lin, &c, &res, x, order, &mu)?.1[order - 1][0]) })
            .collect::<Result<_, _>>()?
    };
    let lookup = |x: f64| -> f64 {
        let k = xs.iter().position(|v| *v == x).expect("probe abscissa");
        vals[k]
    };
    holder_fit(lookup, x_star, order, scales)
}
