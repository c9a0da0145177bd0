//! Hadamard graph transform: push a graph forward by the time-`τ` flow and
//! read the image back off as a graph over the same grid.
//!
//! Fields are treated as autonomous: every step flows from `t = 0`.

use crate::interp::{Pchip, PeriodicSpline};
use crate::perron::{gap_for, ManifoldGraph, Method, PerronError};
use crate::system::{LinearizedSystem, SystemError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone)]
pub enum GtError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Perron(#[from] PerronError),
    #[error("{0}")]
    Config(String),
    #[error("flowed samples cover only [{lo}, {hi}] of the window [{want_lo}, {want_hi}]")]
    CoverageGap { lo: f64, hi: f64, want_lo: f64, want_hi: f64 },
    #[error("flowed samples fold over near x = {x}")]
    FoldOver { x: f64 },
    #[error("graph left the tube |y| <= {eta} near x = {x}")]
    TubeExit { x: f64, eta: f64 },
    #[error("non-finite state while flowing from x = {x}")]
    NonFinite { x: f64 },
    #[error("graph transform did not converge in {iterations} steps (last change {diff:e})")]
    NotConverged { iterations: usize, diff: f64, graph: Box<ManifoldGraph> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtConfig {
    /// Step time; `1/|ρ_Y - ρ_X|` when unset.
    pub tau: Option<f64>,
    /// RK4 step inside one flow map.
    pub dt: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub eta: Option<f64>,
}

impl Default for GtConfig {
    fn default() -> Self {
        GtConfig { tau: None, dt: 0.01, tol: 1e-10, max_iter: 2000, eta: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphIterate {
    pub x_grid: Vec<f64>,
    pub dim_y: usize,
    /// Row-major `g(x_i)`.
    pub g_values: Vec<f64>,
    pub tau: f64,
    pub lipschitz: f64,
}

impl GraphIterate {
    pub fn zero(x_grid: Vec<f64>, dim_y: usize, tau: f64) -> Self {
        let n = x_grid.len();
        GraphIterate { x_grid, dim_y, g_values: vec![0.0; n * dim_y], tau, lipschitz: 0.0 }
    }

    pub fn g(&self, i: usize) -> &[f64] {
        &self.g_values[i * self.dim_y..(i + 1) * self.dim_y]
    }
}

/// Per-run record of the iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtReport {
    pub tau: f64,
    pub iterations: usize,
    pub diffs: Vec<f64>,
    pub lipschitz: Vec<f64>,
    /// Lipschitz seminorm of `g_{k+1} - g_k`.
    pub lip_change: Vec<f64>,
}

/// Default step time `min(1/|ρ_Y - ρ_X|, 1/ρ_M)` from the order-1 rates. The
/// second bound keeps the tangential stretching of one step below `e`, so
/// flowed samples stay dense enough to re-interpolate.
pub fn default_tau(lin: &LinearizedSystem) -> Result<f64, GtError> {
    let sc = gap_for(lin, 1)?.constants;
    let gap = (sc.rho_y - sc.rho_x).abs();
    if !(gap > 0.0) {
        return Err(GtError::Config("no rate gap to set the step time".into()));
    }
    Ok((1.0 / gap).min(1.0 / sc.rho_m))
}

/// Time-`tau` flow of the decomposed system from `(x, y)`.
pub fn flow_map(lin: &LinearizedSystem, x: f64, y: &[f64], tau: f64, dt: f64) -> Result<(f64, Vec<f64>), GtError> {
    let m = lin.dim_y();
    let steps = (tau / dt).ceil().max(1.0) as usize;
    let h = tau / steps as f64;
    let mut z: Vec<f64> = std::iter::once(x).chain(y.iter().copied()).collect();
    let f = |t: f64, z: &[f64], out: &mut [f64]| -> Result<(), SystemError> {
        let (xo, yo) = out.split_at_mut(1);
        let mut buf = vec![0.0; m + 1];
        lin.eval(t, z[0], &z[1..], &mut buf)?;
        xo[0] = buf[0];
        yo.copy_from_slice(&buf[1..]);
        Ok(())
    };
    let d = m + 1;
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for s in 0..steps {
        let t = s as f64 * h;
        f(t, &z, &mut k1)?;
        for j in 0..d {
            tmp[j] = z[j] + 0.5 * h * k1[j];
        }
        f(t + 0.5 * h, &tmp, &mut k2)?;
        for j in 0..d {
            tmp[j] = z[j] + 0.5 * h * k2[j];
        }
        f(t + 0.5 * h, &tmp, &mut k3)?;
        for j in 0..d {
            tmp[j] = z[j] + h * k3[j];
        }
        f(t + h, &tmp, &mut k4)?;
        for j in 0..d {
            z[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(GtError::NonFinite { x });
        }
    }
    Ok((z[0], z[1..].to_vec()))
}

fn lipschitz(xs: &[f64], g: &[f64], m: usize, circle: Option<f64>) -> f64 {
    let n = xs.len();
    let pairs = if circle.is_some() { n } else { n.saturating_sub(1) };
    (0..pairs)
        .map(|i| {
            let j = (i + 1) % n;
            let dx = match circle {
                Some(l) => {
                    let r = (xs[j] - xs[i]).rem_euclid(l);
                    r.min(l - r)
                }
                None => (xs[j] - xs[i]).abs(),
            };
            let dg: f64 = (0..m).map(|c| (g[j * m + c] - g[i * m + c]).powi(2)).sum::<f64>().sqrt();
            dg / dx.max(1e-300)
        })
        .fold(0.0, f64::max)
}

/// One graph-transform step with flow step `dt` and tube radius `eta`.
pub fn transform_step(lin: &LinearizedSystem, g: &GraphIterate, dt: f64, eta: f64) -> Result<GraphIterate, GtError> {
    let m = g.dim_y;
    let n = g.x_grid.len();
    if n < 3 {
        return Err(GtError::Config("graph transform needs at least 3 grid points".into()));
    }
    let images: Vec<(f64, Vec<f64>)> =
        (0..n).into_par_iter().map(|i| flow_map(lin, g.x_grid[i], g.g(i), g.tau, dt)).collect::<Result<_, _>>()?;
    let xs: Vec<f64> = images.iter().map(|p| p.0).collect();
    let circle = lin.domain().circumference();
    // orientation and fold checks
    for i in 0..n - 1 {
        if !(xs[i + 1] > xs[i]) {
            return Err(GtError::FoldOver { x: g.x_grid[i] });
        }
    }
    match circle {
        Some(l) => {
            if !(xs[n - 1] - xs[0] < l) {
                return Err(GtError::FoldOver { x: g.x_grid[n - 1] });
            }
        }
        None => {
            let (want_lo, want_hi) = (g.x_grid[0], g.x_grid[n - 1]);
            let slack = 1e-12 * (1.0 + want_hi.abs().max(want_lo.abs()));
            if xs[0] > want_lo + slack || xs[n - 1] < want_hi - slack {
                return Err(GtError::CoverageGap { lo: xs[0], hi: xs[n - 1], want_lo, want_hi });
            }
        }
    }
    let mut out = vec![0.0; n * m];
    for c in 0..m {
        let ys: Vec<f64> = images.iter().map(|p| p.1[c]).collect();
        let eval: Box<dyn Fn(f64) -> f64> = match circle {
            Some(l) => {
                let s = PeriodicSpline::new(xs.clone(), ys, l);
                Box::new(move |x| s.eval(x))
            }
            None => {
                let s = Pchip::new(xs.clone(), ys);
                Box::new(move |x| s.eval(x))
            }
        };
        for (i, &x) in g.x_grid.iter().enumerate() {
            out[i * m + c] = eval(x);
        }
    }
    for i in 0..n {
        let r = crate::system::norm(&out[i * m..(i + 1) * m]);
        if !r.is_finite() {
            return Err(GtError::NonFinite { x: g.x_grid[i] });
        }
        if r > eta {
            return Err(GtError::TubeExit { x: g.x_grid[i], eta });
        }
    }
    let lip = lipschitz(&g.x_grid, &out, m, circle);
    Ok(GraphIterate { x_grid: g.x_grid.clone(), dim_y: m, g_values: out, tau: g.tau, lipschitz: lip })
}

/// Iterates the transform from `g ≡ 0` until the sup-change drops below `tol`.
pub fn solve_gt(lin: &LinearizedSystem, cfg: &GtConfig, x_grid: &[f64]) -> Result<(ManifoldGraph, GtReport), GtError> {
    if !(cfg.dt > 0.0 && cfg.tol > 0.0 && cfg.max_iter > 0) {
        return Err(GtError::Config("dt, tol and max_iter must be positive".into()));
    }
    let tau = match cfg.tau {
        Some(t) if t > 0.0 => t,
        Some(t) => return Err(GtError::Config(format!("step time tau = {t} must be positive"))),
        None => default_tau(lin)?,
    };
    let eta = cfg.eta.unwrap_or(lin.spec.eta);
    let m = lin.dim_y();
    let circle = lin.domain().circumference();
    let mut g = GraphIterate::zero(x_grid.to_vec(), m, tau);
    let mut report = GtReport { tau, iterations: 0, diffs: Vec::new(), lipschitz: Vec::new(), lip_change: Vec::new() };
    for it in 1..=cfg.max_iter {
        let next = transform_step(lin, &g, cfg.dt, eta)?;
        let diff = next.g_values.iter().zip(&g.g_values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        report.iterations = it;
        report.diffs.push(diff);
        report.lipschitz.push(next.lipschitz);
        let delta: Vec<f64> = next.g_values.iter().zip(&g.g_values).map(|(a, b)| a - b).collect();
        report.lip_change.push(lipschitz(x_grid, &delta, m, circle));
        g = next;
        if diff < cfg.tol {
            let graph = ManifoldGraph::new(g.x_grid, m, g.g_values, Method::GraphTransform, circle, cfg.tol);
            return Ok((graph, report));
        }
    }
    let diff = report.diffs.last().copied().unwrap_or(f64::NAN);
    let graph = ManifoldGraph::new(g.x_grid, m, g.g_values, Method::GraphTransform, circle, cfg.tol);
    Err(GtError::NotConverged { iterations: cfg.max_iter, diff, graph: Box::new(graph) })
}
