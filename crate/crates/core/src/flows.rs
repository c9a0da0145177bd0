//! Fixed-step RK4 flows: the horizontal flow along a vertical curve, the
//! linear vertical flow, variational hierarchies, growth fits and the
//! nonlinear variation-of-constants identity.

use crate::curves::{CurveError, ExpCurve, TimeGrid};
use crate::interp::uniform_midpoint;
use crate::jet::{Dual, Jet, Scalar, Taylor3};
use crate::linalg::{frobenius, identity, inverse, matmul, matvec};
use crate::system::{DomainKind, FieldLift, FieldScalar, LinearizedSystem, SystemError, SystemSpec};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("trajectory left the window on the {side:?} at t = {t} (x = {x})")]
    Escape { t: f64, x: f64, side: Side },
    #[error("derivative order {0} is not supported (at most 3)")]
    UnsupportedOrder(usize),
    #[error("degenerate samples: {0}")]
    Degenerate(String),
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("step halving did not reach tolerance {tol} (last difference {diff})")]
    NoConvergence { tol: f64, diff: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Left,
    Right,
}

/// A trajectory leaving a line window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Escape {
    pub t: f64,
    pub x: f64,
    pub side: Side,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EscapePolicy {
    /// Report the exit as an error.
    #[default]
    Abort,
    /// Hold the trajectory at the boundary it reached and record the side.
    Clamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegratorStats {
    pub steps: usize,
    /// Difference between the last two step-halving answers.
    pub max_local_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowOptions {
    /// Initial RK4 step; halved until successive answers agree to `tol`.
    pub dt: f64,
    pub tol: f64,
    /// Number of output intervals.
    pub samples: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { dt: 0.01, tol: 1e-10, samples: 100 }
    }
}

/// Trajectory with its first and higher derivatives at sampled times.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub times: Vec<f64>,
    pub dim: usize,
    pub states: Vec<f64>,
    /// `DΦ(t, t0)` row-major per sample (empty if unavailable).
    pub tangent: Vec<f64>,
    /// `D^{j+2}Φ` as flattened tensors `[sample][out][in]...[in]`.
    pub higher: Vec<Vec<f64>>,
    pub stats: IntegratorStats,
    pub escape: Option<Escape>,
    pub circle: Option<f64>,
}

impl FlowResult {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn tangent_at(&self, i: usize) -> &[f64] {
        let n2 = self.dim * self.dim;
        &self.tangent[i * n2..(i + 1) * n2]
    }

    pub fn tangent_norms(&self) -> Vec<f64> {
        (0..self.len()).map(|i| frobenius(self.tangent_at(i))).collect()
    }

    /// Frobenius norms of `D^order Φ` per sample.
    pub fn higher_norms(&self, order: usize) -> Option<Vec<f64>> {
        let t = self.higher.get(order.checked_sub(2)?)?;
        let size = self.dim.pow(order as u32 + 1);
        Some(t.chunks(size).map(frobenius).collect())
    }

    /// Entry `D^order Φ_out(e_idx[0], ..)` at sample `i` (order >= 2).
    pub fn higher_entry(&self, order: usize, i: usize, out: usize, idx: &[usize]) -> f64 {
        let n = self.dim;
        let mut k = i * n + out;
        for &a in idx {
            k = k * n + a;
        }
        self.higher[order - 2][k]
    }

    /// Backward trajectory starting at `t = 0` as a curve.
    pub fn trajectory(&self) -> Result<ExpCurve, CurveError> {
        let nodes: Vec<f64> = self.times.clone();
        let grid = TimeGrid::uniform(-nodes[nodes.len() - 1], -nodes[1])?;
        let c = ExpCurve::new(grid, self.dim, self.states.clone(), 0.0)?;
        Ok(match self.circle {
            Some(l) if self.dim == 1 => ExpCurve { circle: Some(l), ..c },
            _ => c,
        })
    }

    /// CSV with columns `t, z..., |DΦ|, |D^2Φ|, ...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for c in 0..self.dim {
            let _ = write!(s, ",z{c}");
        }
        let tn = (!self.tangent.is_empty()).then(|| self.tangent_norms());
        if tn.is_some() {
            s.push_str(",norm_d1");
        }
        let hn: Vec<Vec<f64>> = (2..2 + self.higher.len()).filter_map(|k| self.higher_norms(k)).collect();
        for k in 0..hn.len() {
            let _ = write!(s, ",norm_d{}", k + 2);
        }
        s.push('\n');
        for i in 0..self.len() {
            let _ = write!(s, "{:.16e}", self.times[i]);
            for v in self.state(i) {
                let _ = write!(s, ",{v:.16e}");
            }
            if let Some(t) = &tn {
                let _ = write!(s, ",{:.16e}", t[i]);
            }
            for h in &hn {
                let _ = write!(s, ",{:.16e}", h[i]);
            }
            s.push('\n');
        }
        s
    }
}

/// Least-squares fit `log |DΦ(t)| ≈ log C + rho (t - t0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthEstimate {
    pub rho_hat: f64,
    /// Smallest `C` with `|DΦ(t)| <= C e^{rho_hat (t - t0)}` on the window.
    pub c_hat: f64,
    pub window: (f64, f64),
    pub residual: f64,
}

/// Which block of `DΦ` a growth fit looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Full,
    /// The `X` entry.
    Tangential,
    /// The `Y × Y` block.
    Normal,
}

// ---------------------------------------------------------------------------
// RK4 kernels

fn rk4_step<S: FieldScalar>(spec: &SystemSpec, t: f64, z: &mut [S], h: f64, k: &mut [Vec<S>; 5]) -> Result<(), SystemError> {
    let n = z.len();
    let [k1, k2, k3, k4, tmp] = k;
    spec.eval(t, z, k1)?;
    for i in 0..n {
        tmp[i] = z[i] + k1[i] * (0.5 * h);
    }
    spec.eval(t + 0.5 * h, tmp, k2)?;
    for i in 0..n {
        tmp[i] = z[i] + k2[i] * (0.5 * h);
    }
    spec.eval(t + 0.5 * h, tmp, k3)?;
    for i in 0..n {
        tmp[i] = z[i] + k3[i] * h;
    }
    spec.eval(t + h, tmp, k4)?;
    for i in 0..n {
        z[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0);
    }
    Ok(())
}

fn scratch<S: Scalar>(n: usize) -> [Vec<S>; 5] {
    std::array::from_fn(|_| vec![S::zero(); n])
}

/// Integrates the full field with `steps` RK4 steps from `t0` to `t1`.
pub fn integrate<S: FieldScalar>(spec: &SystemSpec, z0: &[S], t0: f64, t1: f64, steps: usize) -> Result<Vec<S>, FlowError> {
    let mut z = z0.to_vec();
    let h = (t1 - t0) / steps.max(1) as f64;
    let mut k = scratch(z.len());
    for s in 0..steps.max(1) {
        rk4_step(spec, t0 + s as f64 * h, &mut z, h, &mut k)?;
    }
    if z.iter().any(|v| !v.value().is_finite()) {
        return Err(FlowError::NonFinite { t: t1 });
    }
    Ok(z)
}

/// States at each of `times`, with `substeps` RK4 steps per interval.
pub fn integrate_path<S: FieldScalar>(
    spec: &SystemSpec,
    z0: &[S],
    times: &[f64],
    substeps: usize,
) -> Result<Vec<Vec<S>>, FlowError> {
    let mut out = vec![z0.to_vec()];
    let mut z = z0.to_vec();
    let mut k = scratch(z.len());
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            rk4_step(spec, w[0] + s as f64 * h, &mut z, h, &mut k)?;
        }
        if z.iter().any(|v| !v.value().is_finite()) {
            return Err(FlowError::NonFinite { t: w[1] });
        }
        out.push(z.clone());
    }
    Ok(out)
}

fn path_scale<S: Scalar>(a: &[Vec<S>]) -> f64 {
    a.iter().flatten().map(|v| v.dist(S::zero())).fold(0.0, f64::max)
}

fn path_dist<S: Scalar>(a: &[Vec<S>], b: &[Vec<S>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(u, v)| u.iter().zip(v).map(|(p, q)| p.dist(*q)))
        .fold(0.0, f64::max)
}

/// [`integrate_path`] with step halving until two answers agree to `tol`.
pub fn integrate_path_tol<S: FieldScalar>(
    spec: &SystemSpec,
    z0: &[S],
    times: &[f64],
    dt: f64,
    tol: f64,
) -> Result<(Vec<Vec<S>>, IntegratorStats), FlowError> {
    let span = times.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let mut sub = ((span / dt).ceil() as usize).max(1);
    let mut prev = integrate_path(spec, z0, times, sub)?;
    let mut diff = f64::INFINITY;
    for _ in 0..14 {
        sub *= 2;
        let next = integrate_path(spec, z0, times, sub)?;
        diff = path_dist(&prev, &next);
        prev = next;
        if diff < tol * (1.0 + path_scale(&prev)) {
            let steps = sub * (times.len() - 1);
            return Ok((prev, IntegratorStats { steps, max_local_error: diff }));
        }
    }
    Err(FlowError::NoConvergence { tol, diff })
}

fn sample_times(t0: f64, t1: f64, samples: usize) -> Vec<f64> {
    let n = samples.max(1);
    (0..=n).map(|i| t0 + (t1 - t0) * i as f64 / n as f64).collect()
}

// ---------------------------------------------------------------------------
// Horizontal and vertical kernels on uniform backward grids

fn window_bounds(lin: &LinearizedSystem) -> Option<(f64, f64)> {
    match lin.domain().kind {
        DomainKind::LineWindow { lo, hi } => Some((lo, hi)),
        DomainKind::Circle { .. } => None,
    }
}

/// Backward horizontal flow `x' = v_X(x, y(t))` from `x(0) = x0` on the
/// uniform grid `t_i = -i dt`. `y` holds `n` nodes of `m` components.
pub(crate) fn horizontal_path<S: FieldScalar>(
    lin: &LinearizedSystem,
    y: &[S],
    n: usize,
    dt: f64,
    x0: S,
    policy: EscapePolicy,
    out: &mut Vec<S>,
) -> Result<Option<Escape>, FlowError> {
    let m = lin.dim_y();
    let bounds = window_bounds(lin);
    out.clear();
    out.push(x0);
    let mut z = vec![S::zero(); m + 1];
    let mut f = vec![S::zero(); m + 1];
    let mut ymid = vec![S::zero(); m];
    let mut escape = None;
    // time-reversed field g(s, x) = -v_X(x, y(-s)), s = -t
    let g = |t: f64, x: S, yv: &[S], z: &mut Vec<S>, f: &mut Vec<S>| -> Result<S, SystemError> {
        z[0] = x;
        z[1..].copy_from_slice(yv);
        lin.spec.eval(t, z, f)?;
        Ok(-f[0])
    };
    let mut x = x0;
    for i in 0..n - 1 {
        if escape.is_some() {
            out.push(x);
            continue;
        }
        let t = -(i as f64) * dt;
        for c in 0..m {
            ymid[c] = uniform_midpoint(y, n, m, c, i);
        }
        let y0 = &y[i * m..(i + 1) * m];
        let y1 = &y[(i + 1) * m..(i + 2) * m];
        let k1 = g(t, x, y0, &mut z, &mut f)?;
        let k2 = g(t - 0.5 * dt, x + k1 * (0.5 * dt), &ymid, &mut z, &mut f)?;
        let k3 = g(t - 0.5 * dt, x + k2 * (0.5 * dt), &ymid, &mut z, &mut f)?;
        let k4 = g(t - dt, x + k3 * dt, y1, &mut z, &mut f)?;
        x += (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
        let xv = x.value();
        if !xv.is_finite() {
            return Err(FlowError::NonFinite { t: t - dt });
        }
        if let Some((lo, hi)) = bounds {
            if xv < lo || xv > hi {
                let side = if xv < lo { Side::Left } else { Side::Right };
                let e = Escape { t: t - dt, x: xv, side };
                match policy {
                    EscapePolicy::Abort => return Err(FlowError::Escape { t: e.t, x: xv, side }),
                    EscapePolicy::Clamp => {
                        x = S::cst(if xv < lo { lo } else { hi });
                        escape = Some(e);
                    }
                }
            }
        }
        out.push(x);
    }
    Ok(escape)
}

/// Forward solve of `u' = A(x(t)) u + F(t)` from `u(-T) = 0` on the uniform
/// backward grid, where `F` is evaluated by `forcing` at nodes (index) and
/// cell midpoints (index of the cell's upper node, `mid = true`).
pub(crate) fn vertical_solve<S: FieldLift>(
    lin: &LinearizedSystem,
    x: &[S],
    n: usize,
    dt: f64,
    mut forcing: impl FnMut(usize, bool, S, &[S]) -> Result<Vec<S>, SystemError>,
    out: &mut Vec<S>,
) -> Result<(), FlowError> {
    let m = lin.dim_y();
    out.clear();
    out.resize(n * m, S::zero());
    let mut u = vec![S::zero(); m];
    let mut node_cache = {
        let t = -((n - 1) as f64) * dt;
        let xn = x[n - 1];
        let a = lin.a_matrix(xn, t)?;
        let f = forcing(n - 1, false, xn, &a)?;
        (a, f)
    };
    let mut tmp = vec![S::zero(); m];
    let mut k = [vec![S::zero(); m], vec![S::zero(); m], vec![S::zero(); m], vec![S::zero(); m]];
    let rhs = |a: &[S], f: &[S], u: &[S], out: &mut [S]| {
        matvec(a, u, out);
        for (o, fi) in out.iter_mut().zip(f) {
            *o += *fi;
        }
    };
    for i in (0..n - 1).rev() {
        let t1 = -(i as f64) * dt;
        let tm = t1 - 0.5 * dt;
        let xm = uniform_midpoint(x, n, 1, 0, i);
        let am = lin.a_matrix(xm, tm)?;
        let fm = forcing(i, true, xm, &am)?;
        let a1 = lin.a_matrix(x[i], t1)?;
        let f1 = forcing(i, false, x[i], &a1)?;
        let (a0, f0) = &node_cache;
        rhs(a0, f0, &u, &mut k[0]);
        for c in 0..m {
            tmp[c] = u[c] + k[0][c] * (0.5 * dt);
        }
        rhs(&am, &fm, &tmp, &mut k[1]);
        for c in 0..m {
            tmp[c] = u[c] + k[1][c] * (0.5 * dt);
        }
        rhs(&am, &fm, &tmp, &mut k[2]);
        for c in 0..m {
            tmp[c] = u[c] + k[2][c] * dt;
        }
        rhs(&a1, &f1, &tmp, &mut k[3]);
        for c in 0..m {
            u[c] += (k[0][c] + (k[1][c] + k[2][c]) * 2.0 + k[3][c]) * (dt / 6.0);
            if !u[c].value().is_finite() {
                return Err(FlowError::NonFinite { t: t1 });
            }
        }
        out[i * m..(i + 1) * m].copy_from_slice(&u);
        node_cache = (a1, f1);
    }
    Ok(())
}

fn uniform_step(grid: &TimeGrid) -> Result<f64, FlowError> {
    grid.dt().ok_or_else(|| FlowError::Degenerate("curve grid must be uniform".into()))
}

// ---------------------------------------------------------------------------
// Public flows

/// Solves `x' = v_X(x, y(t))` backward from `(0, x0)` to `t_end <= 0` on the
/// grid of `y`. The tangent `DΦ_y(t, 0, x0)` is carried along when the field
/// supports first-order jets.
pub fn flow_x(lin: &LinearizedSystem, y: &ExpCurve, x0: f64, t_end: f64, policy: EscapePolicy) -> Result<FlowResult, FlowError> {
    let dt = uniform_step(&y.grid)?;
    let n_all = y.len();
    let n = (((-t_end) / dt).round() as usize + 1).clamp(2, n_all);
    let yd: Vec<Dual> = y.values[..n * y.dim].iter().map(|&v| Dual::cst(v)).collect();
    let mut path = Vec::with_capacity(n);
    let escape = horizontal_path(lin, &yd, n, dt, Jet::variable(x0, 1.0), policy, &mut path)?;
    Ok(FlowResult {
        times: y.grid.nodes()[..n].to_vec(),
        dim: 1,
        states: path.iter().map(|p| p.c[0]).collect(),
        tangent: path.iter().map(|p| p.c[1]).collect(),
        higher: Vec::new(),
        stats: IntegratorStats { steps: n - 1, max_local_error: 0.0 },
        escape,
        circle: lin.domain().circumference(),
    })
}

/// Fundamental solution `Ψ_x(t, t0)` of `y' = A(x(t)) y` (row-major `m × m`).
pub fn flow_y_linear(lin: &LinearizedSystem, x: &ExpCurve, t: f64, t0: f64) -> Result<Vec<f64>, FlowError> {
    let m = lin.dim_y();
    let lo = -x.grid.t_max();
    for s in [t, t0] {
        if s < lo - 1e-12 || s > 1e-12 {
            return Err(CurveError::OutsideSupport { a: s, lo }.into());
        }
    }
    let dt = x.grid.nodes().windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min);
    let run = |steps: usize| -> Result<Vec<f64>, FlowError> {
        let h = (t - t0) / steps as f64;
        let mut psi = identity::<f64>(m);
        let a_at = |s: f64| -> Result<Vec<f64>, FlowError> {
            let a = lin.a_matrix(x.eval(s)[0], s)?;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::NonFinite { t: s });
            }
            Ok(a)
        };
        for k in 0..steps {
            let s = t0 + k as f64 * h;
            let a0 = a_at(s)?;
            let am = a_at(s + 0.5 * h)?;
            let a1 = a_at(s + h)?;
            let k1 = matmul(&a0, &psi, m, m, m);
            let p2: Vec<f64> = psi.iter().zip(&k1).map(|(p, k)| p + 0.5 * h * k).collect();
            let k2 = matmul(&am, &p2, m, m, m);
            let p3: Vec<f64> = psi.iter().zip(&k2).map(|(p, k)| p + 0.5 * h * k).collect();
            let k3 = matmul(&am, &p3, m, m, m);
            let p4: Vec<f64> = psi.iter().zip(&k3).map(|(p, k)| p + h * k).collect();
            let k4 = matmul(&a1, &p4, m, m, m);
            for i in 0..m * m {
                psi[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        Ok(psi)
    };
    if t == t0 {
        return Ok(identity(m));
    }
    let mut steps = (((t - t0).abs() / dt).ceil() as usize).max(1);
    let mut prev = run(steps)?;
    for _ in 0..10 {
        steps *= 2;
        let next = run(steps)?;
        let diff = prev.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prev = next;
        if diff < 1e-12 * (1.0 + frobenius(&prev)) {
            break;
        }
    }
    Ok(prev)
}

/// Directions `sum_k e_{idx_k}` as count vectors.
fn direction(n: usize, idx: &[usize]) -> Vec<u8> {
    let mut d = vec![0u8; n];
    for &i in idx {
        d[i] += 1;
    }
    d
}

/// Integrates the variational hierarchy of order `order <= 3` along the
/// trajectory through `z0`.
pub fn tangent_flow(spec: &SystemSpec, z0: &[f64], t0: f64, t1: f64, order: usize, opts: FlowOptions) -> Result<FlowResult, FlowError> {
    if order > 3 {
        return Err(FlowError::UnsupportedOrder(order));
    }
    let n = spec.dim();
    let times = sample_times(t0, t1, opts.samples);
    let ns = times.len();
    let mut states = Vec::new();
    let mut tangent = vec![0.0; ns * n * n];
    let mut stats = IntegratorStats::default();
    if order >= 1 {
        for col in 0..n {
            let zd: Vec<Dual> = (0..n).map(|i| Jet::variable(z0[i], if i == col { 1.0 } else { 0.0 })).collect();
            let (path, st) = integrate_path_tol(spec, &zd, &times, opts.dt, opts.tol)?;
            stats.steps += st.steps;
            stats.max_local_error = stats.max_local_error.max(st.max_local_error);
            for (s, z) in path.iter().enumerate() {
                for row in 0..n {
                    tangent[(s * n + row) * n + col] = z[row].c[1];
                }
            }
            if col == 0 {
                states = path.iter().flat_map(|z| z.iter().map(|d| d.c[0])).collect();
            }
        }
    } else {
        let (path, st) = integrate_path_tol(spec, z0, &times, opts.dt, opts.tol)?;
        stats = st;
        states = path.into_iter().flatten().collect();
    }
    let mut higher = Vec::new();
    if order >= 2 {
        // p_k(v) = D^kΦ(v, .., v) from third-order jets along v, cached per direction
        let mut cache: HashMap<Vec<u8>, Vec<Vec<Taylor3>>> = HashMap::new();
        let mut along = |d: &[u8]| -> Result<Vec<Vec<Taylor3>>, FlowError> {
            if let Some(p) = cache.get(d) {
                return Ok(p.clone());
            }
            let zt: Vec<Taylor3> = (0..n).map(|i| Jet::variable(z0[i], d[i] as f64)).collect();
            let (path, _) = integrate_path_tol(spec, &zt, &times, opts.dt, opts.tol)?;
            cache.insert(d.to_vec(), path.clone());
            Ok(path)
        };
        let mut d2 = vec![0.0; ns * n * n * n];
        for a in 0..n {
            for b in a..n {
                let pab = along(&direction(n, &[a, b]))?;
                let pa = along(&direction(n, &[a]))?;
                let pb = along(&direction(n, &[b]))?;
                for s in 0..ns {
                    for o in 0..n {
                        let q = |p: &Vec<Vec<Taylor3>>| p[s][o].derivative(2);
                        let v = if a == b { q(&pa) } else { 0.5 * (q(&pab) - q(&pa) - q(&pb)) };
                        d2[((s * n + o) * n + a) * n + b] = v;
                        d2[((s * n + o) * n + b) * n + a] = v;
                    }
                }
            }
        }
        higher.push(d2);
        if order == 3 {
            let mut d3 = vec![0.0; ns * n * n * n * n];
            for a in 0..n {
                for b in a..n {
                    for c in b..n {
                        let mut p = |idx: &[usize]| -> Result<Vec<Vec<Taylor3>>, FlowError> { along(&direction(n, idx)) };
                        let terms = [
                            (p(&[a, b, c])?, 1.0),
                            (p(&[a, b])?, -1.0),
                            (p(&[a, c])?, -1.0),
                            (p(&[b, c])?, -1.0),
                            (p(&[a])?, 1.0),
                            (p(&[b])?, 1.0),
                            (p(&[c])?, 1.0),
                        ];
                        for s in 0..ns {
                            for o in 0..n {
                                let v = terms.iter().map(|(path, w)| w * path[s][o].derivative(3)).sum::<f64>() / 6.0;
                                for perm in permutations3(a, b, c) {
                                    d3[(((s * n + o) * n + perm[0]) * n + perm[1]) * n + perm[2]] = v;
                                }
                            }
                        }
                    }
                }
            }
            higher.push(d3);
        }
    }
    Ok(FlowResult { times, dim: n, states, tangent: if order >= 1 { tangent } else { Vec::new() }, higher, stats, escape: None, circle: None })
}

fn permutations3(a: usize, b: usize, c: usize) -> [[usize; 3]; 6] {
    [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]]
}

/// Fits `log norms` against `ts` (relative to `ts[0]`'s origin `t0`).
pub fn fit_growth(ts: &[f64], norms: &[f64], t0: f64) -> Result<GrowthEstimate, FlowError> {
    if ts.len() < 10 || ts.len() != norms.len() {
        return Err(FlowError::Degenerate(format!("need at least 10 samples, got {}", ts.len())));
    }
    if norms.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(FlowError::Degenerate("norms must be positive and finite".into()));
    }
    let k = ts.len() as f64;
    let xs: Vec<f64> = ts.iter().map(|t| t - t0).collect();
    let ls: Vec<f64> = norms.iter().map(|v| v.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let ml = ls.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 1e-300 {
        return Err(FlowError::Degenerate("all sample times are equal".into()));
    }
    let sxl: f64 = xs.iter().zip(&ls).map(|(x, l)| (x - mx) * (l - ml)).sum();
    let rho = sxl / sxx;
    let icpt = ml - rho * mx;
    let residual = (xs.iter().zip(&ls).map(|(x, l)| (l - icpt - rho * x).powi(2)).sum::<f64>() / k).sqrt();
    let c_hat = xs.iter().zip(norms).map(|(x, v)| v * (-rho * x).exp()).fold(0.0, f64::max);
    let (a, b) = (ts[0].min(ts[ts.len() - 1]), ts[0].max(ts[ts.len() - 1]));
    Ok(GrowthEstimate { rho_hat: rho, c_hat, window: (a, b), residual })
}

/// Growth fit of `|DΦ|` (restricted to `block`) over the samples on the
/// requested side of the initial time.
pub fn estimate_growth(fr: &FlowResult, direction: Direction, block: Block) -> Result<GrowthEstimate, FlowError> {
    if fr.tangent.is_empty() {
        return Err(FlowError::Degenerate("flow carries no tangent".into()));
    }
    let t0 = fr.times[0];
    let n = fr.dim;
    let mut ts = Vec::new();
    let mut vs = Vec::new();
    for i in 0..fr.len() {
        let dt = fr.times[i] - t0;
        let keep = match direction {
            Direction::Forward => dt >= 0.0,
            Direction::Backward => dt <= 0.0,
        };
        if !keep {
            continue;
        }
        let tan = fr.tangent_at(i);
        let v = match block {
            Block::Full => frobenius(tan),
            Block::Tangential => tan[0].abs(),
            Block::Normal => {
                let sub: Vec<f64> = (1..n).flat_map(|r| (1..n).map(move |c| (r, c))).map(|(r, c)| tan[r * n + c]).collect();
                frobenius(&sub)
            }
        };
        ts.push(fr.times[i]);
        vs.push(v);
    }
    fit_growth(&ts, &vs, t0)
}

/// Residual of the nonlinear variation-of-constants formula
/// `Φ_r(t) - Φ(t) - ∫ DΦ(t, τ, Φ_r(τ)) r(τ, Φ_r(τ)) dτ` with an `n_quad`-panel
/// trapezoid rule.
pub fn alekseev_residual(
    spec: &SystemSpec,
    r: &(dyn Fn(f64, &[f64], &mut [f64]) + Sync),
    z0: &[f64],
    t0: f64,
    t: f64,
    n_quad: usize,
) -> Result<f64, FlowError> {
    let n = spec.dim();
    let field = spec.field();
    let perturbed = |tt: f64, z: &[f64], out: &mut [f64]| {
        field.eval(tt, z, out);
        let mut extra = vec![0.0; z.len()];
        r(tt, z, &mut extra);
        for (o, e) in out.iter_mut().zip(&extra) {
            *o += e;
        }
    };
    let taus = sample_times(t0, t, n_quad);
    let tol = 1e-12;
    let zr = closure_path_tol(&perturbed, z0, &taus, 0.01, tol)?;
    let (zu, _) = integrate_path_tol(spec, z0, &[t0, t], 0.01, tol)?;
    let h = (t - t0) / n_quad as f64;
    let mut integral = vec![0.0; n];
    for (j, tau) in taus.iter().enumerate() {
        let w = if j == 0 || j == n_quad { 0.5 * h } else { h };
        let mut rv = vec![0.0; n];
        r(*tau, &zr[j], &mut rv);
        let jac = if j == n_quad { identity::<f64>(n) } else { transition(spec, &zr[j], *tau, t, tol)? };
        let mut g = vec![0.0; n];
        matvec(&jac, &rv, &mut g);
        for i in 0..n {
            integral[i] += w * g[i];
        }
    }
    let zr_t = &zr[n_quad];
    let zu_t = &zu[1];
    Ok((0..n).map(|i| (zr_t[i] - zu_t[i] - integral[i]).powi(2)).sum::<f64>().sqrt())
}

fn closure_path(f: &dyn Fn(f64, &[f64], &mut [f64]), z0: &[f64], times: &[f64], substeps: usize) -> Vec<Vec<f64>> {
    let n = z0.len();
    let mut z = z0.to_vec();
    let mut out = vec![z.clone()];
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            let t = w[0] + s as f64 * h;
            f(t, &z, &mut k1);
            for i in 0..n {
                tmp[i] = z[i] + 0.5 * h * k1[i];
            }
            f(t + 0.5 * h, &tmp, &mut k2);
            for i in 0..n {
                tmp[i] = z[i] + 0.5 * h * k2[i];
            }
            f(t + 0.5 * h, &tmp, &mut k3);
            for i in 0..n {
                tmp[i] = z[i] + h * k3[i];
            }
            f(t + h, &tmp, &mut k4);
            for i in 0..n {
                z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(z.clone());
    }
    out
}

fn closure_path_tol(f: &dyn Fn(f64, &[f64], &mut [f64]), z0: &[f64], times: &[f64], dt: f64, tol: f64) -> Result<Vec<Vec<f64>>, FlowError> {
    let span = times.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let mut sub = ((span / dt).ceil() as usize).max(1);
    let mut prev = closure_path(f, z0, times, sub);
    let mut diff = f64::INFINITY;
    for _ in 0..14 {
        sub *= 2;
        let next = closure_path(f, z0, times, sub);
        diff = path_dist(&prev, &next);
        prev = next;
        if !diff.is_finite() {
            return Err(FlowError::NonFinite { t: times[times.len() - 1] });
        }
        if diff < tol * (1.0 + path_scale(&prev)) {
            return Ok(prev);
        }
    }
    Err(FlowError::NoConvergence { tol, diff })
}

/// `DΦ(t1, t0, z)` for the full field.
fn transition(spec: &SystemSpec, z: &[f64], t0: f64, t1: f64, tol: f64) -> Result<Vec<f64>, FlowError> {
    let n = spec.dim();
    let mut jac = vec![0.0; n * n];
    for col in 0..n {
        let zd: Vec<Dual> = (0..n).map(|i| Jet::variable(z[i], if i == col { 1.0 } else { 0.0 })).collect();
        let (path, _) = integrate_path_tol(spec, &zd, &[t0, t1], 0.01, tol)?;
        for row in 0..n {
            jac[row * n + col] = path[1][row].c[1];
        }
    }
    Ok(jac)
}

/// A one-parameter family of systems `v_s`.
pub trait Family: Send + Sync {
    fn at(&self, s: f64) -> SystemSpec;

    /// `∂_s v_s(t, z)`, by default a central difference in `s`.
    fn dv_ds(&self, s: f64, t: f64, z: &[f64], out: &mut [f64]) {
        let h = 1e-6 * (1.0 + s.abs());
        let (p, q) = (self.at(s + h), self.at(s - h));
        let mut a = vec![0.0; z.len()];
        let mut b = vec![0.0; z.len()];
        p.field().eval(t, z, &mut a);
        q.field().eval(t, z, &mut b);
        for i in 0..z.len() {
            out[i] = (a[i] - b[i]) / (2.0 * h);
        }
    }
}

impl<F: Fn(f64) -> SystemSpec + Send + Sync> Family for F {
    fn at(&self, s: f64) -> SystemSpec {
        self(s)
    }
}

/// `∂_s Φ_s(t, t0, z0) = ∫_{t0}^{t} DΦ_s(t, τ, x(τ)) ∂_s v_s(τ, x(τ)) dτ`, by
/// trapezoid sums on `n_quad` and `2 n_quad` panels and one Richardson step.
pub fn param_derivative(family: &dyn Family, s: f64, z0: &[f64], t0: f64, t: f64, n_quad: usize) -> Result<Vec<f64>, FlowError> {
    let spec = family.at(s);
    let n = spec.dim();
    let trap = |panels: usize| -> Result<Vec<f64>, FlowError> {
        let taus = sample_times(t0, t, panels);
        let zd: Vec<Vec<Dual>> = (0..n)
            .map(|col| (0..n).map(|i| Jet::variable(z0[i], if i == col { 1.0 } else { 0.0 })).collect())
            .collect();
        // M(τ) = DΦ(τ, t0); DΦ(t, τ) = M(t) M(τ)^{-1}
        let mut mats = vec![vec![0.0; n * n]; taus.len()];
        let mut traj = vec![vec![0.0; n]; taus.len()];
        for (col, z) in zd.iter().enumerate() {
            let (path, _) = integrate_path_tol(&spec, z, &taus, 0.01, 1e-12)?;
            for (k, p) in path.iter().enumerate() {
                for row in 0..n {
                    mats[k][row * n + col] = p[row].c[1];
                    traj[k][row] = p[row].c[0];
                }
            }
        }
        let mt = mats[panels].clone();
        let h = (t - t0) / panels as f64;
        let mut acc = vec![0.0; n];
        for k in 0..=panels {
            let w = if k == 0 || k == panels { 0.5 * h } else { h };
            let inv = inverse(&mats[k], n).ok_or_else(|| FlowError::Degenerate("singular tangent".into()))?;
            let tr = matmul(&mt, &inv, n, n, n);
            let mut dv = vec![0.0; n];
            family.dv_ds(s, taus[k], &traj[k], &mut dv);
            let mut g = vec![0.0; n];
            matvec(&tr, &dv, &mut g);
            for i in 0..n {
                acc[i] += w * g[i];
            }
        }
        Ok(acc)
    };
    let a = trap(n_quad)?;
    let b = trap(2 * n_quad)?;
    Ok(a.iter().zip(&b).map(|(p, q)| (4.0 * q - p) / 3.0).collect())
}

/// Applies the linear solve of [`vertical_solve`] to plain forcing samples.
pub(crate) fn linear_forced<S: FieldLift>(
    lin: &LinearizedSystem,
    x: &[S],
    n: usize,
    dt: f64,
    forcing_nodes: &[S],
    forcing_mid: &[S],
) -> Result<Vec<S>, FlowError> {
    let m = lin.dim_y();
    let mut out = Vec::new();
    vertical_solve(
        lin,
        x,
        n,
        dt,
        |i, mid, _, _| {
            let src = if mid { forcing_mid } else { forcing_nodes };
            Ok(src[i * m..(i + 1) * m].to_vec())
        },
        &mut out,
    )?;
    Ok(out)
}
