//! Sampled curves on a truncated backward interval `[-T_max, 0]` with
//! exponential growth norms `sup |c(t)| e^{-rho t}`.

use crate::interp::lagrange4;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("time grid needs at least {min} intervals, got {got}")]
    TooFewNodes { min: usize, got: usize },
    #[error("invalid time grid: {0}")]
    BadGrid(String),
    #[error("restriction point {a} lies outside [{lo}, 0]")]
    OutsideSupport { a: f64, lo: f64 },
    #[error("non-finite value at t = {t}")]
    NonFinite { t: f64 },
    #[error("curve csv: {0}")]
    Csv(String),
    #[error("curves have different dimensions ({0} vs {1})")]
    DimMismatch(usize, usize),
}

pub const MIN_INTERVALS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Spacing {
    Uniform { dt: f64 },
    Geometric { dt0: f64, ratio: f64 },
    Irregular,
}

/// Strictly decreasing nodes `0 = t_0 > t_1 > ... > t_N = -T_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    spacing: Spacing,
}

impl TimeGrid {
    /// Uniform grid whose step is the largest value `<= dt` dividing `t_max`.
    pub fn uniform(t_max: f64, dt: f64) -> Result<Self, CurveError> {
        if !(t_max > 0.0 && dt > 0.0 && t_max.is_finite()) {
            return Err(CurveError::BadGrid(format!("t_max = {t_max}, dt = {dt}")));
        }
        let n = (t_max / dt).ceil().max(1.0) as usize;
        if n < MIN_INTERVALS {
            return Err(CurveError::TooFewNodes { min: MIN_INTERVALS, got: n });
        }
        let h = t_max / n as f64;
        let mut nodes: Vec<f64> = (0..=n).map(|i| -(i as f64) * h).collect();
        nodes[n] = -t_max;
        Ok(TimeGrid { nodes, spacing: Spacing::Uniform { dt: h } })
    }

    /// Steps `dt0, dt0 * ratio, ...` until `t_max` is reached (last step clipped).
    pub fn geometric(t_max: f64, dt0: f64, ratio: f64) -> Result<Self, CurveError> {
        if !(t_max > 0.0 && dt0 > 0.0 && ratio >= 1.0) {
            return Err(CurveError::BadGrid(format!("t_max = {t_max}, dt0 = {dt0}, ratio = {ratio}")));
        }
        let mut nodes = vec![0.0];
        let mut h = dt0;
        while -nodes[nodes.len() - 1] < t_max {
            let next = (nodes[nodes.len() - 1] - h).max(-t_max);
            nodes.push(next);
            h *= ratio;
        }
        if nodes.len() - 1 < MIN_INTERVALS {
            return Err(CurveError::TooFewNodes { min: MIN_INTERVALS, got: nodes.len() - 1 });
        }
        Ok(TimeGrid { nodes, spacing: Spacing::Geometric { dt0, ratio } })
    }

    fn from_nodes(nodes: Vec<f64>) -> Self {
        TimeGrid { nodes, spacing: Spacing::Irregular }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn t_max(&self) -> f64 {
        -self.nodes[self.nodes.len() - 1]
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// Uniform step, if the grid is uniform.
    pub fn dt(&self) -> Option<f64> {
        match self.spacing {
            Spacing::Uniform { dt } => Some(dt),
            _ => None,
        }
    }

    /// Index `i` with `t_{i+1} <= t <= t_i`.
    fn cell(&self, t: f64) -> usize {
        let n = self.nodes.len();
        if n < 2 {
            return 0;
        }
        // nodes decrease: count nodes strictly above t
        let k = self.nodes.partition_point(|&v| v > t);
        k.saturating_sub(1).min(n - 2)
    }

    /// Union of two grids on the common support.
    fn merge(&self, other: &TimeGrid) -> TimeGrid {
        let lo = self.t_max().min(other.t_max());
        let mut all: Vec<f64> = self.nodes.iter().chain(&other.nodes).copied().filter(|&t| t >= -lo).collect();
        all.sort_by(|a, b| b.partial_cmp(a).unwrap());
        all.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * (1.0 + b.abs()));
        TimeGrid::from_nodes(all)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interp {
    Linear,
    CubicHermite,
}

/// A curve sampled on a [`TimeGrid`], `dim` components per node.
///
/// X-valued curves on a circle carry the circumference and are stored
/// unwrapped (continuous representatives).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpCurve {
    pub grid: TimeGrid,
    pub dim: usize,
    pub values: Vec<f64>,
    pub rho: f64,
    pub interp: Interp,
    pub circle: Option<f64>,
}

impl ExpCurve {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>, rho: f64) -> Result<Self, CurveError> {
        assert_eq!(values.len(), grid.len() * dim, "values must have dim entries per node");
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(CurveError::NonFinite { t: grid.nodes[i / dim.max(1)] });
            }
        }
        Ok(ExpCurve { grid, dim, values, rho, interp: Interp::CubicHermite, circle: None })
    }

    pub fn from_fn(grid: TimeGrid, dim: usize, rho: f64, f: impl Fn(f64) -> Vec<f64>) -> Result<Self, CurveError> {
        let mut values = Vec::with_capacity(grid.len() * dim);
        for &t in grid.nodes() {
            let v = f(t);
            assert_eq!(v.len(), dim);
            values.extend(v);
        }
        ExpCurve::new(grid, dim, values, rho)
    }

    pub fn constant(grid: TimeGrid, v: &[f64], rho: f64) -> Self {
        let values = grid.nodes().iter().flat_map(|_| v.iter().copied()).collect();
        ExpCurve { grid, dim: v.len(), values, rho, interp: Interp::CubicHermite, circle: None }
    }

    /// Circle-valued curve; values are unwrapped by nearest-branch
    /// continuation from `t = 0` backwards.
    pub fn on_circle(grid: TimeGrid, values: Vec<f64>, circumference: f64, rho: f64) -> Result<Self, CurveError> {
        let mut c = ExpCurve::new(grid, 1, values, rho)?;
        for i in 1..c.values.len() {
            let prev = c.values[i - 1];
            let d = c.values[i] - prev;
            c.values[i] = prev + d - circumference * (d / circumference).round();
        }
        c.circle = Some(circumference);
        Ok(c)
    }

    pub fn with_interp(mut self, interp: Interp) -> Self {
        self.interp = interp;
        self
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn at_zero(&self) -> &[f64] {
        self.node(0)
    }

    /// Interpolated value at `t` in the support.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let nodes = self.grid.nodes();
        let n = nodes.len();
        if n == 1 {
            return self.node(0).to_vec();
        }
        let i = self.grid.cell(t);
        (0..self.dim)
            .map(|c| {
                let v = |k: usize| self.values[k * self.dim + c];
                match self.interp {
                    Interp::Linear => {
                        let s = (t - nodes[i]) / (nodes[i + 1] - nodes[i]);
                        v(i) + s * (v(i + 1) - v(i))
                    }
                    Interp::CubicHermite if n >= 4 => {
                        let lo = i.saturating_sub(1).min(n - 4);
                        lagrange4(
                            [nodes[lo], nodes[lo + 1], nodes[lo + 2], nodes[lo + 3]],
                            [v(lo), v(lo + 1), v(lo + 2), v(lo + 3)],
                            t,
                        )
                    }
                    Interp::CubicHermite => {
                        let s = (t - nodes[i]) / (nodes[i + 1] - nodes[i]);
                        v(i) + s * (v(i + 1) - v(i))
                    }
                }
            })
            .collect()
    }

    /// Resamples onto `grid` (which must lie in the support).
    pub fn resample(&self, grid: &TimeGrid) -> ExpCurve {
        let values = grid.nodes().iter().flat_map(|&t| self.eval(t)).collect();
        ExpCurve { grid: grid.clone(), values, ..self.clone() }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for c in 0..self.dim {
            let _ = write!(s, ",c{c}");
        }
        s.push('\n');
        for (i, t) in self.grid.nodes().iter().enumerate() {
            let _ = write!(s, "{t:.16e}");
            for v in self.node(i) {
                let _ = write!(s, ",{v:.16e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, rho: f64) -> Result<Self, CurveError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| CurveError::Csv("empty input".into()))?;
        let dim = header.split(',').count().checked_sub(1).filter(|&d| d > 0)
            .ok_or_else(|| CurveError::Csv("header needs t and at least one component".into()))?;
        let mut nodes = Vec::new();
        let mut values = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(CurveError::Csv(format!("line {}: expected {} fields", ln + 2, dim + 1)));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| CurveError::Csv(format!("line {}: {e}", ln + 2)));
            nodes.push(parse(fields[0])?);
            for f in &fields[1..] {
                values.push(parse(f)?);
            }
        }
        if nodes.is_empty() || nodes[0] != 0.0 || nodes.windows(2).any(|w| w[1] >= w[0]) {
            return Err(CurveError::Csv("times must start at 0 and strictly decrease".into()));
        }
        ExpCurve::new(TimeGrid::from_nodes(nodes), dim, values, rho)
    }
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `max_i |c(t_i)| e^{-rho t_i}` over the grid nodes.
pub fn norm_rho(c: &ExpCurve, rho: f64) -> f64 {
    c.grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, &t)| vec_norm(c.node(i)) * (-rho * t).exp())
        .fold(0.0, f64::max)
}

/// Weighted sup distance; circle curves use the shorter arc. Curves on
/// different grids are compared on the union of their nodes.
pub fn dist_rho(c1: &ExpCurve, c2: &ExpCurve, rho: f64) -> Result<f64, CurveError> {
    if c1.dim != c2.dim {
        return Err(CurveError::DimMismatch(c1.dim, c2.dim));
    }
    let (a, b);
    let (c1, c2) = if c1.grid == c2.grid {
        (c1, c2)
    } else {
        let g = c1.grid.merge(&c2.grid);
        a = c1.resample(&g);
        b = c2.resample(&g);
        (&a, &b)
    };
    let circ = c1.circle.or(c2.circle);
    let mut best: f64 = 0.0;
    for (i, &t) in c1.grid.nodes().iter().enumerate() {
        let d = match circ {
            Some(l) => {
                let r = (c1.node(i)[0] - c2.node(i)[0]).rem_euclid(l);
                r.min(l - r)
            }
            None => c1.node(i).iter().zip(c2.node(i)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt(),
        };
        best = best.max(d * (-rho * t).exp());
    }
    Ok(best)
}

/// The curve on `[a, 0]`; a non-node `a` becomes a new last node.
pub fn restrict(c: &ExpCurve, a: f64) -> Result<ExpCurve, CurveError> {
    let lo = -c.grid.t_max();
    if !(a >= lo - 1e-14 && a <= 0.0) {
        return Err(CurveError::OutsideSupport { a, lo });
    }
    let nodes = c.grid.nodes();
    let keep = nodes.partition_point(|&t| t >= a);
    let mut new_nodes = nodes[..keep].to_vec();
    let mut values = c.values[..keep * c.dim].to_vec();
    if new_nodes.last().is_some_and(|&t| t > a) {
        new_nodes.push(a);
        values.extend(c.eval(a));
    }
    let grid = if keep == nodes.len() {
        c.grid.clone()
    } else if new_nodes.len() == keep && keep >= 2 {
        // cut at a node: the prefix keeps its spacing
        TimeGrid { nodes: new_nodes, spacing: c.grid.spacing }
    } else {
        TimeGrid::from_nodes(new_nodes)
    };
    Ok(ExpCurve { grid, values, ..c.clone() })
}

/// Pointwise composition `t ↦ f(t, c(t))`.
pub fn nemytskii(
    f: impl Fn(f64, &[f64]) -> Vec<f64>,
    c: &ExpCurve,
) -> Result<ExpCurve, CurveError> {
    let mut values = Vec::with_capacity(c.values.len());
    let mut dim = None;
    for (i, &t) in c.grid.nodes().iter().enumerate() {
        let v = f(t, c.node(i));
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CurveError::NonFinite { t });
        }
        dim.get_or_insert(v.len());
        values.extend(v);
    }
    Ok(ExpCurve { grid: c.grid.clone(), dim: dim.unwrap_or(c.dim), values, rho: c.rho, interp: c.interp, circle: None })
}
