//! Interpolation helpers shared by the solvers.

use crate::jet::Scalar;

/// Value at `t` of the cubic through four samples `(ts[i], vs[i])`.
pub fn lagrange4<S: Scalar>(ts: [f64; 4], vs: [S; 4], t: f64) -> S {
    let mut acc = S::zero();
    for i in 0..4 {
        let mut w = 1.0;
        for j in 0..4 {
            if i != j {
                w *= (t - ts[j]) / (ts[i] - ts[j]);
            }
        }
        acc += vs[i] * w;
    }
    acc
}

/// Lagrange weights for the midpoint of a uniform cell `[i, i+1]` using the
/// stencil `i-1..=i+2`.
pub const MID_WEIGHTS: [f64; 4] = [-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0];

/// Weights for the midpoint of the first cell with the one-sided stencil `0..=3`.
pub const MID_WEIGHTS_EDGE: [f64; 4] = [5.0 / 16.0, 15.0 / 16.0, -5.0 / 16.0, 1.0 / 16.0];

/// Midpoint of cell `[i, i+1]` of uniformly sampled data (`n` nodes, `stride`
/// values per node, component `c`), fourth-order accurate.
pub fn uniform_midpoint<S: Scalar>(data: &[S], n: usize, stride: usize, c: usize, i: usize) -> S {
    let at = |k: usize| data[k * stride + c];
    if n < 4 {
        return (at(i) + at(i + 1)) * 0.5;
    }
    if i == 0 {
        let w = MID_WEIGHTS_EDGE;
        at(0) * w[0] + at(1) * w[1] + at(2) * w[2] + at(3) * w[3]
    } else if i + 2 >= n {
        let w = MID_WEIGHTS_EDGE;
        at(n - 1) * w[0] + at(n - 2) * w[1] + at(n - 3) * w[2] + at(n - 4) * w[3]
    } else {
        let w = MID_WEIGHTS;
        at(i - 1) * w[0] + at(i) * w[1] + at(i + 1) * w[2] + at(i + 2) * w[3]
    }
}

/// Cumulative integral of uniformly sampled `f` from node 0, fourth order.
pub fn cumulative_integral(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    for i in 0..n - 1 {
        let cell = if n < 4 {
            0.5 * h * (f[i] + f[i + 1])
        } else if i == 0 {
            h / 24.0 * (9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3])
        } else if i + 2 >= n {
            h / 24.0 * (9.0 * f[n - 1] + 19.0 * f[n - 2] - 5.0 * f[n - 3] + f[n - 4])
        } else {
            h / 24.0 * (-f[i - 1] + 13.0 * f[i] + 13.0 * f[i + 1] - f[i + 2])
        };
        out[i + 1] = out[i] + cell;
    }
    out
}

/// Monotone piecewise cubic Hermite interpolant (Fritsch–Carlson slopes).
#[derive(Clone, Debug)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

impl Pchip {
    /// `xs` must be strictly increasing with at least two entries.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        assert!(n >= 2 && ys.len() == n);
        let del: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])).collect();
        let mut ds = vec![0.0; n];
        if n == 2 {
            ds = vec![del[0]; 2];
        } else {
            for i in 1..n - 1 {
                if del[i - 1] * del[i] > 0.0 {
                    let h0 = xs[i] - xs[i - 1];
                    let h1 = xs[i + 1] - xs[i];
                    let w1 = 2.0 * h1 + h0;
                    let w2 = h1 + 2.0 * h0;
                    ds[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
                }
            }
            ds[0] = end_slope(xs[1] - xs[0], xs[2] - xs[1], del[0], del[1]);
            ds[n - 1] = end_slope(xs[n - 1] - xs[n - 2], xs[n - 2] - xs[n - 3], del[n - 2], del[n - 3]);
        }
        Pchip { xs, ys, ds }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let i = match self.xs.partition_point(|&v| v <= x) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        };
        hermite(self.xs[i], self.xs[i + 1], self.ys[i], self.ys[i + 1], self.ds[i], self.ds[i + 1], x)
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, x: f64) -> f64 {
    let h = x1 - x0;
    let s = (x - x0) / h;
    let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
    let h10 = s * (1.0 - s) * (1.0 - s);
    let h01 = s * s * (3.0 - 2.0 * s);
    let h11 = s * s * (s - 1.0);
    h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
}

/// Periodic cubic spline through nonuniform nodes on a circle of length `period`.
#[derive(Clone, Debug)]
pub struct PeriodicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    m: Vec<f64>,
    period: f64,
}

impl PeriodicSpline {
    /// `xs` strictly increasing inside one period (`xs[n-1] - xs[0] < period`).
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, period: f64) -> Self {
        let n = xs.len();
        assert!(n >= 3 && ys.len() == n);
        let h: Vec<f64> = (0..n)
            .map(|i| if i + 1 < n { xs[i + 1] - xs[i] } else { xs[0] + period - xs[n - 1] })
            .collect();
        // Cyclic tridiagonal system for the second derivatives m_i.
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut r = vec![0.0; n];
        for i in 0..n {
            let hp = h[(i + n - 1) % n];
            let hi = h[i];
            a[i] = hp / 6.0;
            b[i] = (hp + hi) / 3.0;
            c[i] = hi / 6.0;
            let yp = ys[(i + n - 1) % n];
            let yn = ys[(i + 1) % n];
            r[i] = (yn - ys[i]) / hi - (ys[i] - yp) / hp;
        }
        let m = solve_cyclic(&a, &b, &c, &r);
        PeriodicSpline { xs, ys, m, period }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let x0 = self.xs[0];
        let u = x0 + (x - x0).rem_euclid(self.period);
        let i = match self.xs.partition_point(|&v| v <= u) {
            0 => n - 1,
            k => k - 1,
        };
        let (xl, xr, yl, yr, ml, mr) = if i + 1 < n {
            (self.xs[i], self.xs[i + 1], self.ys[i], self.ys[i + 1], self.m[i], self.m[i + 1])
        } else {
            (self.xs[n - 1], self.xs[0] + self.period, self.ys[n - 1], self.ys[0], self.m[n - 1], self.m[0])
        };
        let h = xr - xl;
        let (s, t) = ((xr - u) / h, (u - xl) / h);
        ml * s * s * s * h * h / 6.0 + mr * t * t * t * h * h / 6.0 + (yl - ml * h * h / 6.0) * s
            + (yr - mr * h * h / 6.0) * t
    }
}

/// Solves a cyclic tridiagonal system (Sherman–Morrison on the Thomas algorithm).
fn solve_cyclic(a: &[f64], b: &[f64], c: &[f64], r: &[f64]) -> Vec<f64> {
    let n = b.len();
    let alpha = c[n - 1];
    let beta = a[0];
    let gamma = -b[0];
    let mut bb = b.to_vec();
    bb[0] -= gamma;
    bb[n - 1] -= alpha * beta / gamma;
    let x = thomas(a, &bb, c, r);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = alpha;
    let z = thomas(a, &bb, c, &u);
    let fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
    x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect()
}

fn thomas(a: &[f64], b: &[f64], c: &[f64], r: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    dp[0] = r[0] / b[0];
    for i in 1..n {
        let den = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / den;
        dp[i] = (r[i] - a[i] * dp[i - 1]) / den;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = dp[i] - cp[i] * x[i + 1];
    }
    x
}
