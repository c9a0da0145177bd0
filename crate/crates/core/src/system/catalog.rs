use super::{DeclaredRates, DomainX, Rhs, Smooth, SystemError, SystemSpec};
use crate::jet::Scalar;
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioId {
    OptSmooth,
    Breakdown,
    NonCinfty,
    Cylinder,
    Collapse,
    Cohomological,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 6] = [
        ScenarioId::OptSmooth,
        ScenarioId::Breakdown,
        ScenarioId::NonCinfty,
        ScenarioId::Cylinder,
        ScenarioId::Collapse,
        ScenarioId::Cohomological,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::OptSmooth => "opt-smooth",
            ScenarioId::Breakdown => "breakdown",
            ScenarioId::NonCinfty => "non-cinfty",
            ScenarioId::Cylinder => "cylinder",
            ScenarioId::Collapse => "collapse",
            ScenarioId::Cohomological => "cohomological",
        }
    }

    pub fn parse(name: &str) -> Result<Self, SystemError> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| SystemError::UnknownScenario(name.to_string()))
    }

    /// Parameter names with their default values.
    pub fn defaults(self) -> &'static [(&'static str, f64)] {
        match self {
            ScenarioId::OptSmooth => &[
                ("eps", 0.05),
                ("lambda_minus", -1.0),
                ("lambda_plus", 1.0),
                ("lambda_y", -2.5),
            ],
            ScenarioId::Breakdown => &[
                ("eps", 0.05),
                ("lambda_minus", -1.0),
                ("lambda_plus", 1.0),
                ("lambda_y", -1.0),
                ("swirl", 8.0),
            ],
            ScenarioId::NonCinfty => &[("eps", 0.4), ("lambda_y", -1.0), ("lambda_plus", 1.0)],
            ScenarioId::Cylinder => &[("tilt", 0.0), ("drift", 0.0)],
            ScenarioId::Collapse => &[("eps", 0.01), ("branch", 1.0), ("x_hi", 9.0)],
            ScenarioId::Cohomological => &[("a", 1.0), ("lambda", -2.0), ("eps", 0.1)],
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ScenarioId::OptSmooth => "circle flow with hyperbolic points at 0 and pi, bump-lifted graph of finite smoothness",
            ScenarioId::Breakdown => "opt-smooth without spectral gap plus a circular perturbation at the origin",
            ScenarioId::NonCinfty => "opt-smooth with tangential rate -eps: smoothness order 1/eps",
            ScenarioId::Cylinder => "normally attracting cylinder r = 1 (angular section), tilt and drift perturbations",
            ScenarioId::Collapse => "one branch of a nearly self-intersecting manifold pushed by a stationary line",
            ScenarioId::Cohomological => "skew linear system x' = a, y' = lambda y + eps sin x with closed-form graph",
        }
    }
}

pub fn scenario_names() -> Vec<&'static str> {
    ScenarioId::ALL.iter().map(|s| s.name()).collect()
}

fn merged(id: ScenarioId, params: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>, SystemError> {
    let mut out: BTreeMap<String, f64> = id.defaults().iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in params {
        if !out.contains_key(k) {
            return Err(SystemError::UnknownParameter { scenario: id.name().into(), name: k.clone() });
        }
        if !v.is_finite() {
            return Err(bad(k, *v, "must be finite"));
        }
        out.insert(k.clone(), *v);
    }
    Ok(out)
}

fn bad(name: &str, value: f64, reason: &str) -> SystemError {
    SystemError::BadParameter { name: name.into(), value, reason: reason.into() }
}

/// Builds a catalog system by name with `params` overriding the defaults.
pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<SystemSpec, SystemError> {
    let id = ScenarioId::parse(name)?;
    let p = merged(id, params)?;
    let g = |k: &str| p[k];
    let spec = match id {
        ScenarioId::OptSmooth => {
            let (lm, lp, ly, eps) = (g("lambda_minus"), g("lambda_plus"), g("lambda_y"), g("eps"));
            check_opt_smooth(lm, lp)?;
            if ly >= lm {
                return Err(bad("lambda_y", ly, "must lie below lambda_minus"));
            }
            opt_smooth_spec(OptSmooth::new(lm, lp, ly, eps, 0.0))
        }
        ScenarioId::Breakdown => {
            let (lm, lp, ly, eps) = (g("lambda_minus"), g("lambda_plus"), g("lambda_y"), g("eps"));
            check_opt_smooth(lm, lp)?;
            if ly > 0.0 {
                return Err(bad("lambda_y", ly, "must be negative"));
            }
            opt_smooth_spec(OptSmooth::new(lm, lp, ly, eps, g("swirl") * eps))
        }
        ScenarioId::NonCinfty => {
            let (eps, ly, lp) = (g("eps"), g("lambda_y"), g("lambda_plus"));
            if !(eps > 0.0 && eps < 1.0) {
                return Err(bad("eps", eps, "must lie in (0, 1)"));
            }
            if ly >= -eps {
                return Err(bad("lambda_y", ly, "must lie below -eps"));
            }
            check_opt_smooth(-eps, lp)?;
            opt_smooth_spec(OptSmooth::new(-eps, lp, ly, eps, 0.0))
        }
        ScenarioId::Cylinder => {
            let (tilt, drift) = (g("tilt"), g("drift"));
            if drift.abs() >= 0.5 {
                return Err(bad("drift", drift, "must satisfy |drift| < 0.5"));
            }
            if tilt.abs() > 0.1 {
                return Err(bad("tilt", tilt, "must satisfy |tilt| <= 0.1"));
            }
            let mut s = SystemSpec::new(
                "cylinder",
                DomainX::circle(TAU)?,
                1,
                Arc::new(Smooth(Cylinder { tilt, drift })),
            );
            s.epsilon = tilt.abs().max(drift.abs());
            s.eta = 0.4;
            s.declared = Some(DeclaredRates { rho_m: 0.0, rho_minus: -1.0, c_m: 1.0, c_minus: 1.0 });
            s.bounds = Some((1.0 + drift.abs() + 0.4 + 0.16 + tilt.abs(), 2.0 + drift.abs() + 2.0 * 0.4 + tilt.abs()));
            s
        }
        ScenarioId::Collapse => {
            let (eps, branch, x_hi) = (g("eps"), g("branch"), g("x_hi"));
            if !(0.0..0.2).contains(&eps) {
                return Err(bad("eps", eps, "must lie in [0, 0.2)"));
            }
            if branch != 1.0 && branch != -1.0 {
                return Err(bad("branch", branch, "must be +1 or -1"));
            }
            if x_hi <= 2.0 || x_hi > 12.0 {
                return Err(bad("x_hi", x_hi, "must lie in (2, 12]"));
            }
            let c = Collapse { eps, sign: branch };
            let mut s = SystemSpec::new("collapse", DomainX::window(COLLAPSE_LO, x_hi)?, 1, Arc::new(Smooth(c)));
            s.epsilon = eps;
            s.eta = 0.5;
            s.declared = Some(DeclaredRates { rho_m: 0.0, rho_minus: -1.0, c_m: 1.0, c_minus: 1.0 });
            s.bounds = Some((2.0 + eps, 3.0 + eps * 10.0));
            s
        }
        ScenarioId::Cohomological => {
            let (a, lam, eps) = (g("a"), g("lambda"), g("eps"));
            if lam >= 0.0 {
                return Err(bad("lambda", lam, "must be negative"));
            }
            let mut s = SystemSpec::new(
                "cohomological",
                DomainX::circle(TAU)?,
                1,
                Arc::new(Smooth(Cohomological { a, lam, eps })),
            );
            s.epsilon = eps;
            s.eta = 0.5;
            s.declared = Some(DeclaredRates { rho_m: 0.0, rho_minus: lam, c_m: 1.0, c_minus: 1.0 });
            s.bounds = Some((a.abs() + lam.abs() * 0.5 + eps.abs(), lam.abs() + eps.abs()));
            s
        }
    };
    Ok(SystemSpec { name: id.name().into(), params: p, ..spec })
}

fn check_opt_smooth(lm: f64, lp: f64) -> Result<(), SystemError> {
    if lm >= 0.0 {
        return Err(bad("lambda_minus", lm, "must be negative"));
    }
    if lp <= 0.0 {
        return Err(bad("lambda_plus", lp, "must be positive"));
    }
    Ok(())
}

fn opt_smooth_spec(f: OptSmooth) -> SystemSpec {
    let (lm, lp, ly, eps, omega) = (f.lm, f.lp, f.ly, f.eps, f.omega);
    let eta = 0.5;
    let mut s = SystemSpec::new("opt-smooth", DomainX::circle(TAU).unwrap(), 1, Arc::new(Smooth(f)));
    s.epsilon = eps;
    s.eta = eta;
    s.declared = Some(DeclaredRates { rho_m: -lm, rho_minus: ly, c_m: 1.0, c_minus: 1.0 });
    let lam = lm.abs() + lp;
    let swirl_v = omega.abs() * (SWIRL_RADIUS + eta);
    s.bounds = Some((
        lam * PI + ly.abs() * eta + eps.abs() + swirl_v,
        ly.abs() + 6.0 * lam + eps.abs() * 6.0 / BUMP_RADIUS + omega.abs() * (2.0 + 6.0 * (SWIRL_RADIUS + eta) / SWIRL_RADIUS),
    ));
    s
}

/// Quintic smoothstep `6u^5 - 15u^4 + 10u^3` on `[0, 1]`.
pub(crate) fn smoothstep<S: Scalar>(u: S) -> S {
    let uv = u.value();
    if uv <= 0.0 {
        S::zero()
    } else if uv >= 1.0 {
        S::cst(1.0)
    } else {
        u * u * u * (u * (u * 6.0 - 15.0) + 10.0)
    }
}

/// Smooth bump `exp(1 - 1/(1 - q))` of the squared scaled radius `q`, equal
/// to 1 at the centre and vanishing with all derivatives at `q = 1`.
pub(crate) fn bump<S: Scalar>(q: S) -> S {
    if q.value() >= 1.0 {
        S::zero()
    } else {
        (S::cst(1.0) - S::cst(1.0) / (S::cst(1.0) - q)).exp()
    }
}

const BLEND_LO: f64 = 0.3 * PI;
const BLEND_HI: f64 = 0.6 * PI;
const BUMP_CENTRE: f64 = FRAC_PI_2;
const BUMP_RADIUS: f64 = 0.4;
const SWIRL_RADIUS: f64 = 0.5;
pub const COLLAPSE_LO: f64 = 0.5;
/// Height of the unperturbed branches where they enter the window.
pub const COLLAPSE_Y_ENTRY: f64 = 0.866_025_403_784_438_6;

/// Circle field with a sink at 0 and a source at pi, linear near both.
#[derive(Clone, Copy, Debug)]
pub(crate) struct OptSmooth {
    lm: f64,
    lp: f64,
    ly: f64,
    eps: f64,
    omega: f64,
}

impl OptSmooth {
    fn new(lm: f64, lp: f64, ly: f64, eps: f64, omega: f64) -> Self {
        OptSmooth { lm, lp, ly, eps, omega }
    }
}

/// Shifts `x` into `[-pi, pi)`; the shift is a constant so jets pass through.
fn reduce_circle<S: Scalar>(x: S) -> S {
    let xv = x.value();
    let k = ((xv + PI) / TAU).floor();
    x - k * TAU
}

/// Tangential profile of the opt-smooth family on `[-pi, pi)`.
pub(crate) fn opt_smooth_vx<S: Scalar>(u: S, lm: f64, lp: f64) -> S {
    let sgn = if u.value() >= 0.0 { 1.0 } else { -1.0 };
    let a = u * sgn;
    let near = u * lm;
    let far = (u - sgn * PI) * lp;
    let av = a.value();
    if av <= BLEND_LO {
        near
    } else if av >= BLEND_HI {
        far
    } else {
        let w = smoothstep((a - BLEND_LO) / (BLEND_HI - BLEND_LO));
        near * (S::cst(1.0) - w) + far * w
    }
}

impl Rhs for OptSmooth {
    fn dim(&self) -> usize {
        2
    }
    fn rhs<S: Scalar>(&self, _t: f64, z: &[S], out: &mut [S]) {
        let u = reduce_circle(z[0]);
        let y = z[1];
        let mut vx = opt_smooth_vx(u, self.lm, self.lp);
        let mut vy = y * self.ly;
        if self.eps != 0.0 {
            let dx = u - BUMP_CENTRE;
            vy += bump((dx * dx + y * y) / (BUMP_RADIUS * BUMP_RADIUS)) * self.eps;
        }
        if self.omega != 0.0 {
            let phi = bump((u * u + y * y) / (SWIRL_RADIUS * SWIRL_RADIUS)) * self.omega;
            vx -= y * phi;
            vy += u * phi;
        }
        out[0] = vx;
        out[1] = vy;
    }
}

/// Angular section of the cylinder: `theta' = 1 + drift cos(theta)`,
/// `y' = -y - y^2 + tilt sin(theta)` with `y = r - 1`.
#[derive(Clone, Copy, Debug)]
struct Cylinder {
    tilt: f64,
    drift: f64,
}

impl Rhs for Cylinder {
    fn dim(&self) -> usize {
        2
    }
    fn rhs<S: Scalar>(&self, _t: f64, z: &[S], out: &mut [S]) {
        let (th, y) = (z[0], z[1]);
        out[0] = th.cos() * self.drift + 1.0;
        out[1] = -y - y * y + th.sin() * self.tilt;
    }
}

/// Unperturbed branch `s * y_e * exp(e^{x_lo} - e^x)` of the glued field.
pub fn collapse_branch(x: f64, sign: f64) -> f64 {
    sign * COLLAPSE_Y_ENTRY * (COLLAPSE_LO.exp() - x.exp()).exp()
}

/// Branch of the glued field in coordinates `u = y - b(x)` around the
/// unperturbed branch `b`, with the pushing field `-eps` switched on past `x = 1`.
#[derive(Clone, Copy, Debug)]
struct Collapse {
    eps: f64,
    sign: f64,
}

fn collapse_cutoff<S: Scalar>(x: S) -> S {
    smoothstep((x - COLLAPSE_LO) / (1.0 - COLLAPSE_LO))
}

impl Rhs for Collapse {
    fn dim(&self) -> usize {
        2
    }
    fn rhs<S: Scalar>(&self, _t: f64, z: &[S], out: &mut [S]) {
        let (x, u) = (z[0], z[1]);
        let chi = collapse_cutoff(x) * self.eps;
        let ex = x.exp();
        out[0] = (-x).exp() - chi;
        let b = (S::cst(COLLAPSE_LO.exp()) - ex).exp() * (self.sign * COLLAPSE_Y_ENTRY);
        out[1] = -u - chi * ex * b;
    }
}

#[derive(Clone, Copy, Debug)]
struct Cohomological {
    a: f64,
    lam: f64,
    eps: f64,
}

impl Rhs for Cohomological {
    fn dim(&self) -> usize {
        2
    }
    fn rhs<S: Scalar>(&self, _t: f64, z: &[S], out: &mut [S]) {
        out[0] = S::cst(self.a);
        out[1] = z[1] * self.lam + z[0].sin() * self.eps;
    }
}

/// Closed-form invariant graph `A sin x + B cos x` of the cohomological system.
pub fn cohomological_graph(a: f64, lam: f64, eps: f64, x: f64) -> f64 {
    let d = a * a + lam * lam;
    -eps * (lam * x.sin() + a * x.cos()) / d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{decompose, BaseGraph};

    fn p(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn every_scenario_builds_with_defaults() {
        for name in scenario_names() {
            let s = builtin(name, &BTreeMap::new()).unwrap();
            assert_eq!(s.name, name);
            assert!(s.has_jets());
        }
    }

    #[test]
    fn unknown_names_and_keys_are_rejected() {
        assert!(matches!(builtin("nope", &BTreeMap::new()), Err(SystemError::UnknownScenario(_))));
        assert!(matches!(
            builtin("cohomological", &p(&[("mu", 1.0)])),
            Err(SystemError::UnknownParameter { .. })
        ));
        assert!(matches!(
            builtin("opt-smooth", &p(&[("lambda_y", -0.5)])),
            Err(SystemError::BadParameter { .. })
        ));
    }

    #[test]
    fn opt_smooth_vertical_eigenvalue_at_the_sink() {
        let s = builtin("opt-smooth", &p(&[("lambda_y", -2.5)])).unwrap();
        let lin = decompose(s, BaseGraph::Zero).unwrap();
        let a = lin.a_matrix(0.0, 0.0).unwrap();
        assert!((a[0] + 2.5).abs() < 1e-12);
        let d = lin.spec.declared.unwrap();
        assert!((d.rho_minus / -d.rho_m - 2.5).abs() < 1e-12);
    }

    #[test]
    fn opt_smooth_has_exactly_two_zeros() {
        let s = builtin("opt-smooth", &BTreeMap::new()).unwrap();
        let n = 20_000;
        let mut changes = 0;
        let mut prev = s.v_x(-PI + 1e-9, &[0.0], 0.0);
        for i in 1..=n {
            let x = -PI + 1e-9 + TAU * i as f64 / n as f64;
            let v = s.v_x(x, &[0.0], 0.0);
            if v.signum() != prev.signum() && v != 0.0 {
                changes += 1;
            }
            prev = v;
        }
        assert_eq!(changes, 2);
        assert!((s.jacobian(0.0, &[0.0, 0.0]).unwrap()[0] + 1.0).abs() < 1e-12);
        assert!((s.jacobian(0.0, &[PI - 1e-12, 0.0]).unwrap()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cylinder_attracts_at_unit_rate() {
        let s = builtin("cylinder", &BTreeMap::new()).unwrap();
        let j = s.jacobian(0.0, &[0.3, 0.0]).unwrap();
        assert!((j[3] + 1.0).abs() < 1e-12);
        let mut out = [0.0; 1];
        s.v_y(1.0, &[0.0], 0.0, &mut out);
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn cohomological_field_and_graph() {
        let s = builtin("cohomological", &BTreeMap::new()).unwrap();
        let mut out = [0.0; 1];
        s.v_y(0.7, &[0.2], 0.0, &mut out);
        assert!((out[0] - (-0.4 + 0.1 * 0.7f64.sin())).abs() < 1e-15);
        assert!((s.v_x(0.7, &[0.2], 0.0) - 1.0).abs() < 1e-15);
        for &x in &[0.0, 1.0, 2.5] {
            let h = cohomological_graph(1.0, -2.0, 0.1, x);
            assert!((h - (0.04 * x.sin() - 0.02 * x.cos())).abs() < 1e-15);
            // a h' = lambda h + eps sin x
            let dh = 0.04 * x.cos() + 0.02 * x.sin();
            assert!((dh - (-2.0 * h + 0.1 * x.sin())).abs() < 1e-15);
        }
    }

    #[test]
    fn collapse_branch_is_invariant_when_unperturbed() {
        let s = builtin("collapse", &p(&[("eps", 0.0)])).unwrap();
        let mut out = [0.0; 2];
        s.field().eval(0.0, &[2.0, 0.0], &mut out);
        assert_eq!(out[1], 0.0);
        let x = 1.3;
        let h = 1e-6;
        let db = (collapse_branch(x + h, 1.0) - collapse_branch(x - h, 1.0)) / (2.0 * h);
        // y' = -y along x' = e^{-x}
        assert!((db * (-x).exp() + collapse_branch(x, 1.0)).abs() < 1e-8);
    }

    #[test]
    fn collapse_stationary_line() {
        for eps in [1e-2, 1e-3] {
            let s = builtin("collapse", &p(&[("eps", eps)])).unwrap();
            let xs = -f64::ln(eps);
            assert!(s.v_x(xs, &[0.0], 0.0).abs() < 1e-15);
            assert!(s.v_x(xs - 0.1, &[0.0], 0.0) > 0.0 && s.v_x(xs + 0.1, &[0.0], 0.0) < 0.0);
        }
    }

    #[test]
    fn sampled_bounds_below_declared() {
        let overrides = [
            ("opt-smooth", p(&[])),
            ("breakdown", p(&[])),
            ("non-cinfty", p(&[("eps", 0.15)])),
            ("cylinder", p(&[("tilt", 0.05), ("drift", 0.2)])),
            ("collapse", p(&[("eps", 0.01)])),
            ("cohomological", p(&[])),
        ];
        for (name, pr) in overrides {
            let s = builtin(name, &pr).unwrap();
            let (v, dv) = s.sample_bounds(s.eta, 257, 9).unwrap();
            let (vb, dvb) = s.bounds.unwrap();
            assert!(v.is_finite() && dv.is_finite());
            assert!(v <= vb, "{name}: |v| = {v} > {vb}");
            assert!(dv <= dvb, "{name}: |Dv| = {dv} > {dvb}");
        }
    }

    #[test]
    fn circle_fields_are_periodic() {
        for name in ["opt-smooth", "breakdown", "cylinder", "cohomological"] {
            let s = builtin(name, &BTreeMap::new()).unwrap();
            for &x in &[-2.0, 0.4, 3.0] {
                let mut a = [0.0; 2];
                let mut b = [0.0; 2];
                s.field().eval(0.0, &[x, 0.1], &mut a);
                s.field().eval(0.0, &[x + TAU, 0.1], &mut b);
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }
    }
}
