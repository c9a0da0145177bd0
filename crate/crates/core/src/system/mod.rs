//! Vector fields on trivial bundles `X × Y` and their linearization along a
//! base graph.
//!
//! `X` is one-dimensional (a window of the line or a circle) and `Y = R^m`.
//! States are packed as `z = (x, y_1, ..., y_m)`; the horizontal component of
//! the field is `v_X = out[0]`, the vertical one `v_Y = out[1..]`.

mod catalog;
pub mod expr;
mod gap;

pub use catalog::{
    builtin, cohomological_graph, collapse_branch, scenario_names, ScenarioId, COLLAPSE_LO, COLLAPSE_Y_ENTRY,
};
pub use gap::{validate_gap, GapReport, SpectralConstants, RHO_BUMP};

use crate::jet::{Dual, DualTaylor3, Jet, Lift, Scalar, Taylor3};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("parameter `{name}` = {value} is out of range: {reason}")]
    BadParameter { name: String, value: f64, reason: String },
    #[error("unknown parameter `{name}` for scenario `{scenario}`")]
    UnknownParameter { scenario: String, name: String },
    #[error("non-finite Jacobian at x = {x}, y = {y:?}")]
    NonFiniteJacobian { x: f64, y: Vec<f64> },
    #[error("field does not provide jet evaluation (needed for derivatives of order >= 2)")]
    NoJets,
    #[error("derivatives along a nonzero base graph need jet evaluation of the graph")]
    NonZeroBaseGraph,
    #[error("invalid domain: {0}")]
    BadDomain(String),
    #[error("expression error: {0}")]
    Expr(String),
}

/// Right-hand side written once for every [`Scalar`].
pub trait Rhs: Send + Sync {
    fn dim(&self) -> usize;
    fn rhs<S: Scalar>(&self, t: f64, z: &[S], out: &mut [S]);
}

/// Object-safe view of a vector field. Jet evaluations report `false` when
/// unsupported.
pub trait Field: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, z: &[f64], out: &mut [f64]);
    fn eval_dual(&self, t: f64, z: &[Dual], out: &mut [Dual]) -> bool;
    fn eval_taylor(&self, _t: f64, _z: &[Taylor3], _out: &mut [Taylor3]) -> bool {
        false
    }
    fn eval_dual_taylor(&self, _t: f64, _z: &[DualTaylor3], _out: &mut [DualTaylor3]) -> bool {
        false
    }
}

/// Adapter giving every [`Rhs`] exact jet evaluations.
pub struct Smooth<R>(pub R);

impl<R: Rhs> Field for Smooth<R> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn eval(&self, t: f64, z: &[f64], out: &mut [f64]) {
        self.0.rhs(t, z, out)
    }
    fn eval_dual(&self, t: f64, z: &[Dual], out: &mut [Dual]) -> bool {
        self.0.rhs(t, z, out);
        true
    }
    fn eval_taylor(&self, t: f64, z: &[Taylor3], out: &mut [Taylor3]) -> bool {
        self.0.rhs(t, z, out);
        true
    }
    fn eval_dual_taylor(&self, t: f64, z: &[DualTaylor3], out: &mut [DualTaylor3]) -> bool {
        self.0.rhs(t, z, out);
        true
    }
}

type PlainFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// A field known only through plain evaluations. First-order jets fall back
/// to central differences with step `1e-6 * (1 + |z|)`.
pub struct SampledField {
    dim: usize,
    f: Arc<PlainFn>,
}

impl SampledField {
    pub fn new(dim: usize, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        SampledField { dim, f: Arc::new(f) }
    }
}

impl Field for SampledField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, z: &[f64], out: &mut [f64]) {
        (self.f)(t, z, out)
    }
    fn eval_dual(&self, t: f64, z: &[Dual], out: &mut [Dual]) -> bool {
        let base: Vec<f64> = z.iter().map(|d| d.c[0]).collect();
        let dir: Vec<f64> = z.iter().map(|d| d.c[1]).collect();
        let dn = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut f0 = vec![0.0; self.dim];
        (self.f)(t, &base, &mut f0);
        if dn == 0.0 {
            for (o, v) in out.iter_mut().zip(&f0) {
                *o = Dual::constant(*v);
            }
            return true;
        }
        let zn = base.iter().map(|v| v * v).sum::<f64>().sqrt();
        let h = 1e-6 * (1.0 + zn) / dn;
        let zp: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + h * d).collect();
        let zm: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b - h * d).collect();
        let mut fp = vec![0.0; self.dim];
        let mut fm = vec![0.0; self.dim];
        (self.f)(t, &zp, &mut fp);
        (self.f)(t, &zm, &mut fm);
        for i in 0..self.dim {
            out[i] = Jet::from_coeffs([f0[i], (fp[i] - fm[i]) / (2.0 * h)]);
        }
        true
    }
}

/// Scalars a [`Field`] can be evaluated on through dynamic dispatch.
pub trait FieldScalar: Scalar {
    fn eval_on(field: &dyn Field, t: f64, z: &[Self], out: &mut [Self]) -> Result<(), SystemError>;
}

impl FieldScalar for f64 {
    fn eval_on(field: &dyn Field, t: f64, z: &[f64], out: &mut [f64]) -> Result<(), SystemError> {
        field.eval(t, z, out);
        Ok(())
    }
}

impl FieldScalar for Dual {
    fn eval_on(field: &dyn Field, t: f64, z: &[Dual], out: &mut [Dual]) -> Result<(), SystemError> {
        field.eval_dual(t, z, out).then_some(()).ok_or(SystemError::NoJets)
    }
}

impl FieldScalar for Taylor3 {
    fn eval_on(field: &dyn Field, t: f64, z: &[Taylor3], out: &mut [Taylor3]) -> Result<(), SystemError> {
        field.eval_taylor(t, z, out).then_some(()).ok_or(SystemError::NoJets)
    }
}

impl FieldScalar for DualTaylor3 {
    fn eval_on(
        field: &dyn Field,
        t: f64,
        z: &[DualTaylor3],
        out: &mut [DualTaylor3],
    ) -> Result<(), SystemError> {
        field.eval_dual_taylor(t, z, out).then_some(()).ok_or(SystemError::NoJets)
    }
}

/// Scalars whose first-order lift can also be pushed through a [`Field`].
pub trait FieldLift: FieldScalar + Lift<Up = <Self as FieldLift>::UpField> {
    type UpField: FieldScalar;
}

impl FieldLift for f64 {
    type UpField = Dual;
}

impl FieldLift for Taylor3 {
    type UpField = DualTaylor3;
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DomainKind {
    LineWindow { lo: f64, hi: f64 },
    Circle { circumference: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    Clamp,
    Periodic,
}

/// The horizontal manifold `X`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DomainX {
    pub kind: DomainKind,
    pub boundary: BoundaryPolicy,
}

impl DomainX {
    pub fn circle(circumference: f64) -> Result<Self, SystemError> {
        if !(circumference > 0.0 && circumference.is_finite()) {
            return Err(SystemError::BadDomain(format!("circumference {circumference} must be positive")));
        }
        Ok(DomainX { kind: DomainKind::Circle { circumference }, boundary: BoundaryPolicy::Periodic })
    }

    pub fn window(lo: f64, hi: f64) -> Result<Self, SystemError> {
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(SystemError::BadDomain(format!("window [{lo}, {hi}] is empty")));
        }
        Ok(DomainX { kind: DomainKind::LineWindow { lo, hi }, boundary: BoundaryPolicy::Clamp })
    }

    pub fn is_circle(&self) -> bool {
        matches!(self.kind, DomainKind::Circle { .. })
    }

    pub fn circumference(&self) -> Option<f64> {
        match self.kind {
            DomainKind::Circle { circumference } => Some(circumference),
            DomainKind::LineWindow { .. } => None,
        }
    }

    /// Length of the window or the circle.
    pub fn width(&self) -> f64 {
        match self.kind {
            DomainKind::Circle { circumference } => circumference,
            DomainKind::LineWindow { lo, hi } => hi - lo,
        }
    }

    /// Representative in `[-c/2, c/2)` on a circle; identity on a window.
    pub fn reduce(&self, x: f64) -> f64 {
        match self.kind {
            DomainKind::Circle { circumference: c } => x - c * ((x + 0.5 * c) / c).floor(),
            DomainKind::LineWindow { .. } => x,
        }
    }

    /// Geodesic distance (the shorter arc on a circle).
    pub fn dist(&self, a: f64, b: f64) -> f64 {
        match self.kind {
            DomainKind::Circle { circumference: c } => {
                let d = (a - b).rem_euclid(c);
                d.min(c - d)
            }
            DomainKind::LineWindow { .. } => (a - b).abs(),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        match self.kind {
            DomainKind::Circle { .. } => x.is_finite(),
            DomainKind::LineWindow { lo, hi } => x >= lo && x <= hi,
        }
    }

    /// Uniform grid of `n` points covering the domain (circle: `n` points
    /// without the duplicate endpoint).
    pub fn uniform_grid(&self, n: usize) -> Vec<f64> {
        match self.kind {
            DomainKind::Circle { circumference: c } => {
                (0..n).map(|i| -0.5 * c + c * i as f64 / n as f64).collect()
            }
            DomainKind::LineWindow { lo, hi } => {
                if n == 1 {
                    return vec![0.5 * (lo + hi)];
                }
                (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
            }
        }
    }
}

/// Growth rates a scenario is built to have, used before any measurement.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeclaredRates {
    pub rho_m: f64,
    pub rho_minus: f64,
    pub c_m: f64,
    pub c_minus: f64,
}

/// A vector field on `X × Y` together with its metadata.
#[derive(Clone)]
pub struct SystemSpec {
    pub name: String,
    pub domain: DomainX,
    pub dim_y: usize,
    pub epsilon: f64,
    pub params: BTreeMap<String, f64>,
    pub declared: Option<DeclaredRates>,
    /// Upper bounds on `|v|` and `|Dv|` over the tube `|y| <= eta`.
    pub bounds: Option<(f64, f64)>,
    pub eta: f64,
    field: Arc<dyn Field>,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("dim_y", &self.dim_y)
            .field("epsilon", &self.epsilon)
            .field("params", &self.params)
            .finish()
    }
}

impl SystemSpec {
    pub fn new(name: impl Into<String>, domain: DomainX, dim_y: usize, field: Arc<dyn Field>) -> Self {
        assert_eq!(field.dim(), dim_y + 1, "field dimension must be 1 + dim_y");
        SystemSpec {
            name: name.into(),
            domain,
            dim_y,
            epsilon: 0.0,
            params: BTreeMap::new(),
            declared: None,
            bounds: None,
            eta: 0.5,
            field,
        }
    }

    /// Builds a system from separate horizontal and vertical closures. Its
    /// Jacobians are central differences.
    pub fn from_fns(
        name: impl Into<String>,
        domain: DomainX,
        dim_y: usize,
        v_x: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static,
        v_y: impl Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        let field = SampledField::new(dim_y + 1, move |t, z, out| {
            out[0] = v_x(z[0], &z[1..], t);
            v_y(z[0], &z[1..], t, &mut out[1..]);
        });
        SystemSpec::new(name, domain, dim_y, Arc::new(field))
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon = eps;
        self
    }

    pub fn field(&self) -> &dyn Field {
        self.field.as_ref()
    }

    pub fn field_arc(&self) -> Arc<dyn Field> {
        self.field.clone()
    }

    pub fn dim(&self) -> usize {
        self.dim_y + 1
    }

    pub fn has_jets(&self) -> bool {
        let z = vec![Taylor3::cst(0.0); self.dim()];
        let mut out = z.clone();
        self.field.eval_taylor(0.0, &z, &mut out)
    }

    pub fn eval<S: FieldScalar>(&self, t: f64, z: &[S], out: &mut [S]) -> Result<(), SystemError> {
        S::eval_on(self.field.as_ref(), t, z, out)
    }

    pub fn v_x(&self, x: f64, y: &[f64], t: f64) -> f64 {
        let mut z = Vec::with_capacity(self.dim());
        z.push(x);
        z.extend_from_slice(y);
        let mut out = vec![0.0; self.dim()];
        self.field.eval(t, &z, &mut out);
        out[0]
    }

    pub fn v_y(&self, x: f64, y: &[f64], t: f64, out: &mut [f64]) {
        let mut z = Vec::with_capacity(self.dim());
        z.push(x);
        z.extend_from_slice(y);
        let mut full = vec![0.0; self.dim()];
        self.field.eval(t, &z, &mut full);
        out.copy_from_slice(&full[1..]);
    }

    /// Full Jacobian `Dv(z)` (row-major, `dim × dim`).
    pub fn jacobian(&self, t: f64, z: &[f64]) -> Result<Vec<f64>, SystemError> {
        let n = self.dim();
        let mut jac = vec![0.0; n * n];
        let mut zd = vec![Dual::cst(0.0); n];
        let mut out = vec![Dual::cst(0.0); n];
        for col in 0..n {
            for i in 0..n {
                zd[i] = Jet::variable(z[i], if i == col { 1.0 } else { 0.0 });
            }
            self.eval(t, &zd, &mut out)?;
            for row in 0..n {
                jac[row * n + col] = out[row].c[1];
            }
        }
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(SystemError::NonFiniteJacobian { x: z[0], y: z[1..].to_vec() });
        }
        Ok(jac)
    }

    /// Samples `|v|` and `|Dv|` (Frobenius) over the tube `|y| <= eta`.
    pub fn sample_bounds(&self, eta: f64, nx: usize, ny: usize) -> Result<(f64, f64), SystemError> {
        let mut vmax: f64 = 0.0;
        let mut dmax: f64 = 0.0;
        let mut out = vec![0.0; self.dim()];
        for x in self.domain.uniform_grid(nx) {
            for j in 0..ny {
                let frac = if ny == 1 { 0.0 } else { -1.0 + 2.0 * j as f64 / (ny - 1) as f64 };
                let mut z = vec![x];
                z.extend(std::iter::repeat(eta * frac).take(self.dim_y));
                self.field.eval(0.0, &z, &mut out);
                vmax = vmax.max(norm(&out));
                dmax = dmax.max(norm(&self.jacobian(0.0, &z)?));
            }
        }
        Ok((vmax, dmax))
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// The base manifold `M = graph(h)` the vertical field is linearized along.
#[derive(Clone)]
pub enum BaseGraph {
    Zero,
    Custom(Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>),
}

impl BaseGraph {
    fn at(&self, x: f64, dim_y: usize) -> Vec<f64> {
        match self {
            BaseGraph::Zero => vec![0.0; dim_y],
            BaseGraph::Custom(h) => h(x),
        }
    }
}

/// `v_Y(x, y) = A(x) y + f̃(x, y)` with `A(x) = D_y v_Y(x, h(x))`.
#[derive(Clone)]
pub struct LinearizedSystem {
    pub spec: Arc<SystemSpec>,
    pub base: BaseGraph,
}

impl fmt::Debug for LinearizedSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearizedSystem").field("spec", &self.spec.name).finish()
    }
}

/// Splits the vertical field into its linear part along `h` and the remainder.
///
/// The decomposition is validated at a few sample points; a non-finite
/// Jacobian is reported with its location.
pub fn decompose(spec: SystemSpec, base: BaseGraph) -> Result<LinearizedSystem, SystemError> {
    let lin = LinearizedSystem { spec: Arc::new(spec), base };
    for x in lin.spec.domain.uniform_grid(16) {
        let a = lin.a_matrix(x, 0.0)?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(SystemError::NonFiniteJacobian { x, y: lin.base.at(x, lin.spec.dim_y) });
        }
    }
    Ok(lin)
}

impl LinearizedSystem {
    pub fn dim_y(&self) -> usize {
        self.spec.dim_y
    }

    pub fn domain(&self) -> &DomainX {
        &self.spec.domain
    }

    /// Full field at `(x, y)` over any dispatchable scalar.
    pub fn eval<S: FieldScalar>(&self, t: f64, x: S, y: &[S], out: &mut [S]) -> Result<(), SystemError> {
        let mut z = Vec::with_capacity(1 + y.len());
        z.push(x);
        z.extend_from_slice(y);
        self.spec.eval(t, &z, out)
    }

    /// `A(x)` as a row-major `m × m` matrix, over `f64` or jets.
    pub fn a_matrix<S: FieldLift>(&self, x: S, t: f64) -> Result<Vec<S>, SystemError> {
        let m = self.dim_y();
        let h: Vec<S> = match &self.base {
            BaseGraph::Zero => vec![S::zero(); m],
            BaseGraph::Custom(h) => {
                // Plain values only: jet-valued x needs a jet-valued h.
                if std::any::TypeId::of::<S>() != std::any::TypeId::of::<f64>() {
                    return Err(SystemError::NonZeroBaseGraph);
                }
                h(x.value()).into_iter().map(S::cst).collect()
            }
        };
        let mut a = vec![S::zero(); m * m];
        let mut z = vec![S::Up::cst(0.0); m + 1];
        let mut out = vec![S::Up::cst(0.0); m + 1];
        for col in 0..m {
            z[0] = S::seed(x, 0.0);
            for i in 0..m {
                z[i + 1] = S::seed(h[i], if i == col { 1.0 } else { 0.0 });
            }
            <S::UpField as FieldScalar>::eval_on(self.spec.field(), t, &z, &mut out)?;
            for row in 0..m {
                a[row * m + col] = S::slope(out[row + 1]);
            }
        }
        Ok(a)
    }

    /// The nonlinearity `f̃(x, y) = v_Y(x, y) - A(x) y`.
    pub fn f_tilde(&self, x: f64, y: &[f64], t: f64) -> Result<Vec<f64>, SystemError> {
        let m = self.dim_y();
        let mut full = vec![0.0; m + 1];
        self.eval(t, x, y, &mut full)?;
        let a = self.a_matrix(x, t)?;
        Ok((0..m)
            .map(|i| full[i + 1] - (0..m).map(|j| a[i * m + j] * y[j]).sum::<f64>())
            .collect())
    }

    pub fn base_at(&self, x: f64) -> Vec<f64> {
        self.base.at(x, self.dim_y())
    }

    /// Largest sampled norm of `D f̃ = (D_x f̃, D_y f̃)` over the tube `|y| <= eta`.
    pub fn measure_zeta(&self, eta: f64, nx: usize, ny: usize) -> Result<f64, SystemError> {
        let m = self.dim_y();
        let mut zeta: f64 = 0.0;
        let h = 1e-6;
        for x in self.domain().uniform_grid(nx) {
            for j in 0..ny {
                let frac = if ny == 1 { 0.0 } else { -1.0 + 2.0 * j as f64 / (ny - 1) as f64 };
                let mut y = self.base_at(x);
                for v in y.iter_mut() {
                    *v += eta * frac;
                }
                let jac = self.spec.jacobian(0.0, &[&[x][..], &y].concat())?;
                let a = self.a_matrix(x, 0.0)?;
                let ap = self.a_matrix(x + h, 0.0)?;
                let am = self.a_matrix(x - h, 0.0)?;
                let n = m + 1;
                let mut acc = 0.0;
                for r in 0..m {
                    // D_x f̃ = D_x v_Y - (DA) y
                    let mut dx = jac[(r + 1) * n];
                    for c in 0..m {
                        dx -= (ap[r * m + c] - am[r * m + c]) / (2.0 * h) * y[c];
                    }
                    acc += dx * dx;
                    for c in 0..m {
                        let dy = jac[(r + 1) * n + c + 1] - a[r * m + c];
                        acc += dy * dy;
                    }
                }
                zeta = zeta.max(acc.sqrt());
            }
        }
        Ok(zeta)
    }
}
