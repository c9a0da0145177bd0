//! Truncated Taylor arithmetic.
//!
//! A [`Jet<S, N>`] carries the Taylor coefficients `c[0..N]` of a function of
//! one hidden parameter `s`, `c[0] + c[1] s + ... + c[N-1] s^(N-1)`. Every
//! vector field in this crate is written once, generically over [`Scalar`], and
//! evaluating it on jets gives exact derivatives up to order `N - 1`. Jets nest:
//! `Jet<Jet<f64, 4>, 2>` differentiates a third-order jet once more in an
//! independent direction, which is how Jacobians of jet-valued states are formed.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Number-like values the vector fields are evaluated on.
pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign<f64>
{
    fn cst(v: f64) -> Self;
    /// The plain value, i.e. the innermost zeroth coefficient.
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn atan(self) -> Self;
    /// Largest coefficient-wise difference, for convergence tests on jets.
    fn dist(self, other: Self) -> f64;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn tanh(self) -> Self {
        let e = (self * 2.0).exp();
        (e - 1.0) / (e + 1.0)
    }

    fn powi(self, n: i32) -> Self {
        if n < 0 {
            return Self::cst(1.0) / self.powi(-n);
        }
        let mut acc = Self::cst(1.0);
        let mut base = self;
        let mut k = n as u32;
        while k > 0 {
            if k & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            k >>= 1;
        }
        acc
    }

    /// `self^p` for a positive base.
    fn powf(self, p: f64) -> Self {
        (self.ln() * p).exp()
    }
}

impl Scalar for f64 {
    fn dist(self, other: Self) -> f64 {
        (self - other).abs()
    }
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
}

/// Taylor polynomial truncated after `N` coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<S, const N: usize> {
    pub c: [S; N],
}

/// First-order jets (dual numbers), used for Jacobians.
pub type Dual = Jet<f64, 2>;
/// Third-order jets, used for derivative hierarchies up to order three.
pub type Taylor3 = Jet<f64, 4>;
/// Directional first derivatives of third-order jets.
pub type DualTaylor3 = Jet<Taylor3, 2>;

impl<S: Scalar, const N: usize> Jet<S, N> {
    pub fn constant(v: S) -> Self {
        let mut c = [S::zero(); N];
        c[0] = v;
        Jet { c }
    }

    /// `v + d * s`: the seed of a derivative in direction `d`.
    pub fn variable(v: S, d: S) -> Self {
        let mut c = [S::zero(); N];
        c[0] = v;
        if N > 1 {
            c[1] = d;
        }
        Jet { c }
    }

    pub fn from_coeffs(c: [S; N]) -> Self {
        Jet { c }
    }

    /// `k!` times the `k`th coefficient, i.e. the `k`th derivative in `s`.
    pub fn derivative(&self, k: usize) -> S {
        let mut f = 1.0;
        for i in 2..=k {
            f *= i as f64;
        }
        self.c[k] * f
    }

    fn map_tail(head: S, rec: impl Fn(&[S], usize) -> S) -> Self {
        let mut c = [S::zero(); N];
        c[0] = head;
        for k in 1..N {
            c[k] = rec(&c, k);
        }
        Jet { c }
    }
}

impl<S: Scalar, const N: usize> Add for Jet<S, N> {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        for k in 0..N {
            self.c[k] += o.c[k];
        }
        self
    }
}

impl<S: Scalar, const N: usize> Sub for Jet<S, N> {
    type Output = Self;
    fn sub(mut self, o: Self) -> Self {
        for k in 0..N {
            self.c[k] -= o.c[k];
        }
        self
    }
}

impl<S: Scalar, const N: usize> Neg for Jet<S, N> {
    type Output = Self;
    fn neg(mut self) -> Self {
        for k in 0..N {
            self.c[k] = -self.c[k];
        }
        self
    }
}

impl<S: Scalar, const N: usize> Mul for Jet<S, N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut c = [S::zero(); N];
        for k in 0..N {
            let mut acc = self.c[0] * o.c[k];
            for i in 1..=k {
                acc += self.c[i] * o.c[k - i];
            }
            c[k] = acc;
        }
        Jet { c }
    }
}

impl<S: Scalar, const N: usize> Div for Jet<S, N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let mut q = [S::zero(); N];
        for k in 0..N {
            let mut acc = self.c[k];
            for j in 1..=k {
                acc -= o.c[j] * q[k - j];
            }
            q[k] = acc / o.c[0];
        }
        Jet { c: q }
    }
}

impl<S: Scalar, const N: usize> Add<f64> for Jet<S, N> {
    type Output = Self;
    fn add(mut self, o: f64) -> Self {
        self.c[0] = self.c[0] + o;
        self
    }
}

impl<S: Scalar, const N: usize> Sub<f64> for Jet<S, N> {
    type Output = Self;
    fn sub(mut self, o: f64) -> Self {
        self.c[0] = self.c[0] - o;
        self
    }
}

impl<S: Scalar, const N: usize> Mul<f64> for Jet<S, N> {
    type Output = Self;
    fn mul(mut self, o: f64) -> Self {
        for k in 0..N {
            self.c[k] = self.c[k] * o;
        }
        self
    }
}

impl<S: Scalar, const N: usize> Div<f64> for Jet<S, N> {
    type Output = Self;
    fn div(mut self, o: f64) -> Self {
        for k in 0..N {
            self.c[k] = self.c[k] / o;
        }
        self
    }
}

impl<S: Scalar, const N: usize> AddAssign for Jet<S, N> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<S: Scalar, const N: usize> SubAssign for Jet<S, N> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<S: Scalar, const N: usize> MulAssign<f64> for Jet<S, N> {
    fn mul_assign(&mut self, o: f64) {
        *self = *self * o;
    }
}

impl<S: Scalar, const N: usize> Scalar for Jet<S, N> {
    fn cst(v: f64) -> Self {
        Jet::constant(S::cst(v))
    }

    fn value(self) -> f64 {
        self.c[0].value()
    }

    fn dist(self, other: Self) -> f64 {
        self.c.iter().zip(other.c.iter()).map(|(a, b)| a.dist(*b)).fold(0.0, f64::max)
    }

    fn sin(self) -> Self {
        sin_cos(&self).0
    }

    fn cos(self) -> Self {
        sin_cos(&self).1
    }

    fn exp(self) -> Self {
        let a = self.c;
        Jet::map_tail(a[0].exp(), |e, k| {
            let mut acc = S::zero();
            for i in 1..=k {
                acc += a[i] * e[k - i] * (i as f64);
            }
            acc / k as f64
        })
    }

    fn ln(self) -> Self {
        let a = self.c;
        Jet::map_tail(a[0].ln(), |l, k| {
            let mut acc = a[k];
            for j in 1..k {
                acc -= a[j] * l[k - j] * ((k - j) as f64 / k as f64);
            }
            acc / a[0]
        })
    }

    fn sqrt(self) -> Self {
        let a = self.c;
        Jet::map_tail(a[0].sqrt(), |r, k| {
            let mut acc = a[k];
            for i in 1..k {
                acc -= r[i] * r[k - i];
            }
            acc / (r[0] * 2.0)
        })
    }

    fn atan(self) -> Self {
        let a = self.c;
        let w = (self * self + 1.0).c;
        Jet::map_tail(a[0].atan(), |t, k| {
            let mut acc = a[k];
            for j in 1..k {
                acc -= w[j] * t[k - j] * ((k - j) as f64 / k as f64);
            }
            acc / w[0]
        })
    }
}

fn sin_cos<S: Scalar, const N: usize>(x: &Jet<S, N>) -> (Jet<S, N>, Jet<S, N>) {
    let a = x.c;
    let mut s = [S::zero(); N];
    let mut c = [S::zero(); N];
    s[0] = a[0].sin();
    c[0] = a[0].cos();
    for k in 1..N {
        let mut ds = S::zero();
        let mut dc = S::zero();
        for i in 1..=k {
            let w = i as f64 / k as f64;
            ds += a[i] * c[k - i] * w;
            dc -= a[i] * s[k - i] * w;
        }
        s[k] = ds;
        c[k] = dc;
    }
    (Jet { c: s }, Jet { c })
}

/// Scalars that can be lifted once more to carry a directional derivative.
///
/// Jacobians of a field evaluated along jet-valued states need the field on
/// `Jet<Self, 2>`; the associated `Up` type names that lift.
pub trait Lift: Scalar {
    type Up: Scalar;
    fn seed(v: Self, d: f64) -> Self::Up;
    fn base(u: Self::Up) -> Self;
    fn slope(u: Self::Up) -> Self;
}

impl Lift for f64 {
    type Up = Dual;
    fn seed(v: f64, d: f64) -> Dual {
        Jet::variable(v, d)
    }
    fn base(u: Dual) -> f64 {
        u.c[0]
    }
    fn slope(u: Dual) -> f64 {
        u.c[1]
    }
}

impl Lift for Taylor3 {
    type Up = DualTaylor3;
    fn seed(v: Taylor3, d: f64) -> DualTaylor3 {
        Jet::variable(v, Taylor3::cst(d))
    }
    fn base(u: DualTaylor3) -> Taylor3 {
        u.c[0]
    }
    fn slope(u: DualTaylor3) -> Taylor3 {
        u.c[1]
    }
}
