//! Persistent normally hyperbolic invariant manifolds on trivial bundles
//! `X × Y` by the Lyapunov–Perron method.

pub mod curves;
pub mod flows;
pub mod graphtransform;
pub mod interp;
pub mod jet;
pub mod linalg;
pub mod perron;
pub mod scenarios;
pub mod smoothness;
pub mod system;
