use serde::{Deserialize, Serialize};

/// Value `rho_M` is raised to when it is (numerically) zero.
pub const RHO_BUMP: f64 = 1e-3;

/// Growth numbers of the unperturbed NHIM and their modified counterparts.
///
/// Tangential growth is bounded by `C_M e^{-rho_M t}` for `t <= 0`, normal
/// contraction by `C_minus e^{rho_minus t}` for `t >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralConstants {
    pub rho_m: f64,
    pub rho_minus: f64,
    pub c_m: f64,
    pub c_minus: f64,
    pub rho_x: f64,
    pub rho_y: f64,
    pub c_x: f64,
    pub c_y: f64,
    /// Gap order `r = k + alpha`.
    pub r: f64,
    pub k: u32,
    pub alpha: f64,
    pub delta_rho: f64,
}

impl SpectralConstants {
    /// Fills in the modified numbers for gap order `r`, raising `rho_m` to
    /// `rho_bump` first if it is smaller.
    pub fn new(rho_m: f64, rho_minus: f64, c_m: f64, c_minus: f64, r: f64, rho_bump: f64) -> Self {
        let rho_m = rho_m.max(rho_bump);
        let delta_rho = -r * rho_m - rho_minus;
        let k = (r.floor() as u32).max(1);
        let alpha = (r - k as f64).clamp(0.0, 1.0);
        SpectralConstants {
            rho_m,
            rho_minus,
            c_m,
            c_minus,
            rho_x: -rho_m - delta_rho / (4.0 * r),
            rho_y: rho_minus + delta_rho / 4.0,
            c_x: c_m,
            c_y: c_minus,
            r,
            k,
            alpha,
            delta_rho,
        }
    }

    /// Supremum of admissible gap orders, `rho_minus / (-rho_m)`.
    pub fn max_r(&self) -> f64 {
        if self.rho_minus >= 0.0 {
            0.0
        } else {
            self.rho_minus / -self.rho_m
        }
    }

    /// Default solver weight, strictly between `rho_y / r` and `rho_x`.
    pub fn default_rho(&self) -> f64 {
        if self.delta_rho > 0.0 {
            self.rho_x - self.delta_rho / (4.0 * self.r)
        } else {
            -self.rho_m
        }
    }

    /// Largest integer order `k < r` certified by the gap, capped at `cap`.
    pub fn max_certified_order(&self, cap: u32) -> u32 {
        let mr = self.max_r();
        let mut k = 0;
        while k < cap && ((k + 1) as f64) < mr {
            k += 1;
        }
        k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub holds: bool,
    pub r: f64,
    pub max_r: f64,
    pub delta_rho: f64,
    pub bumped: bool,
    pub constants: SpectralConstants,
    pub rho: f64,
    pub message: String,
}

/// Checks `rho_minus < -r rho_m` and the ordering of the modified numbers.
pub fn validate_gap(sc: &SpectralConstants) -> GapReport {
    let bumped = sc.rho_m <= RHO_BUMP;
    let strict = sc.rho_minus < -sc.r * sc.rho_m && sc.delta_rho > 0.0;
    let ordered = sc.rho_y < sc.r * sc.rho_x && sc.r * sc.rho_x <= sc.rho_x && sc.rho_x < 0.0;
    let holds = strict && ordered && sc.rho_minus < 0.0 && sc.r >= 1.0;
    let message = if holds {
        format!("gap holds: {} < -{} * {}", sc.rho_minus, sc.r, sc.rho_m)
    } else if sc.r < 1.0 {
        format!("gap order r = {} is below 1", sc.r)
    } else {
        format!(
            "gap fails: rho_minus = {} is not below -r * rho_m = {} (max r = {})",
            sc.rho_minus,
            -sc.r * sc.rho_m,
            sc.max_r()
        )
    };
    GapReport {
        holds,
        r: sc.r,
        max_r: sc.max_r(),
        delta_rho: sc.delta_rho,
        bumped,
        constants: *sc,
        rho: sc.default_rho(),
        message,
    }
}
