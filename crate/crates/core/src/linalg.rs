//! Dense row-major matrices of the small sizes this crate needs.

use crate::jet::Scalar;

pub fn identity<S: Scalar>(n: usize) -> Vec<S> {
    let mut m = vec![S::zero(); n * n];
    for i in 0..n {
        m[i * n + i] = S::cst(1.0);
    }
    m
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        for l in 0..k {
            let a_il = a[i * k + l];
            for j in 0..m {
                out[i * m + j] += a_il * b[l * m + j];
            }
        }
    }
    out
}

pub fn matvec<S: Scalar>(a: &[S], x: &[S], out: &mut [S]) {
    let m = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = S::zero();
        for j in 0..m {
            acc += a[i * m + j] * x[j];
        }
        *o = acc;
    }
}

/// Inverse by Gauss–Jordan elimination with partial pivoting.
pub fn inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = identity::<f64>(n);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))?;
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        for j in 0..n {
            m.swap(col * n + j, piv * n + j);
            inv.swap(col * n + j, piv * n + j);
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = m[i * n + col];
                if f != 0.0 {
                    for j in 0..n {
                        m[i * n + j] -= f * m[col * n + j];
                        inv[i * n + j] -= f * inv[col * n + j];
                    }
                }
            }
        }
    }
    Some(inv)
}

pub fn frobenius(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest eigenvalue of the symmetric part of `a` (cyclic Jacobi sweeps).
pub fn sym_max_eig(a: &[f64], n: usize) -> f64 {
    let mut s: Vec<f64> = (0..n * n).map(|k| 0.5 * (a[k] + a[(k % n) * n + k / n])).collect();
    for _ in 0..50 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| s[i * n + j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (s[q * n + q] - s[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (skp, skq) = (s[k * n + p], s[k * n + q]);
                    s[k * n + p] = c * skp - sn * skq;
                    s[k * n + q] = sn * skp + c * skq;
                }
                for k in 0..n {
                    let (spk, sqk) = (s[p * n + k], s[q * n + k]);
                    s[p * n + k] = c * spk - sn * sqk;
                    s[q * n + k] = sn * spk + c * sqk;
                }
            }
        }
    }
    (0..n).map(|i| s[i * n + i]).fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_round_trip() {
        let a = [2.0, 1.0, 0.5, -1.0, 3.0, 0.0, 0.2, 0.1, 1.5];
        let inv = inverse(&a, 3).unwrap();
        let p = matmul(&a, &inv, 3, 3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((p[i * 3 + j] - e).abs() < 1e-14);
            }
        }
        assert!(inverse(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn symmetric_part_eigenvalue() {
        assert!((sym_max_eig(&[-2.0], 1) + 2.0).abs() < 1e-15);
        // symmetric part [[1, 1], [1, 1]] has eigenvalues 0 and 2
        assert!((sym_max_eig(&[1.0, 2.0, 0.0, 1.0], 2) - 2.0).abs() < 1e-12);
        let a = [-1.0, 0.3, 0.0, 0.3, -2.0, 0.1, 0.0, 0.1, -0.5];
        let l = sym_max_eig(&a, 3);
        // characteristic polynomial vanishes at the eigenvalue
        let det = |x: f64| {
            let m = [a[0] - x, a[1], a[2], a[3], a[4] - x, a[5], a[6], a[7], a[8] - x];
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
        };
        assert!(det(l).abs() < 1e-12 && l > -0.5 - 1e-12);
    }
}
