//! Real Wigner-D matrices of SO(3).
//!
//! `D^l(g)` acts on coefficient vectors in the basis of real spherical
//! harmonics of degree `l` (Condon-Shortley phase, ordered `m = -l..=l`).
//! It is built as `conj(U) D_c(alpha, beta, gamma) U^T`, where `D_c` is the
//! complex Wigner matrix at the ZYZ Euler angles of `g` and `U` maps complex
//! harmonics to real ones. For `l = 1` the real harmonics are `(y, z, x)`,
//! so `D^1(g) = L g L^T` with [`l1_permutation`] `L`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::group::Rotation3;

fn factorial(n: i64) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

/// Wigner small-d matrix element `d^l_{m' m}(beta)`.
pub fn small_d(l: i64, mp: i64, m: i64, beta: f64) -> f64 {
    let (s_half, c_half) = (beta / 2.0).sin_cos();
    let pre = (factorial(l + mp) * factorial(l - mp) * factorial(l + m) * factorial(l - m)).sqrt();
    let s_min = 0.max(m - mp);
    let s_max = (l + m).min(l - mp);
    let mut sum = 0.0;
    for s in s_min..=s_max {
        let denom = factorial(l + m - s) * factorial(s) * factorial(mp - m + s) * factorial(l - mp - s);
        let sign = if (mp - m + s) % 2 == 0 { 1.0 } else { -1.0 };
        let cos_pow = (2 * l + m - mp - 2 * s) as i32;
        let sin_pow = (mp - m + 2 * s) as i32;
        sum += sign * c_half.powi(cos_pow) * s_half.powi(sin_pow) / denom;
    }
    pre * sum
}

/// Complex-to-real change of basis `U` (rows: real `m`, columns: complex `m`).
fn complex_to_real(l: i64) -> DMatrix<Complex64> {
    let n = (2 * l + 1) as usize;
    let idx = |m: i64| (m + l) as usize;
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut u = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    u[(idx(0), idx(0))] = Complex64::new(1.0, 0.0);
    for m in 1..=l {
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        u[(idx(m), idx(m))] = Complex64::new(sign * r, 0.0);
        u[(idx(m), idx(-m))] = Complex64::new(r, 0.0);
        u[(idx(-m), idx(-m))] = Complex64::new(0.0, r);
        u[(idx(-m), idx(m))] = Complex64::new(0.0, -sign * r);
    }
    u
}

/// Real orthogonal `(2l+1) x (2l+1)` Wigner-D matrix of `g`.
pub fn wigner_d_real(l: u32, g: &Rotation3) -> DMatrix<f64> {
    let l = l as i64;
    let n = (2 * l + 1) as usize;
    if l == 0 {
        return DMatrix::identity(1, 1);
    }
    let (alpha, beta, gamma) = g.euler_zyz();
    let d = DMatrix::from_fn(n, n, |i, j| {
        let mp = i as i64 - l;
        let m = j as i64 - l;
        let phase = -(mp as f64 * alpha + m as f64 * gamma);
        Complex64::from_polar(small_d(l, mp, m, beta), phase)
    });
    let u = complex_to_real(l);
    let real = u.map(|z| z.conj()) * d * u.transpose();
    debug_assert!(
        real.iter().all(|z| z.im.abs() < 1e-12),
        "real Wigner-D has imaginary residue"
    );
    real.map(|z| z.re)
}

/// Permutation `L` with `D^1(g) L = L g`: row `r` of `L` selects the
/// Cartesian axis of real harmonic `m = r - 1`, i.e. `(y, z, x)`.
pub fn l1_permutation() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0])
}
