//! Real spherical-harmonic color decoding up to degree 3.

use crate::error::{Error, Result};

pub const MAX_SH_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of basis functions for a degree.
#[inline]
pub const fn basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Coefficient count per primitive (RGB per basis function).
#[inline]
pub const fn coeff_count(degree: usize) -> usize {
    3 * basis_count(degree)
}

/// Evaluates the basis at unit direction `d`, writing values and (optionally)
/// their Jacobian with respect to `d`.
pub fn eval_basis(degree: usize, d: &[f64; 3], values: &mut [f64; 16], jac: Option<&mut [[f64; 3]; 16]>) {
    let [x, y, z] = *d;
    values[0] = C0;
    if degree >= 1 {
        values[1] = -C1 * y;
        values[2] = C1 * z;
        values[3] = -C1 * x;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    if degree >= 2 {
        values[4] = C2[0] * x * y;
        values[5] = C2[1] * y * z;
        values[6] = C2[2] * (2.0 * zz - xx - yy);
        values[7] = C2[3] * x * z;
        values[8] = C2[4] * (xx - yy);
    }
    if degree >= 3 {
        values[9] = C3[0] * y * (3.0 * xx - yy);
        values[10] = C3[1] * x * y * z;
        values[11] = C3[2] * y * (4.0 * zz - xx - yy);
        values[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        values[13] = C3[4] * x * (4.0 * zz - xx - yy);
        values[14] = C3[5] * z * (xx - yy);
        values[15] = C3[6] * x * (xx - 3.0 * yy);
    }
    let Some(j) = jac else { return };
    j[0] = [0.0; 3];
    if degree >= 1 {
        j[1] = [0.0, -C1, 0.0];
        j[2] = [0.0, 0.0, C1];
        j[3] = [-C1, 0.0, 0.0];
    }
    if degree >= 2 {
        j[4] = [C2[0] * y, C2[0] * x, 0.0];
        j[5] = [0.0, C2[1] * z, C2[1] * y];
        j[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
        j[7] = [C2[3] * z, 0.0, C2[3] * x];
        j[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    }
    if degree >= 3 {
        j[9] = [C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
        j[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
        j[11] = [
            -2.0 * C3[2] * x * y,
            C3[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * C3[2] * y * z,
        ];
        j[12] = [
            -6.0 * C3[3] * x * z,
            -6.0 * C3[3] * y * z,
            C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ];
        j[13] = [
            C3[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * C3[4] * x * y,
            8.0 * C3[4] * x * z,
        ];
        j[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
        j[15] = [
            C3[6] * (3.0 * xx - 3.0 * yy),
            -6.0 * C3[6] * x * y,
            0.0,
        ];
    }
}

fn check_dims(degree: usize, coeffs: &[f64]) -> Result<()> {
    if degree > MAX_SH_DEGREE {
        return Err(Error::Invalid(format!("SH degree {degree} exceeds {MAX_SH_DEGREE}")));
    }
    if coeffs.len() != coeff_count(degree) {
        return Err(Error::Dimension {
            what: "SH coefficients",
            expected: coeff_count(degree),
            actual: coeffs.len(),
        });
    }
    Ok(())
}

/// Unclamped per-channel SH evaluation. Coefficients are laid out basis-major:
/// `coeffs[3 * k + channel]`.
pub fn eval_raw(degree: usize, coeffs: &[f64], dir: &[f64; 3]) -> [f64; 3] {
    let mut basis = [0.0; 16];
    eval_basis(degree, dir, &mut basis, None);
    let mut c = [0.0; 3];
    for (k, b) in basis.iter().take(basis_count(degree)).enumerate() {
        for ch in 0..3 {
            c[ch] += b * coeffs[3 * k + ch];
        }
    }
    c
}

/// Decoded color: SH evaluation clamped to be non-negative.
pub fn sh_to_color(degree: usize, coeffs: &[f64], view_dir: &[f64; 3]) -> Result<[f64; 3]> {
    check_dims(degree, coeffs)?;
    let n = (view_dir[0].powi(2) + view_dir[1].powi(2) + view_dir[2].powi(2)).sqrt();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("view direction norm {n} is not 1")));
    }
    Ok(eval_raw(degree, coeffs, view_dir).map(|v| v.max(0.0)))
}

/// Backward of the clamped color: accumulates into `d_coeffs` and returns the
/// gradient with respect to the (unit) direction.
pub fn color_backward(
    degree: usize,
    coeffs: &[f64],
    dir: &[f64; 3],
    d_color: &[f64; 3],
    d_coeffs: &mut [f64],
) -> [f64; 3] {
    let mut basis = [0.0; 16];
    let mut jac = [[0.0; 3]; 16];
    eval_basis(degree, dir, &mut basis, Some(&mut jac));
    let nb = basis_count(degree);
    let mut raw = [0.0; 3];
    for k in 0..nb {
        for ch in 0..3 {
            raw[ch] += basis[k] * coeffs[3 * k + ch];
        }
    }
    let g: [f64; 3] = std::array::from_fn(|ch| if raw[ch] > 0.0 { d_color[ch] } else { 0.0 });
    let mut d_dir = [0.0; 3];
    for k in 0..nb {
        let mut s = 0.0;
        for ch in 0..3 {
            d_coeffs[3 * k + ch] += g[ch] * basis[k];
            s += g[ch] * coeffs[3 * k + ch];
        }
        for a in 0..3 {
            d_dir[a] += s * jac[k][a];
        }
    }
    d_dir
}
