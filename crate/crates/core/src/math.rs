//! Scalar activations, quaternion helpers and small numeric utilities shared
//! by the model, the rasterizer and the motion fields.

use nalgebra::{Matrix3, Vector3, Vector4};

/// Lower bound added to every activated scale.
pub const SCALE_FLOOR: f64 = 1e-6;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Activated scale: `softplus(raw) + SCALE_FLOOR`.
#[inline]
pub fn activate_scale(raw: f64) -> f64 {
    softplus(raw) + SCALE_FLOOR
}

/// Raw scale that activates to `s`.
#[inline]
pub fn deactivate_scale(s: f64) -> f64 {
    softplus_inv((s - SCALE_FLOOR).max(1e-300))
}

/// Rounds to the nearest single-precision value. Parameters are kept
/// f32-representable so that the f32 checkpoint format is lossless.
#[inline]
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

pub fn quantize_slice(values: &mut [f64]) {
    for v in values {
        *v = to_f32_grid(*v);
    }
}

/// Rotation matrix of a unit quaternion stored as `(w, x, y, z)`.
pub fn rotation_from_unit_quat(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of a scalar with respect to a unit quaternion, given the
/// gradient with respect to its rotation matrix.
pub fn unit_quat_grad_from_rotation_grad(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

/// Normalizes `q`, returning the unit quaternion and the original norm.
pub fn normalize_quat(q: &[f64; 4]) -> ([f64; 4], f64) {
    let n = Vector4::from(*q).norm();
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

/// Pulls a gradient on `q / |q|` back to `q`.
pub fn normalize_quat_backward(unit: &[f64; 4], norm: f64, g: &[f64; 4]) -> [f64; 4] {
    let dot = unit[0] * g[0] + unit[1] * g[1] + unit[2] * g[2] + unit[3] * g[3];
    [
        (g[0] - unit[0] * dot) / norm,
        (g[1] - unit[1] * dot) / norm,
        (g[2] - unit[2] * dot) / norm,
        (g[3] - unit[3] * dot) / norm,
    ]
}

#[inline]
pub fn vec3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

#[inline]
pub fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Derives an independent 64-bit seed from a base seed and a stream tag.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    // splitmix64 over the tag sequence
    let mut s = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        s = s.wrapping_add(t.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        let mut z = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        s = z ^ (z >> 31);
    }
    s
}
