use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::forward::{gaussian_weight, RenderOutput, TILE_SIZE, TRANSMITTANCE_EPS};
use super::project::{projection_parts, MIN_ALPHA};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{normalize_quat_backward, sigmoid, unit_quat_grad_from_rotation_grad};
use crate::model::sh;
use crate::model::GaussianPrimitive;

/// Gradients laid out like the primitive parameters (raw scale, raw
/// opacity, unnormalized rotation).
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGrads {
    pub sh_stride: usize,
    pub mean: Vec<[f64; 3]>,
    pub scale_raw: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity_raw: Vec<f64>,
    pub sh: Vec<f64>,
}

impl PrimitiveGrads {
    pub fn zeros(count: usize, sh_stride: usize) -> Self {
        Self {
            sh_stride,
            mean: vec![[0.0; 3]; count],
            scale_raw: vec![[0.0; 3]; count],
            rotation: vec![[0.0; 4]; count],
            opacity_raw: vec![0.0; count],
            sh: vec![0.0; count * sh_stride],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        &self.sh[i * self.sh_stride..(i + 1) * self.sh_stride]
    }

    pub fn add_assign(&mut self, other: &PrimitiveGrads) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        for i in 0..self.len() {
            add(&mut self.mean[i], &other.mean[i]);
            add(&mut self.scale_raw[i], &other.scale_raw[i]);
            add(&mut self.rotation[i], &other.rotation[i]);
            self.opacity_raw[i] += other.opacity_raw[i];
        }
        add(&mut self.sh, &other.sh);
    }

    pub fn max_abs(&self) -> f64 {
        self.mean
            .iter()
            .flatten()
            .chain(self.scale_raw.iter().flatten())
            .chain(self.rotation.iter().flatten())
            .chain(&self.opacity_raw)
            .chain(&self.sh)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug)]
pub struct RenderGrads {
    pub params: PrimitiveGrads,
    /// Gradient with respect to the pixel-space 2D mean.
    pub mean2d: Vec<[f64; 2]>,
    /// Whether the primitive survived culling in this view.
    pub visible: Vec<bool>,
    /// Screen-space radius (pixels) of visible primitives.
    pub radius: Vec<f64>,
}

/// Per-contributor screen-space gradient:
/// `[d_u, d_v, d_conic_xx, d_conic_xy, d_conic_yy, d_opacity, d_r, d_g, d_b]`.
type ScreenGrad = [f64; 9];

struct Entry {
    pos: usize,
    alpha: f64,
    weight: f64,
    transmittance: f64,
    dx: f64,
    dy: f64,
}

/// Backward pass of [`super::render_forward`].
///
/// `d_color` is the gradient on the returned color image (after background
/// compositing); `d_alpha` is the gradient on the opacity image.
pub fn render_backward(
    prims: &[GaussianPrimitive],
    out: &RenderOutput,
    d_color: &Image,
    d_alpha: Option<&Image>,
) -> Result<RenderGrads> {
    let aux = out.aux.as_ref().ok_or(Error::MissingTrace("render output has no backward buffers"))?;
    let camera = &aux.camera;
    let (w, h) = (camera.width, camera.height);
    if d_color.shape() != (h, w, 3) {
        return Err(Error::ShapeMismatch {
            what: "color gradient",
            left: (h, w, 3),
            right: d_color.shape(),
        });
    }
    if let Some(da) = d_alpha {
        if da.shape() != (h, w, 1) {
            return Err(Error::ShapeMismatch {
                what: "opacity gradient",
                left: (h, w, 1),
                right: da.shape(),
            });
        }
    }
    let projected = &aux.projected;
    let tiles_x = aux.tiles_x;
    let bg = aux.options.background;

    let per_tile: Vec<Vec<ScreenGrad>> = aux
        .tile_lists
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let mut local = vec![[0.0; 9]; list.len()];
            if list.is_empty() {
                return local;
            }
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let mut entries: Vec<Entry> = Vec::new();
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                    let p = y * w + x;
                    let g_c = [d_color.data[3 * p], d_color.data[3 * p + 1], d_color.data[3 * p + 2]];
                    let mut g_a = d_alpha.map_or(0.0, |da| da.data[p]);
                    if let Some(b) = bg {
                        g_a -= g_c[0] * b[0] + g_c[1] * b[1] + g_c[2] * b[2];
                    }
                    if g_c == [0.0; 3] && g_a == 0.0 {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    // replay the forward pass for this pixel
                    entries.clear();
                    let mut transmittance = 1.0;
                    for pos in 0..out.last_entry[p] as usize {
                        let g = &projected[list[pos] as usize];
                        let (weight, dx, dy) = gaussian_weight(g, px, py);
                        let alpha = g.opacity * weight;
                        if alpha < MIN_ALPHA {
                            continue;
                        }
                        entries.push(Entry { pos, alpha, weight, transmittance, dx, dy });
                        transmittance *= 1.0 - alpha;
                        if aux.options.early_termination && transmittance < TRANSMITTANCE_EPS {
                            break;
                        }
                    }
                    let mut behind_c = [0.0; 3];
                    let mut behind_a = 0.0;
                    for e in entries.iter().rev() {
                        let g = &projected[list[e.pos] as usize];
                        let t = e.transmittance;
                        let mut d_alpha_tilde = g_a * t * (1.0 - behind_a);
                        let acc = &mut local[e.pos];
                        for c in 0..3 {
                            d_alpha_tilde += g_c[c] * t * (g.color[c] - behind_c[c]);
                            acc[6 + c] += g_c[c] * e.alpha * t;
                            behind_c[c] = e.alpha * g.color[c] + (1.0 - e.alpha) * behind_c[c];
                        }
                        behind_a = e.alpha + (1.0 - e.alpha) * behind_a;
                        acc[5] += d_alpha_tilde * e.weight;
                        let d_power = d_alpha_tilde * g.opacity * e.weight;
                        let [ca, cb, cc] = g.conic;
                        acc[2] += -0.5 * e.dx * e.dx * d_power;
                        acc[3] += -e.dx * e.dy * d_power;
                        acc[4] += -0.5 * e.dy * e.dy * d_power;
                        // d(power)/d(mean) = -d(power)/d(dx)
                        acc[0] += (ca * e.dx + cb * e.dy) * d_power;
                        acc[1] += (cc * e.dy + cb * e.dx) * d_power;
                    }
                }
            }
            local
        })
        .collect();

    // fixed tile-order merge
    let mut screen = vec![[0.0; 9]; projected.len()];
    for (list, local) in aux.tile_lists.iter().zip(&per_tile) {
        for (&gi, g) in list.iter().zip(local) {
            let s = &mut screen[gi as usize];
            for k in 0..9 {
                s[k] += g[k];
            }
        }
    }

    let n = prims.len();
    let stride = sh::coeff_count(aux.sh_degree);
    let mut grads = RenderGrads {
        params: PrimitiveGrads::zeros(n, stride),
        mean2d: vec![[0.0; 2]; n],
        visible: vec![false; n],
        radius: vec![0.0; n],
    };
    let chained: Vec<(usize, ParamGrad)> = projected
        .par_iter()
        .zip(&screen)
        .map(|(g, s)| (g.index, chain_to_params(&prims[g.index], aux.sh_degree, camera, g.conic, s)))
        .collect();
    for (pos, ((i, pg), g)) in chained.into_iter().zip(projected).enumerate() {
        grads.visible[i] = true;
        grads.radius[i] = g.radius();
        grads.mean2d[i] = [screen[pos][0], screen[pos][1]];
        let p = &mut grads.params;
        p.mean[i] = pg.mean;
        p.scale_raw[i] = pg.scale_raw;
        p.rotation[i] = pg.rotation;
        p.opacity_raw[i] = pg.opacity_raw;
        p.sh[i * stride..(i + 1) * stride].copy_from_slice(&pg.sh);
    }
    Ok(grads)
}

struct ParamGrad {
    mean: [f64; 3],
    scale_raw: [f64; 3],
    rotation: [f64; 4],
    opacity_raw: f64,
    sh: Vec<f64>,
}

fn chain_to_params(
    p: &GaussianPrimitive,
    sh_degree: usize,
    camera: &crate::model::Camera,
    conic: [f64; 3],
    s: &ScreenGrad,
) -> ParamGrad {
    let parts = projection_parts(p, camera);
    let (x, y, z) = (parts.p_cam.x, parts.p_cam.y, parts.p_cam.z);
    let (fx, fy) = (camera.fx, camera.fy);

    // conic -> 2D covariance
    let q = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
    let m_g = Matrix2::new(s[2], 0.5 * s[3], 0.5 * s[3], s[4]);
    let g_cov2 = -(q * m_g * q);

    // 2D covariance -> 3D covariance and projection Jacobian
    let t = parts.jw;
    let g_cov3: Matrix3<f64> = t.transpose() * g_cov2 * t;
    let g_t = 2.0 * g_cov2 * t * parts.cov3;
    let g_j = g_t * camera.rotation.transpose();

    let z2 = z * z;
    let z3 = z2 * z;
    let g_p = Vector3::new(
        g_j[(0, 2)] * (-fx / z2) + s[0] * fx / z,
        g_j[(1, 2)] * (-fy / z2) + s[1] * fy / z,
        g_j[(0, 0)] * (-fx / z2)
            + g_j[(0, 2)] * (2.0 * fx * x / z3)
            + g_j[(1, 1)] * (-fy / z2)
            + g_j[(1, 2)] * (2.0 * fy * y / z3)
            + s[0] * (-fx * x / z2)
            + s[1] * (-fy * y / z2),
    );
    let mut g_mean = camera.rotation.transpose() * g_p;

    // 3D covariance -> scale and rotation
    let scale_m = Matrix3::from_diagonal(&Vector3::from(parts.scale));
    let m = parts.rot_q * scale_m;
    let g_m = 2.0 * g_cov3 * m;
    let mut g_scale = [0.0; 3];
    let mut g_rot = Matrix3::zeros();
    for i in 0..3 {
        for k in 0..3 {
            g_scale[i] += parts.rot_q[(k, i)] * g_m[(k, i)];
            g_rot[(k, i)] = g_m[(k, i)] * parts.scale[i];
        }
    }
    let g_unit_q = unit_quat_grad_from_rotation_grad(&parts.unit_q, &g_rot);
    let rotation = normalize_quat_backward(&parts.unit_q, parts.q_norm, &g_unit_q);
    let scale_raw: [f64; 3] = std::array::from_fn(|i| g_scale[i] * sigmoid(p.scale_raw[i]));

    let alpha = sigmoid(p.opacity_raw);
    let opacity_raw = s[5] * alpha * (1.0 - alpha);

    // color -> SH coefficients and view direction
    let mut g_sh = vec![0.0; p.sh.len()];
    let g_dir = sh::color_backward(sh_degree, &p.sh, &parts.view_dir, &[s[6], s[7], s[8]], &mut g_sh);
    let d = Vector3::from(parts.view_dir);
    let gd = Vector3::from(g_dir);
    g_mean += (gd - d * d.dot(&gd)) / parts.view_dist;

    ParamGrad {
        mean: [g_mean.x, g_mean.y, g_mean.z],
        scale_raw,
        rotation,
        opacity_raw,
        sh: g_sh,
    }
}
