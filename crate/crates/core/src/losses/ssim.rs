//! Windowed SSIM over valid 11×11 Gaussian windows, with exact gradients.

use crate::error::{Error, Result};
use crate::image::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 1e-4;
pub const C2: f64 = 9e-4;

pub fn gaussian_window() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut g: [f64; WINDOW] = std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp());
    let sum: f64 = g.iter().sum();
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Single-channel plane.
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

fn channel(img: &Image, c: usize) -> Plane {
    Plane {
        w: img.width,
        h: img.height,
        data: (0..img.pixel_count()).map(|p| img.data[p * img.channels + c]).collect(),
    }
}

/// Valid separable convolution: output is `(w - 10) × (h - 10)`.
fn conv_valid(p: &Plane, g: &[f64; WINDOW]) -> Plane {
    let (ow, oh) = (p.w + 1 - WINDOW, p.h + 1 - WINDOW);
    let mut tmp = vec![0.0; ow * p.h];
    for y in 0..p.h {
        let row = &p.data[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (k, gk) in g.iter().enumerate() {
            let src = &tmp[(y + k) * ow..(y + k + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += gk * s;
            }
        }
    }
    Plane { w: ow, h: oh, data: out }
}

/// Adjoint of [`conv_valid`] onto a `w × h` plane.
fn conv_valid_adjoint(d: &Plane, w: usize, h: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let ow = d.w;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..d.h {
        for (k, gk) in g.iter().enumerate() {
            let dst = &mut tmp[(y + k) * ow..(y + k + 1) * ow];
            for (t, s) in dst.iter_mut().zip(&d.data[y * ow..(y + 1) * ow]) {
                *t += gk * s;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (k, gk) in g.iter().enumerate() {
                out[y * w + x + k] += gk * v;
            }
        }
    }
    out
}

fn product(a: &Plane, b: &Plane) -> Plane {
    Plane {
        w: a.w,
        h: a.h,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

fn check_inputs(a: &Image, b: &Image, mask: Option<&Image>) -> Result<()> {
    a.check_same_shape(b, "ssim inputs")?;
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::Invalid(format!(
            "image {}x{} is smaller than the {WINDOW}x{WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    if let Some(m) = mask {
        if m.width != a.width || m.height != a.height || m.channels != 1 {
            return Err(Error::ShapeMismatch {
                what: "ssim mask",
                left: a.shape(),
                right: m.shape(),
            });
        }
    }
    Ok(())
}

/// Mean SSIM over channels and valid windows; with a mask, both images are
/// multiplied by it and only windows centred on masked pixels are averaged.
/// Returns `(ssim, d ssim / d a)` when `want_grad`.
pub fn ssim_with_grad(a: &Image, b: &Image, mask: Option<&Image>, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_inputs(a, b, mask)?;
    let (a, b) = match mask {
        Some(m) => (a.masked(m)?, b.masked(m)?),
        None => (a.clone(), b.clone()),
    };
    let g = gaussian_window();
    let half = WINDOW / 2;
    let (ow, oh) = (a.width + 1 - WINDOW, a.height + 1 - WINDOW);
    let weights: Vec<f64> = (0..ow * oh)
        .map(|i| match mask {
            Some(m) => m.data[(i / ow + half) * m.width + i % ow + half],
            None => 1.0,
        })
        .collect();
    let total_weight: f64 = weights.iter().sum();
    if total_weight == 0.0 {
        let grad = want_grad.then(|| Image::zeros(a.width, a.height, a.channels));
        return Ok((1.0, grad));
    }
    let norm = 1.0 / (total_weight * a.channels as f64);
    let mut grad = want_grad.then(|| Image::zeros(a.width, a.height, a.channels));
    let mut value = 0.0;
    for c in 0..a.channels {
        let pa = channel(&a, c);
        let pb = channel(&b, c);
        let mu_a = conv_valid(&pa, &g);
        let mu_b = conv_valid(&pb, &g);
        let e_aa = conv_valid(&product(&pa, &pa), &g);
        let e_bb = conv_valid(&product(&pb, &pb), &g);
        let e_ab = conv_valid(&product(&pa, &pb), &g);
        let n = ow * oh;
        let mut d_mu = vec![0.0; n];
        let mut d_eaa = vec![0.0; n];
        let mut d_eab = vec![0.0; n];
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
            let s_aa = e_aa.data[i] - ma * ma;
            let s_bb = e_bb.data[i] - mb * mb;
            let s_ab = e_ab.data[i] - ma * mb;
            let a1 = 2.0 * ma * mb + C1;
            let a2 = 2.0 * s_ab + C2;
            let b1 = ma * ma + mb * mb + C1;
            let b2 = s_aa + s_bb + C2;
            let s = a1 * a2 / (b1 * b2);
            value += weights[i] * s;
            if want_grad {
                let u = weights[i] * norm;
                d_mu[i] = u * ((2.0 * mb * a2 - 2.0 * mb * a1) / (b1 * b2) - s * (2.0 * ma / b1 - 2.0 * ma / b2));
                d_eaa[i] = -u * s / b2;
                d_eab[i] = u * 2.0 * a1 / (b1 * b2);
            }
        }
        if let Some(grad) = grad.as_mut() {
            let adj = |d: Vec<f64>| conv_valid_adjoint(&Plane { w: ow, h: oh, data: d }, a.width, a.height, &g);
            let g_mu = adj(d_mu);
            let g_eaa = adj(d_eaa);
            let g_eab = adj(d_eab);
            for p in 0..a.pixel_count() {
                let mut v = g_mu[p] + 2.0 * pa.data[p] * g_eaa[p] + pb.data[p] * g_eab[p];
                if let Some(m) = mask {
                    v *= m.data[p];
                }
                grad.data[p * a.channels + c] = v;
            }
        }
    }
    Ok((value * norm, grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_with_grad(a, b, None, false)?.0)
}

/// `(1 - SSIM) / 2`.
pub fn dssim_loss(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    Ok((1.0 - ssim_with_grad(a, b, mask, false)?.0) / 2.0)
}

pub fn dssim_loss_grad(a: &Image, b: &Image, mask: Option<&Image>) -> Result<(f64, Image)> {
    let (s, g) = ssim_with_grad(a, b, mask, true)?;
    let mut g = g.expect("gradient requested");
    for v in &mut g.data {
        *v *= -0.5;
    }
    Ok(((1.0 - s) / 2.0, g))
}
