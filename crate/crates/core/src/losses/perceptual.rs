//! Network-free perceptual distance: L1 between image-gradient features of
//! a 3-octave Gaussian pyramid.

use crate::error::Result;
use crate::image::Image;

/// Pluggable perceptual distance with a gradient with respect to the first image.
pub trait PerceptualMetric: Send + Sync {
    fn loss_and_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)>;

    fn loss(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok(self.loss_and_grad(a, b)?.0)
    }
}

const BLUR: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PyramidPerceptual {
    pub octaves: usize,
}

impl Default for PyramidPerceptual {
    fn default() -> Self {
        Self { octaves: 3 }
    }
}

#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Self {
        Self { w, h, data: vec![0.0; w * h] }
    }
}

/// Blur with clamped borders, then keep even rows and columns.
fn reduce(p: &Plane) -> Plane {
    let (w, h) = (p.w, p.h);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            tmp.data[y * w + x] = (0..5).map(|k| BLUR[k] * p.data[y * w + clamp(x as isize + k as isize - 2, w)]).sum();
        }
    }
    let (ow, oh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = Plane::zeros(ow, oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let (x, y) = (2 * ox, 2 * oy);
            out.data[oy * ow + ox] = (0..5)
                .map(|k| BLUR[k] * tmp.data[clamp(y as isize + k as isize - 2, h) * w + x])
                .sum();
        }
    }
    out
}

/// Adjoint of [`reduce`] onto a `w × h` plane.
fn reduce_adjoint(d: &Plane, w: usize, h: usize) -> Plane {
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Plane::zeros(w, h);
    for oy in 0..d.h {
        for ox in 0..d.w {
            let g = d.data[oy * d.w + ox];
            let (x, y) = (2 * ox, 2 * oy);
            for k in 0..5 {
                tmp.data[clamp(y as isize + k as isize - 2, h) * w + x] += BLUR[k] * g;
            }
        }
    }
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let g = tmp.data[y * w + x];
            if g == 0.0 {
                continue;
            }
            for k in 0..5 {
                out.data[y * w + clamp(x as isize + k as isize - 2, w)] += BLUR[k] * g;
            }
        }
    }
    out
}

/// Forward differences along x then y, concatenated.
fn features(p: &Plane) -> Vec<f64> {
    let mut f = Vec::with_capacity(2 * p.w * p.h);
    for y in 0..p.h {
        for x in 0..p.w.saturating_sub(1) {
            f.push(p.data[y * p.w + x + 1] - p.data[y * p.w + x]);
        }
    }
    for y in 0..p.h.saturating_sub(1) {
        for x in 0..p.w {
            f.push(p.data[(y + 1) * p.w + x] - p.data[y * p.w + x]);
        }
    }
    f
}

fn features_adjoint(d: &[f64], w: usize, h: usize) -> Plane {
    let mut out = Plane::zeros(w, h);
    let mut i = 0;
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            out.data[y * w + x + 1] += d[i];
            out.data[y * w + x] -= d[i];
            i += 1;
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            out.data[(y + 1) * w + x] += d[i];
            out.data[y * w + x] -= d[i];
            i += 1;
        }
    }
    out
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl PerceptualMetric for PyramidPerceptual {
    /// Mean over octaves of the mean absolute feature difference, averaged over channels.
    fn loss_and_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)> {
        a.check_same_shape(b, "perceptual inputs")?;
        let mut grad = Image::zeros(a.width, a.height, a.channels);
        let mut total = 0.0;
        let scale = 1.0 / (self.octaves * a.channels) as f64;
        for c in 0..a.channels {
            let plane = |img: &Image| Plane {
                w: img.width,
                h: img.height,
                data: (0..img.pixel_count()).map(|p| img.data[p * img.channels + c]).collect(),
            };
            // the pyramid is linear, so it is applied to the difference image
            let mut level = plane(a);
            let pb = plane(b);
            for (x, y) in level.data.iter_mut().zip(&pb.data) {
                *x -= y;
            }
            let mut shapes = Vec::with_capacity(self.octaves);
            let mut d_levels = Vec::with_capacity(self.octaves);
            for o in 0..self.octaves {
                if o > 0 {
                    level = reduce(&level);
                }
                shapes.push((level.w, level.h));
                let f = features(&level);
                if f.is_empty() {
                    d_levels.push(Vec::new());
                    continue;
                }
                let inv = scale / f.len() as f64;
                total += f.iter().map(|v| v.abs()).sum::<f64>() * inv;
                d_levels.push(f.iter().map(|&v| sign(v) * inv).collect());
            }
            let mut acc = Plane::zeros(shapes[self.octaves - 1].0, shapes[self.octaves - 1].1);
            for o in (0..self.octaves).rev() {
                let (w, h) = shapes[o];
                if o + 1 < self.octaves {
                    acc = reduce_adjoint(&acc, w, h);
                }
                if !d_levels[o].is_empty() {
                    let g = features_adjoint(&d_levels[o], w, h);
                    for (x, y) in acc.data.iter_mut().zip(&g.data) {
                        *x += y;
                    }
                }
            }
            for p in 0..a.pixel_count() {
                grad.data[p * a.channels + c] = acc.data[p];
            }
        }
        Ok((total, grad))
    }
}
