use rayon::prelude::*;

use super::project::{project_gaussian, ProjectedGaussian, MIN_ALPHA};
use crate::error::Result;
use crate::image::Image;
use crate::model::{Camera, GaussianPrimitive};

pub const TILE_SIZE: usize = 16;
/// Per-pixel compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Composite over this color (`C + (1 - A) B`); `None` returns raw C.
    pub background: Option<[f64; 3]>,
    pub early_termination: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: None,
            early_termination: true,
        }
    }
}

impl RenderOptions {
    pub fn with_background(background: [f64; 3]) -> Self {
        Self {
            background: Some(background),
            ..Self::default()
        }
    }
}

/// Everything the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct RenderAux {
    pub camera: Camera,
    pub sh_degree: usize,
    pub options: RenderOptions,
    pub projected: Vec<ProjectedGaussian>,
    /// Per tile, indices into `projected` in compositing order.
    pub tile_lists: Vec<Vec<u32>>,
    pub tiles_x: usize,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// H x W x 3, background already applied when requested.
    pub color: Image,
    /// H x W x 1.
    pub alpha: Image,
    /// Number of contributors that passed the skip threshold, per pixel.
    pub contributors: Vec<u32>,
    /// Number of list entries visited per pixel (forward stop position).
    pub(crate) last_entry: Vec<u32>,
    pub aux: Option<RenderAux>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

pub(crate) struct PixelResult {
    pub color: [f64; 3],
    pub alpha: f64,
    pub contributors: u32,
    pub last_entry: u32,
}

#[inline]
pub(crate) fn gaussian_weight(g: &ProjectedGaussian, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - g.mean[0];
    let dy = py - g.mean[1];
    let power = -0.5 * (g.conic[0] * dx * dx + g.conic[2] * dy * dy) - g.conic[1] * dx * dy;
    (power.exp(), dx, dy)
}

/// Front-to-back compositing of one pixel over an ordered contributor list.
#[inline]
pub(crate) fn composite_pixel<'a>(
    px: f64,
    py: f64,
    list: impl Iterator<Item = &'a ProjectedGaussian>,
    early_termination: bool,
) -> PixelResult {
    let mut color = [0.0; 3];
    let mut alpha = 0.0;
    let mut transmittance = 1.0;
    let mut contributors = 0;
    let mut last_entry = 0;
    for (pos, g) in list.enumerate() {
        last_entry = pos as u32 + 1;
        let (w, _, _) = gaussian_weight(g, px, py);
        let a = g.opacity * w;
        if a < MIN_ALPHA {
            continue;
        }
        let weight = a * transmittance;
        for c in 0..3 {
            color[c] += g.color[c] * weight;
        }
        alpha += weight;
        transmittance *= 1.0 - a;
        contributors += 1;
        if early_termination && transmittance < TRANSMITTANCE_EPS {
            break;
        }
    }
    PixelResult {
        color,
        alpha: alpha.min(1.0),
        contributors,
        last_entry,
    }
}

pub(crate) fn project_all(prims: &[GaussianPrimitive], sh_degree: usize, camera: &Camera) -> Result<Vec<ProjectedGaussian>> {
    camera.validate()?;
    let projected: Vec<Option<ProjectedGaussian>> = prims
        .par_iter()
        .enumerate()
        .map(|(i, p)| project_gaussian(i, p, sh_degree, camera))
        .collect::<Result<_>>()?;
    Ok(projected.into_iter().flatten().collect())
}

fn depth_order(a: &ProjectedGaussian, b: &ProjectedGaussian) -> std::cmp::Ordering {
    a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index))
}

fn finish(
    camera: &Camera,
    options: &RenderOptions,
    pixels: impl Iterator<Item = (usize, usize, PixelResult)>,
) -> (Image, Image, Vec<u32>, Vec<u32>) {
    let (w, h) = (camera.width, camera.height);
    let mut color = Image::zeros(w, h, 3);
    let mut alpha = Image::zeros(w, h, 1);
    let mut contributors = vec![0; w * h];
    let mut last_entry = vec![0; w * h];
    for (x, y, r) in pixels {
        let p = y * w + x;
        for c in 0..3 {
            color.data[3 * p + c] = match options.background {
                Some(bg) => r.color[c] + (1.0 - r.alpha) * bg[c],
                None => r.color[c],
            };
        }
        alpha.data[p] = r.alpha;
        contributors[p] = r.contributors;
        last_entry[p] = r.last_entry;
    }
    (color, alpha, contributors, last_entry)
}

/// Tile-based forward pass.
pub fn render_forward(
    prims: &[GaussianPrimitive],
    sh_degree: usize,
    camera: &Camera,
    options: RenderOptions,
) -> Result<RenderOutput> {
    let projected = project_all(prims, sh_degree, camera)?;
    let tiles_x = camera.width.div_ceil(TILE_SIZE);
    let tiles_y = camera.height.div_ceil(TILE_SIZE);

    // (tile, projected index) pairs, ordered by tile, then depth, then primitive index.
    let mut keys: Vec<(u32, u32)> = Vec::new();
    for (gi, g) in projected.iter().enumerate() {
        let [x0, x1, y0, y1] = g.rect;
        for ty in y0 / TILE_SIZE..=(y1 - 1) / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=(x1 - 1) / TILE_SIZE {
                keys.push(((ty * tiles_x + tx) as u32, gi as u32));
            }
        }
    }
    keys.sort_unstable_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| depth_order(&projected[a.1 as usize], &projected[b.1 as usize]))
    });
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for (t, gi) in keys {
        tile_lists[t as usize].push(gi);
    }

    let per_tile: Vec<Vec<(usize, usize, PixelResult)>> = tile_lists
        .par_iter()
        .enumerate()
        .map(|(t, list)| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let mut out = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(camera.height) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(camera.width) {
                    let r = composite_pixel(
                        x as f64 + 0.5,
                        y as f64 + 0.5,
                        list.iter().map(|&i| &projected[i as usize]),
                        options.early_termination,
                    );
                    out.push((x, y, r));
                }
            }
            out
        })
        .collect();

    let (color, alpha, contributors, last_entry) = finish(camera, &options, per_tile.into_iter().flatten());
    Ok(RenderOutput {
        color,
        alpha,
        contributors,
        last_entry,
        aux: Some(RenderAux {
            camera: camera.clone(),
            sh_degree,
            options,
            projected,
            tile_lists,
            tiles_x,
        }),
    })
}

/// Reference compositor: every pixel walks all globally depth-sorted
/// projected Gaussians with no tiling and no early termination.
pub fn render_naive(
    prims: &[GaussianPrimitive],
    sh_degree: usize,
    camera: &Camera,
    background: Option<[f64; 3]>,
) -> Result<RenderOutput> {
    let mut projected = project_all(prims, sh_degree, camera)?;
    projected.sort_by(depth_order);
    let options = RenderOptions {
        background,
        early_termination: false,
    };
    let w = camera.width;
    let pixels: Vec<(usize, usize, PixelResult)> = (0..camera.width * camera.height)
        .into_par_iter()
        .map(|p| {
            let (x, y) = (p % w, p / w);
            (x, y, composite_pixel(x as f64 + 0.5, y as f64 + 0.5, projected.iter(), false))
        })
        .collect();
    let (color, alpha, contributors, last_entry) = finish(camera, &options, pixels.into_iter());
    Ok(RenderOutput {
        color,
        alpha,
        contributors,
        last_entry,
        aux: None,
    })
}
