//! Planar grids with bilinear interpolation, shared by the hash encoder and
//! the region-attention field.

use serde::{Deserialize, Serialize};

/// Axis-aligned box mapping world coordinates to `[0, 1]^3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Bounds {
    pub fn extent(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    /// Normalized coordinate and whether it lies inside the box along each axis.
    pub fn normalize(&self, p: &[f64; 3]) -> ([f64; 3], [bool; 3]) {
        let mut t = [0.0; 3];
        let mut inside = [true; 3];
        for a in 0..3 {
            let v = (p[a] - self.lo[a]) / self.extent(a);
            inside[a] = (0.0..=1.0).contains(&v);
            t[a] = v.clamp(0.0, 1.0);
        }
        (t, inside)
    }
}

/// Axis pairs of the three planes: XY, YZ, XZ.
pub const PLANES: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

/// Bilinear footprint of one query on one grid level.
#[derive(Clone, Copy, Debug, Default)]
pub struct Bilinear {
    /// Corner vertex coordinates in order (0,0), (1,0), (0,1), (1,1).
    pub cells: [(usize, usize); 4],
    pub weights: [f64; 4],
    pub frac: [f64; 2],
}

impl Bilinear {
    /// `u, v` in `[0, 1]`, `res` cells per axis.
    pub fn new(u: f64, v: f64, res: usize) -> Self {
        let (i, fu) = split(u, res);
        let (j, fv) = split(v, res);
        Self {
            cells: [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)],
            weights: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
            frac: [fu, fv],
        }
    }

    /// Derivatives of the four weights with respect to the two fractional coordinates.
    pub fn weight_grads(&self) -> [[f64; 4]; 2] {
        let [fu, fv] = self.frac;
        [
            [-(1.0 - fv), 1.0 - fv, -fv, fv],
            [-(1.0 - fu), -fu, 1.0 - fu, fu],
        ]
    }
}

fn split(t: f64, res: usize) -> (usize, f64) {
    let pos = t * res as f64;
    let i = (pos.floor() as usize).min(res - 1);
    (i, pos - i as f64)
}
