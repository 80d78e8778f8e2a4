use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::{Bilinear, Bounds, PLANES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashEncoderConfig {
    pub levels: usize,
    pub features: usize,
    pub log2_table_size: u32,
    pub base_resolution: usize,
    pub growth: f64,
}

impl Default for HashEncoderConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            features: 2,
            log2_table_size: 15,
            base_resolution: 8,
            growth: 1.5,
        }
    }
}

/// Three axis-aligned planar multiresolution hash grids (XY, YZ, XZ).
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneHashEncoder {
    pub config: HashEncoderConfig,
    pub bounds: Bounds,
    resolutions: Vec<usize>,
    /// Entry offset of each (plane, level) table, plane-major.
    offsets: Vec<usize>,
    entries: Vec<usize>,
    /// Trainable table entries, `features` floats per entry.
    pub params: Vec<f64>,
}

/// Per-query interpolation footprint for the backward pass.
#[derive(Clone, Debug)]
pub struct EncodingTrace {
    /// Per (plane, level): entry indices of the 4 corners (absolute).
    pub corners: Vec<[u32; 4]>,
    pub bilinear: Vec<Bilinear>,
    pub inside: [bool; 3],
}

const HASH_PRIME: u64 = 2_654_435_761;

impl TriPlaneHashEncoder {
    /// Table entries initialized uniformly in `[-1e-4, 1e-4]`.
    pub fn new<R: Rng>(config: HashEncoderConfig, bounds: Bounds, rng: &mut R) -> Self {
        let mut enc = Self::zeroed(config, bounds);
        for v in &mut enc.params {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * 1e-4;
        }
        enc
    }

    pub fn zeroed(config: HashEncoderConfig, bounds: Bounds) -> Self {
        let table_size = 1usize << config.log2_table_size;
        let resolutions: Vec<usize> = (0..config.levels)
            .map(|l| ((config.base_resolution as f64) * config.growth.powi(l as i32)).floor().max(1.0) as usize)
            .collect();
        let entries: Vec<usize> = resolutions.iter().map(|&r| ((r + 1) * (r + 1)).min(table_size)).collect();
        let mut offsets = Vec::with_capacity(3 * config.levels);
        let mut total = 0;
        for _ in 0..3 {
            for &e in &entries {
                offsets.push(total);
                total += e;
            }
        }
        Self {
            config,
            bounds,
            resolutions,
            offsets,
            entries,
            params: vec![0.0; total * config.features],
        }
    }

    pub fn output_dim(&self) -> usize {
        3 * self.config.levels * self.config.features
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.resolutions[level]
    }

    /// Entry index within a level table (dense when it fits, hashed otherwise).
    pub fn entry_index(&self, level: usize, i: usize, j: usize) -> usize {
        let res = self.resolutions[level];
        let n = self.entries[level];
        if (res + 1) * (res + 1) <= n {
            j * (res + 1) + i
        } else {
            ((i as u64 ^ (j as u64).wrapping_mul(HASH_PRIME)) as usize) & (n - 1)
        }
    }

    /// Absolute entry index of a (plane, level, i, j) vertex.
    pub fn absolute_entry(&self, plane: usize, level: usize, i: usize, j: usize) -> usize {
        self.offsets[plane * self.config.levels + level] + self.entry_index(level, i, j)
    }

    /// Writes the encoding of `p` into `out` (length [`Self::output_dim`]).
    pub fn encode_into(&self, p: &[f64; 3], out: &mut [f64]) -> EncodingTrace {
        let f = self.config.features;
        let (t, inside) = self.bounds.normalize(p);
        let levels = self.config.levels;
        let mut trace = EncodingTrace {
            corners: Vec::with_capacity(3 * levels),
            bilinear: Vec::with_capacity(3 * levels),
            inside,
        };
        for (plane, &(a, b)) in PLANES.iter().enumerate() {
            for level in 0..levels {
                let bl = Bilinear::new(t[a], t[b], self.resolutions[level]);
                let corners: [u32; 4] =
                    std::array::from_fn(|c| self.absolute_entry(plane, level, bl.cells[c].0, bl.cells[c].1) as u32);
                let slot = (plane * levels + level) * f;
                for k in 0..f {
                    let mut v = 0.0;
                    for c in 0..4 {
                        v += bl.weights[c] * self.params[corners[c] as usize * f + k];
                    }
                    out[slot + k] = v;
                }
                trace.corners.push(corners);
                trace.bilinear.push(bl);
            }
        }
        trace
    }

    pub fn encode(&self, p: &[f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(p, &mut out);
        out
    }

    /// Scatters `d_out` into table gradients.
    pub fn backward_tables(&self, trace: &EncodingTrace, d_out: &[f64], d_params: &mut [f64]) {
        let f = self.config.features;
        for (slot, (corners, bl)) in trace.corners.iter().zip(&trace.bilinear).enumerate() {
            for k in 0..f {
                let g = d_out[slot * f + k];
                if g == 0.0 {
                    continue;
                }
                for c in 0..4 {
                    d_params[corners[c] as usize * f + k] += bl.weights[c] * g;
                }
            }
        }
    }

    /// Gradient of `<d_out, encode(p)>` with respect to the world position.
    pub fn backward_position(&self, trace: &EncodingTrace, d_out: &[f64]) -> [f64; 3] {
        let f = self.config.features;
        let levels = self.config.levels;
        let mut g = [0.0; 3];
        for (plane, &(a, b)) in PLANES.iter().enumerate() {
            for level in 0..levels {
                let slot = plane * levels + level;
                let bl = &trace.bilinear[slot];
                let corners = &trace.corners[slot];
                let dw = bl.weight_grads();
                let res = self.resolutions[level] as f64;
                for k in 0..f {
                    let up = d_out[slot * f + k];
                    if up == 0.0 {
                        continue;
                    }
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for c in 0..4 {
                        let v = self.params[corners[c] as usize * f + k];
                        du += dw[0][c] * v;
                        dv += dw[1][c] * v;
                    }
                    g[a] += up * du * res / self.bounds.extent(a);
                    g[b] += up * dv * res / self.bounds.extent(b);
                }
            }
        }
        for a in 0..3 {
            if !trace.inside[a] {
                g[a] = 0.0;
            }
        }
        g
    }
}
