use super::grid::{Bilinear, Bounds, PLANES};
use crate::math::sigmoid;

/// Coarse tri-plane grid emitting sigmoid attention weights per position.
///
/// The logit of each channel is the sum of the bilinearly interpolated
/// vertex values over the three planes.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionAttentionField {
    pub bounds: Bounds,
    pub resolution: usize,
    pub channels: usize,
    /// Plane-major, then vertex `j * (res + 1) + i`, then channel.
    pub params: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub bilinear: [Bilinear; 3],
    pub inside: [bool; 3],
    pub values: Vec<f64>,
}

impl RegionAttentionField {
    /// All logits start at zero, so every weight is 0.5.
    pub fn new(bounds: Bounds, resolution: usize, channels: usize) -> Self {
        let verts = (resolution + 1) * (resolution + 1);
        Self {
            bounds,
            resolution,
            channels,
            params: vec![0.0; 3 * verts * channels],
        }
    }

    fn vertex_offset(&self, plane: usize, (i, j): (usize, usize)) -> usize {
        let n = self.resolution + 1;
        ((plane * n + j) * n + i) * self.channels
    }

    /// Sets every vertex of every plane to `logit / 3` so the summed logit is `logit`.
    pub fn fill_logit(&mut self, logit: f64) {
        self.params.fill(logit / 3.0);
    }

    pub fn evaluate(&self, p: &[f64; 3]) -> AttentionTrace {
        let (t, inside) = self.bounds.normalize(p);
        let bilinear: [Bilinear; 3] =
            std::array::from_fn(|plane| Bilinear::new(t[PLANES[plane].0], t[PLANES[plane].1], self.resolution));
        let mut logits = vec![0.0; self.channels];
        for (plane, bl) in bilinear.iter().enumerate() {
            for c in 0..4 {
                let w = bl.weights[c];
                if w == 0.0 {
                    continue;
                }
                let off = self.vertex_offset(plane, bl.cells[c]);
                for (k, l) in logits.iter_mut().enumerate() {
                    *l += w * self.params[off + k];
                }
            }
        }
        let values = logits.into_iter().map(sigmoid).collect();
        AttentionTrace { bilinear, inside, values }
    }

    /// Scatters `d_values` through the sigmoid into grid gradients and returns
    /// the position gradient.
    pub fn backward(&self, trace: &AttentionTrace, d_values: &[f64], d_params: &mut [f64]) -> [f64; 3] {
        let d_logit: Vec<f64> = d_values
            .iter()
            .zip(&trace.values)
            .map(|(g, v)| g * v * (1.0 - v))
            .collect();
        let mut d_pos = [0.0; 3];
        let res = self.resolution as f64;
        for (plane, bl) in trace.bilinear.iter().enumerate() {
            let (a, b) = PLANES[plane];
            let dw = bl.weight_grads();
            for c in 0..4 {
                let off = self.vertex_offset(plane, bl.cells[c]);
                let mut dot = 0.0;
                for (k, g) in d_logit.iter().enumerate() {
                    d_params[off + k] += bl.weights[c] * g;
                    dot += g * self.params[off + k];
                }
                d_pos[a] += dw[0][c] * dot * res / self.bounds.extent(a);
                d_pos[b] += dw[1][c] * dot * res / self.bounds.extent(b);
            }
        }
        for a in 0..3 {
            if !trace.inside[a] {
                d_pos[a] = 0.0;
            }
        }
        d_pos
    }
}
