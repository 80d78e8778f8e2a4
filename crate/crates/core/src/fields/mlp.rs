use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus};

/// Fully connected stack with softplus between layers and a linear head.
///
/// Weights are stored row-major `[out, in]` in flat vectors so the optimizer
/// and checkpoints can treat every layer as a plain tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDecoder {
    /// Layer widths, input first.
    pub widths: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input: Array2<f64>,
}

impl MlpDecoder {
    /// Xavier-uniform hidden layers, zero biases and an all-zero output head.
    pub fn new<R: Rng>(input: usize, hidden: usize, depth: usize, output: usize, rng: &mut R) -> Self {
        assert!(depth >= 1, "decoder needs at least one layer");
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(hidden, depth - 1));
        widths.push(output);
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for l in 0..depth {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w = if l + 1 == depth {
                vec![0.0; n_in * n_out]
            } else {
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                (0..n_in * n_out).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit).collect()
            };
            weights.push(w);
            biases.push(vec![0.0; n_out]);
        }
        Self { widths, weights, biases }
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    fn weight_view(&self, l: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.widths[l + 1], self.widths[l]), &self.weights[l]).expect("weight shape")
    }

    /// Rows of `x` are samples.
    pub fn forward(&self, x: Array2<f64>) -> Result<(Array2<f64>, MlpTrace)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                what: "decoder input",
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.depth());
        let mut pre = Vec::with_capacity(self.depth() - 1);
        let mut h = x;
        for l in 0..self.depth() {
            let mut z = h.dot(&self.weight_view(l).t());
            z += &Array1::from(self.biases[l].clone());
            inputs.push(h);
            if l + 1 == self.depth() {
                return Ok((z, MlpTrace { inputs, pre }));
            }
            h = z.mapv(softplus);
            pre.push(z);
        }
        unreachable!()
    }

    pub fn backward(&self, trace: &MlpTrace, d_out: &Array2<f64>) -> MlpGrads {
        let depth = self.depth();
        let mut weights = vec![Vec::new(); depth];
        let mut biases = vec![Vec::new(); depth];
        let mut g = d_out.clone();
        for l in (0..depth).rev() {
            let dw = g.t().dot(&trace.inputs[l]);
            weights[l] = dw.into_iter().collect();
            biases[l] = g.sum_axis(Axis(0)).to_vec();
            let d_in = g.dot(&self.weight_view(l));
            g = if l > 0 {
                d_in * &trace.pre[l - 1].mapv(sigmoid)
            } else {
                d_in
            };
        }
        MlpGrads { weights, biases, input: g }
    }
}
