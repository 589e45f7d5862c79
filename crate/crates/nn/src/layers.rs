use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamId, ParamSet};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Affine map `x W + b` with PyTorch-style uniform init.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = params.push_uniform(in_dim, out_dim, bound, rng);
        let bias = params.push_uniform(1, out_dim, bound, rng);
        Self { weight, bias, in_dim, out_dim }
    }

    /// Like [`Linear::new`] but without a bias term's randomness: the bias starts at zero
    /// and the weight is scaled by `gain`.
    pub fn with_gain(params: &mut ParamSet, in_dim: usize, out_dim: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let bound = gain / (in_dim as f64).sqrt();
        let weight = params.push_uniform(in_dim, out_dim, bound, rng);
        let bias = params.push(Array2::zeros((1, out_dim)));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.weight));
        tape.add_row(y, p.var(self.bias))
    }

    /// Plain forward pass on values, no tape.
    pub fn eval(&self, params: &ParamSet, x: &Array2<f64>) -> Array2<f64> {
        x.dot(params.get(self.weight)) + params.get(self.bias)
    }
}

/// Multi-layer perceptron; the activation follows every layer except the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    pub fn new(
        params: &mut ParamSet,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims.windows(2).map(|w| Linear::new(params, w[0], w[1], rng)).collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").out_dim
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h);
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }

    pub fn eval(&self, params: &ParamSet, x: &Array2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.eval(params, &h);
            if i < last {
                match self.activation {
                    Activation::Relu => h.mapv_inplace(|v| v.max(0.0)),
                    Activation::Tanh => h.mapv_inplace(f64::tanh),
                }
            }
        }
        h
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
    dim: usize,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(params: &mut ParamSet, dim: usize) -> Self {
        let gain = params.push(Array2::ones((1, dim)));
        let bias = params.push(Array2::zeros((1, dim)));
        Self { gain, bias, dim }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let mean = tape.row_mean(x);
        let neg_mean = tape.neg(mean);
        let centered = tape.add_col(x, neg_mean);
        let sq = tape.square(centered);
        let var = tape.row_mean(sq);
        let var = tape.add_scalar(var, LAYER_NORM_EPS);
        let std = tape.sqrt(var);
        let inv = tape.recip(std);
        let normed = tape.mul_col(centered, inv);
        let n = tape.shape(x).0;
        let ones = tape.leaf(Array2::ones((n, 1)));
        let gain = tape.matmul(ones, p.var(self.gain));
        let scaled = tape.mul(normed, gain);
        tape.add_row(scaled, p.var(self.bias))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn mlp_eval_matches_tape_forward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, 4, &[8, 8], 2, Activation::Relu, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = mlp.forward(&mut tape, &b, xv);
        assert_eq!(tape.value(y), &mlp.eval(&params, &x));
    }

    #[test]
    fn layer_norm_output_has_unit_scale_rows() {
        let mut params = ParamSet::new();
        let ln = LayerNorm::new(&mut params, 6);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = tape.leaf(Array2::from_shape_fn((3, 6), |(i, j)| (i * 7 + j * j) as f64));
        let y = ln.forward(&mut tape, &b, x);
        for row in tape.value(y).rows() {
            let m = row.mean().unwrap();
            let v = row.mapv(|x| (x - m) * (x - m)).mean().unwrap();
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
