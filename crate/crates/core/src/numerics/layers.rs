//! Hand-derived forward/backward pairs for the dense building blocks.
//! Every backward adds into the owning `Parameter` grads and returns the
//! gradient with respect to its forward input.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::param::{join, Parameter, Params};

pub const LAYER_NORM_EPS: f64 = 1e-8;

/// y = x W + b, with W: (in, out) and b: (1, out). The bias is optional;
/// projections whose bias would be cancelled downstream (the key projection
/// in attention, where softmax absorbs a shared shift) omit it so no
/// parameter is ever gradient-dead.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: Parameter,
    pub b: Option<Parameter>,
}

pub struct LinearCache {
    x: Matrix,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Parameter::zeros(in_dim, out_dim),
            b: Some(Parameter::zeros(1, out_dim)),
        }
    }

    pub fn xavier(in_dim: usize, out_dim: usize, rng: &mut impl rand::Rng) -> Self {
        Linear {
            w: Parameter::xavier(in_dim, out_dim, rng),
            b: Some(Parameter::zeros(1, out_dim)),
        }
    }

    pub fn xavier_no_bias(in_dim: usize, out_dim: usize, rng: &mut impl rand::Rng) -> Self {
        Linear {
            w: Parameter::xavier(in_dim, out_dim, rng),
            b: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LinearCache) {
        let mut y = x.matmul(&self.w.value).expect("linear: input width mismatch");
        if let Some(b) = &self.b {
            y = y.add_row_broadcast(b.value.row(0));
        }
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache, dy: &Matrix) -> Matrix {
        let dw = cache.x.transpose().matmul(dy).unwrap();
        self.w.grad.add_assign(&dw);
        if let Some(b) = &mut self.b {
            let db = dy.col_sums();
            b.grad.add_assign(&Matrix::row_vector(&db));
        }
        dy.matmul(&self.w.value.transpose()).unwrap()
    }
}

impl Params for Linear {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join(prefix, "w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&join(prefix, "b"), b);
        }
    }
}

/// Per-row LayerNorm with learned gain and bias (both 1 x d).
/// Population variance, eps = 1e-8.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
}

pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Parameter::from_matrix(Matrix::filled(1, d, 1.0)),
            bias: Parameter::zeros(1, d),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let d = x.cols() as f64;
        let mut xhat = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (c, &v) in row.iter().enumerate() {
                xhat.set(r, c, (v - mean) * istd);
            }
            inv_std.push(istd);
        }
        let y = xhat
            .mul_row_broadcast(self.gain.value.row(0))
            .add_row_broadcast(self.bias.value.row(0));
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Matrix) -> Matrix {
        let d = dy.cols() as f64;
        let dgain: Vec<f64> = dy.hadamard(&cache.xhat).col_sums();
        self.gain.grad.add_assign(&Matrix::row_vector(&dgain));
        self.bias.grad.add_assign(&Matrix::row_vector(&dy.col_sums()));

        let dxhat = dy.mul_row_broadcast(self.gain.value.row(0));
        let mut dx = Matrix::zeros(dy.rows(), dy.cols());
        for r in 0..dy.rows() {
            let istd = cache.inv_std[r];
            let dxh = dxhat.row(r);
            let xh = cache.xhat.row(r);
            let sum_dxh: f64 = dxh.iter().sum();
            let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
            for c in 0..dy.cols() {
                let v = istd / d * (d * dxh[c] - sum_dxh - xh[c] * sum_dxh_xh);
                dx.set(r, c, v);
            }
        }
        dx
    }
}

impl Params for LayerNorm {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

pub struct ActivationCache {
    /// Forward output for tanh, forward input for relu.
    saved: Matrix,
    kind: Activation,
}

impl Activation {
    pub fn forward(self, x: &Matrix) -> (Matrix, ActivationCache) {
        match self {
            Activation::Tanh => {
                let y = x.map(f64::tanh);
                let saved = y.clone();
                (y, ActivationCache { saved, kind: self })
            }
            Activation::Relu => {
                let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
                (
                    y,
                    ActivationCache {
                        saved: x.clone(),
                        kind: self,
                    },
                )
            }
        }
    }

    pub fn backward(cache: &ActivationCache, dy: &Matrix) -> Matrix {
        match cache.kind {
            Activation::Tanh => {
                // d tanh = 1 - tanh^2, with tanh cached in `saved`
                let mut dx = dy.clone();
                for (g, &t) in dx.data_mut().iter_mut().zip(cache.saved.data()) {
                    *g *= 1.0 - t * t;
                }
                dx
            }
            Activation::Relu => {
                let mut dx = dy.clone();
                for (g, &x) in dx.data_mut().iter_mut().zip(cache.saved.data()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
                dx
            }
        }
    }
}

/// Token embedding table (vocab x d).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding {
    pub table: Parameter,
}

pub struct EmbeddingCache {
    ids: Vec<usize>,
}

impl Embedding {
    pub fn xavier(vocab: usize, d: usize, rng: &mut impl rand::Rng) -> Self {
        Embedding {
            table: Parameter::xavier(vocab, d, rng),
        }
    }

    pub fn forward(&self, ids: &[usize]) -> (Matrix, EmbeddingCache) {
        let d = self.table.value.cols();
        let mut out = Matrix::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.table.value.row(id));
        }
        (out, EmbeddingCache { ids: ids.to_vec() })
    }

    pub fn backward(&mut self, cache: &EmbeddingCache, dy: &Matrix) {
        for (r, &id) in cache.ids.iter().enumerate() {
            for (g, &v) in self.table.grad.row_mut(id).iter_mut().zip(dy.row(r)) {
                *g += v;
            }
        }
    }
}

impl Params for Embedding {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

/// Backward of row-wise log-softmax: given logp = log_softmax(logits) and the
/// upstream gradient wrt logp, returns the gradient wrt logits.
pub fn log_softmax_backward(logp: &Matrix, dlogp: &Matrix) -> Matrix {
    let mut dx = dlogp.clone();
    for r in 0..dx.rows() {
        let sum: f64 = dlogp.row(r).iter().sum();
        let lrow = logp.row(r);
        for (c, g) in dx.row_mut(r).iter_mut().enumerate() {
            *g -= lrow[c].exp() * sum;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let ln = LayerNorm::new(3);
        let x = Matrix::row_vector(&[5.0, 5.0, 5.0]);
        let (y, _) = ln.forward(&x);
        for &v in y.data() {
            assert!(v.abs() < 1e-4, "zero-variance row must map near zero, got {v}");
        }
    }

    #[test]
    fn layer_norm_two_values() {
        let ln = LayerNorm::new(2);
        let x = Matrix::row_vector(&[1.0, 3.0]);
        let (y, _) = ln.forward(&x);
        assert!((y.get(0, 0) + 1.0).abs() < 1e-7);
        assert!((y.get(0, 1) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_zero_gain_gives_bias() {
        let mut ln = LayerNorm::new(2);
        ln.gain.value = Matrix::zeros(1, 2);
        ln.bias.value = Matrix::row_vector(&[0.7, -0.3]);
        let x = Matrix::from_rows(&[vec![1.0, 9.0], vec![-4.0, 2.0]]);
        let (y, _) = ln.forward(&x);
        for r in 0..2 {
            assert_eq!(y.row(r), &[0.7, -0.3]);
        }
    }

    #[test]
    fn activations_trivial() {
        let x = Matrix::row_vector(&[0.0]);
        let (y, _) = Activation::Tanh.forward(&x);
        assert_eq!(y.get(0, 0), 0.0);

        let x = Matrix::row_vector(&[-1.0, 2.0]);
        let (y, _) = Activation::Relu.forward(&x);
        assert_eq!(y.data(), &[0.0, 2.0]);

        let x = Matrix::row_vector(&[1.0]);
        let (y, _) = Activation::Tanh.forward(&x);
        assert!((y.get(0, 0) - 0.761594).abs() < 1e-6);
    }
}
