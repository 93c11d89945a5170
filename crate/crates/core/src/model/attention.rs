//! Multi-head scaled dot-product attention with a hand-derived backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{Linear, LinearCache};
use crate::numerics::matrix::{softmax_in_place, Matrix};
use crate::numerics::param::{join, Parameter, Params};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

pub struct AttentionCache {
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    o_cache: LinearCache,
    /// Per-head attention weights (rows over queries, cols over keys).
    weights: Vec<Matrix>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut impl rand::Rng) -> Self {
        MultiHeadAttention {
            wq: Linear::xavier(d_model, d_model, rng),
            // a key bias is invisible to the softmax, so it is omitted
            wk: Linear::xavier_no_bias(d_model, d_model, rng),
            wv: Linear::xavier(d_model, d_model, rng),
            wo: Linear::xavier(d_model, d_model, rng),
            n_heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.wq.out_dim() / self.n_heads
    }

    /// Attention with queries from `q_input` and keys/values from `kv_input`.
    /// With `causal`, query position t attends only to key positions <= t.
    pub fn forward(&self, q_input: &Matrix, kv_input: &Matrix, causal: bool) -> Result<(Matrix, AttentionCache)> {
        let d_model = self.wq.in_dim();
        if q_input.cols() != d_model || kv_input.cols() != d_model {
            return Err(Error::Dimension(format!(
                "attention: inputs ({}, {}) and ({}, {}) must have {d_model} columns",
                q_input.rows(),
                q_input.cols(),
                kv_input.rows(),
                kv_input.cols()
            )));
        }
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let (q, q_cache) = self.wq.forward(q_input);
        let (k, k_cache) = self.wk.forward(kv_input);
        let (v, v_cache) = self.wv.forward(kv_input);

        let mut concat = Matrix::zeros(q.rows(), d_model);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.col_slice(h * dk, dk);
            let kh = k.col_slice(h * dk, dk);
            let vh = v.col_slice(h * dk, dk);
            let mut scores = qh.matmul(&kh.transpose())?.scale(scale);
            if causal {
                for i in 0..scores.rows() {
                    for j in (i + 1)..scores.cols() {
                        scores.set(i, j, f64::NEG_INFINITY);
                    }
                }
            }
            for r in 0..scores.rows() {
                softmax_in_place(scores.row_mut(r));
            }
            let out_h = scores.matmul(&vh)?;
            concat.set_col_slice(h * dk, &out_h);
            weights.push(scores);
        }
        let (out, o_cache) = self.wo.forward(&concat);
        Ok((
            out,
            AttentionCache {
                q_cache,
                k_cache,
                v_cache,
                o_cache,
                weights,
                q,
                k,
                v,
            },
        ))
    }

    /// Returns (d_q_input, d_kv_input). For self-attention the caller adds
    /// the two.
    pub fn backward(&mut self, cache: &AttentionCache, dy: &Matrix) -> (Matrix, Matrix) {
        let dk_dim = self.head_dim();
        let scale = 1.0 / (dk_dim as f64).sqrt();
        let d_concat = self.wo.backward(&cache.o_cache, dy);

        let mut dq = Matrix::zeros(cache.q.rows(), cache.q.cols());
        let mut dkm = Matrix::zeros(cache.k.rows(), cache.k.cols());
        let mut dvm = Matrix::zeros(cache.v.rows(), cache.v.cols());
        for h in 0..self.n_heads {
            let a = &cache.weights[h];
            let d_oh = d_concat.col_slice(h * dk_dim, dk_dim);
            let vh = cache.v.col_slice(h * dk_dim, dk_dim);
            let kh = cache.k.col_slice(h * dk_dim, dk_dim);
            let qh = cache.q.col_slice(h * dk_dim, dk_dim);

            let da = d_oh.matmul(&vh.transpose()).unwrap();
            let dvh = a.transpose().matmul(&d_oh).unwrap();

            // softmax rows backward
            let mut ds = Matrix::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                let arow = a.row(r);
                let darow = da.row(r);
                let dot: f64 = arow.iter().zip(darow).map(|(x, y)| x * y).sum();
                for c in 0..a.cols() {
                    ds.set(r, c, arow[c] * (darow[c] - dot));
                }
            }
            let dqh = ds.matmul(&kh).unwrap().scale(scale);
            let dkh = ds.transpose().matmul(&qh).unwrap().scale(scale);
            dq.set_col_slice(h * dk_dim, &dqh);
            dkm.set_col_slice(h * dk_dim, &dkh);
            dvm.set_col_slice(h * dk_dim, &dvh);
        }
        let d_q_input = self.wq.backward(&cache.q_cache, &dq);
        let mut d_kv_input = self.wk.backward(&cache.k_cache, &dkm);
        d_kv_input.add_assign(&self.wv.backward(&cache.v_cache, &dvm));
        (d_q_input, d_kv_input)
    }
}

impl Params for MultiHeadAttention {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(4, 2, &mut rng);
        let x = Matrix::row_vector(&[0.3, -0.7, 1.2, 0.1]);
        let (out, _) = mha.forward(&x, &x, false).unwrap();
        // with one key the softmax is 1, so out = Wo(Wv x)
        let (v, _) = mha.wv.forward(&x);
        let (expected, _) = mha.wo.forward(&v);
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_first_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(4, 2, &mut rng);
        let x = Matrix::from_rows(&[vec![0.5, 0.2, -0.1, 0.9], vec![1.0, -1.0, 0.3, 0.4]]);
        let (_, cache) = mha.forward(&x, &x, true).unwrap();
        for w in &cache.weights {
            assert_eq!(w.get(0, 0), 1.0);
            assert_eq!(w.get(0, 1), 0.0);
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(4, 2, &mut rng);
        let x = Matrix::zeros(2, 3);
        match mha.forward(&x, &x, false) {
            Err(Error::Dimension(_)) => {}
            _ => panic!("expected dimension error"),
        }
    }
}
