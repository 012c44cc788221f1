//! Attention composed from tensor primitives.
//!
//! The encoder uses the fused [`Graph::multi_head_attention`] op. The
//! functions here build the same computation out of matmul, transpose,
//! scale and softmax, per head, and serve as the reference route.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Per-head projections `W_i^Q, W_i^K, W_i^V` (`d x d_k`) and the output
/// projection `W^O` (`h*d_k x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub query: Vec<Tensor<T>>,
    pub key: Vec<Tensor<T>>,
    pub value: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

impl<T: Real> AttentionWeights<T> {
    pub fn heads(&self) -> usize {
        self.query.len()
    }

    /// Splits a fused `[d, 3d]` matrix with column blocks `[Q | K | V]`.
    pub fn from_fused(w_qkv: &Tensor<T>, w_o: &Tensor<T>, heads: usize) -> Result<Self> {
        let (d, three_d) = w_qkv.dims2()?;
        if three_d != 3 * d || heads == 0 || d % heads != 0 || w_o.shape() != [d, d] {
            return Err(Error::shape("attention weights", w_qkv.shape(), w_o.shape()));
        }
        let dk = d / heads;
        let slice = |block: usize, h: usize| {
            Tensor::from_fn(vec![d, dk], |i| {
                let (r, c) = (i / dk, i % dk);
                w_qkv.at2(r, block * d + h * dk + c)
            })
        };
        Ok(Self {
            query: (0..heads).map(|h| slice(0, h)).collect(),
            key: (0..heads).map(|h| slice(1, h)).collect(),
            value: (0..heads).map(|h| slice(2, h)).collect(),
            output: w_o.clone(),
        })
    }

    /// Inverse of [`AttentionWeights::from_fused`].
    pub fn to_fused(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let heads = self.heads();
        let (d, dk) = self.query.first().ok_or_else(|| Error::InvalidArgument("no heads".into()))?.dims2()?;
        if dk * heads != d {
            return Err(Error::shape("attention weights", &[d, dk * heads], &[d, d]));
        }
        let blocks = [&self.query, &self.key, &self.value];
        let w = Tensor::from_fn(vec![d, 3 * d], |i| {
            let (r, c) = (i / (3 * d), i % (3 * d));
            let (block, rest) = (c / d, c % d);
            blocks[block][rest / dk].at2(r, rest % dk)
        });
        Ok((w, self.output.clone()))
    }
}

/// `softmax(Q K^T / tau) V` on `[n, d_k]` inputs. Returns the output and the
/// `[n, n]` weight matrix.
pub fn scaled_dot_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, tau: T) -> Result<(Var, Var)> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "attention temperature must be positive, got {tau}"
        )));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, T::one() / tau);
    let weights = g.softmax(logits, 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head self-attention on `[n, d]` from per-head projection leaves,
/// `Concat(head_1..head_h) W^O` with `tau = tau_multiplier * sqrt(d_k)`.
pub fn mhsa_vars<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    heads: &[(Var, Var, Var)],
    w_o: Var,
    tau_multiplier: f64,
) -> Result<Var> {
    let (wq, _, _) = *heads.first().ok_or_else(|| Error::InvalidArgument("no heads".into()))?;
    let dk = g.shape(wq)[1];
    let tau = T::from_f64_lossy(tau_multiplier * (dk as f64).sqrt());
    let mut outs = Vec::with_capacity(heads.len());
    for &(wq, wk, wv) in heads {
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        outs.push(scaled_dot_attention(g, q, k, v, tau)?.0);
    }
    let cat = g.concat_cols(&outs)?;
    g.matmul(cat, w_o)
}

/// Tensor-level [`mhsa_vars`] on a gradient-free graph.
pub fn mhsa<T: Real>(x: &Tensor<T>, w: &AttentionWeights<T>, tau_multiplier: f64) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let xv = g.leaf(x);
    let heads: Vec<_> = (0..w.heads())
        .map(|h| (g.leaf(&w.query[h]), g.leaf(&w.key[h]), g.leaf(&w.value[h])))
        .collect();
    let wo = g.leaf(&w.output);
    let out = mhsa_vars(&mut g, xv, &heads, wo, tau_multiplier)?;
    Ok(g.tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tensor::normal_tensor;

    #[test]
    fn fused_split_round_trips() {
        let mut rng = substream(0, "t", 0);
        let w: Tensor<f64> = normal_tensor(vec![8, 24], 1.0, &mut rng);
        let o: Tensor<f64> = normal_tensor(vec![8, 8], 1.0, &mut rng);
        let aw = AttentionWeights::from_fused(&w, &o, 2).unwrap();
        assert_eq!(aw.heads(), 2);
        assert_eq!(aw.query[0].shape(), &[8, 4]);
        let (w2, o2) = aw.to_fused().unwrap();
        assert_eq!(w2.data(), w.data());
        assert_eq!(o2, o);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let mut g = Graph::<f64>::inference();
        let q = g.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(scaled_dot_attention(&mut g, q, q, q, 0.0).is_err());
    }
}
